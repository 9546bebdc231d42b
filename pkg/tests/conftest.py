import numpy as np
import pytest

from mrtnet import encoders


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_encoder(rng):
    """Encoder params for d_v=6, d_q=5, d=16, 4 heads."""
    return encoders.init_encoder_params(rng, 6, 5, 16, 64, 8, kernel=7, num_heads=4)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the lines are repeated in the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
