"""Boundary scoring with stacked LSTMs, joint-argmax decoding, clip/second conversion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .diffcore import ContractError, Tensor
from .nn import Params


@dataclass
class BoundaryScores:
    s_start: Tensor
    s_end: Tensor
    p_start: Tensor
    p_end: Tensor


@dataclass
class TemporalSpan:
    start_idx: int
    end_idx: int
    start_sec: float
    end_sec: float
    duration_sec: float


def init_predictor_params(rng: np.random.Generator, d: int) -> Params:
    p: Params = {}
    for branch in ("start", "end"):
        prefix = f"pred.{branch}.lstm"
        nn.add_linear(p, rng, f"{prefix}.x", d, 4 * d)
        p[f"{prefix}.h"] = nn.uniform(rng, f"{prefix}.h", (d, 4 * d), d)
        # forget gate starts open
        p[f"{prefix}.x.b"].data[d:2 * d] = 1.0
        nn.add_linear(p, rng, f"pred.{branch}.out", 2 * d, 1)
    return p


def _run_lstm(p: Params, prefix: str, x: Tensor) -> Tensor:
    squeeze = x.ndim == 2
    if squeeze:
        x = dc.reshape(x, (1,) + x.shape)
    hidden = dc.lstm(nn.apply_linear(p, f"{prefix}.x", x), p[f"{prefix}.h"])
    return dc.reshape(hidden, hidden.shape[1:]) if squeeze else hidden


def predict_scores(features: Tensor, p: Params, mask: np.ndarray | None = None) -> BoundaryScores:
    """Start logits from one LSTM pass; the end LSTM runs over the start hidden states."""
    mask = np.ones(features.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, bool)
    h_start = _run_lstm(p, "pred.start.lstm", features)
    h_end = _run_lstm(p, "pred.end.lstm", h_start)
    s_start = nn.apply_linear(p, "pred.start.out", dc.concat([h_start, features], axis=-1))[..., 0]
    s_end = nn.apply_linear(p, "pred.end.out", dc.concat([h_end, features], axis=-1))[..., 0]
    return BoundaryScores(
        s_start, s_end,
        dc.softmax(s_start, axis=-1, mask=mask),
        dc.softmax(s_end, axis=-1, mask=mask),
    )


def joint_argmax(p_start, p_end) -> tuple[int, int]:
    """Best (s, e) with s <= e under P_s[s] * P_e[e]; ties go to the smallest s, then e."""
    ps = np.asarray(p_start, dtype=np.float64)
    pe = np.asarray(p_end, dtype=np.float64)
    joint = np.triu(np.outer(ps, pe))
    joint[np.tril_indices(len(ps), -1)] = -np.inf
    flat = int(np.argmax(joint))  # row-major: first hit is smallest s, then e
    return divmod(flat, len(pe))


def joint_probability(p_start, p_end, span: tuple[int, int]) -> float:
    return float(np.asarray(p_start)[span[0]] * np.asarray(p_end)[span[1]])


def time_to_index(tau: float, duration: float, n: int) -> int:
    if not 0.0 <= tau <= duration:
        raise ContractError(f"time {tau} outside [0, {duration}]")
    idx = math.floor(tau / duration * n + 0.5)
    return min(max(idx, 0), n - 1)


def index_to_time(idx: int, n: int, duration: float) -> float:
    if not 0 <= idx <= n - 1:
        raise ContractError(f"index {idx} outside [0, {n - 1}]")
    return idx / n * duration


def decode(p_start, p_end, n_valid: int, duration: float) -> tuple[TemporalSpan, float]:
    """Decode a span over the first ``n_valid`` clips and convert it to seconds."""
    ps = np.asarray(p_start)[:n_valid]
    pe = np.asarray(p_end)[:n_valid]
    s, e = joint_argmax(ps, pe)
    span = TemporalSpan(s, e, index_to_time(s, n_valid, duration),
                        index_to_time(e, n_valid, duration), duration)
    return span, joint_probability(ps, pe, (s, e))
