"""Run configuration: flat ``key = value`` files overridden by command-line flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .diffcore import ConfigError
from .losses import LossConfig


@dataclass
class Config:
    d: int = 128
    d_q: int = 300
    n_model: int = 64
    max_query_len: int = 32
    kernel_size: int = 7
    num_heads: int = 8
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    alphas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ssim_window: int = 8
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    dropout: float = 0.2
    seed: int = 0
    early_stop_patience: int = 10
    no_ssim: bool = False
    no_iou: bool = False
    ce_only: bool = False
    annotations: str = ""
    val_annotations: str = ""
    features_dir: str = ""
    embeddings: str = ""
    out_dir: str = "runs/default"
    extra: dict[str, str] = field(default_factory=dict, repr=False)

    def validate(self) -> "Config":
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.n_model % 4:
            raise ConfigError(f"n_model must be divisible by 4, got {self.n_model}")
        if self.d % self.num_heads:
            raise ConfigError(f"d={self.d} must be divisible by num_heads={self.num_heads}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        try:
            self.loss_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alphas=tuple(self.alphas), ssim_window=self.ssim_window, c1=self.c1, c2=self.c2,
            use_ssim=not (self.no_ssim or self.ce_only),
            use_iou=not (self.no_iou or self.ce_only),
        )

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out.pop("extra")
        out["alphas"] = list(self.alphas)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "Config":
        cfg = cls()
        for key, value in values.items():
            set_value(cfg, key, value)
        return cfg


_FIELDS = {f.name: f for f in fields(Config) if f.name != "extra"}


def _coerce(name: str, raw: Any) -> Any:
    kind = _FIELDS[name].type
    if not isinstance(raw, str):
        return tuple(float(v) for v in raw) if name == "alphas" else raw
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if name == "alphas":
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def set_value(cfg: Config, key: str, value: Any) -> None:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(cfg, key, _coerce(key, value))


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> Config:
    """Defaults, then the file, then ``overrides`` (flags win)."""
    cfg = Config()
    if path:
        for key, value in parse_config_file(path).items():
            set_value(cfg, key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            set_value(cfg, key, value)
    return cfg.validate()


def write_config(cfg: Config, path: str | Path) -> None:
    lines = []
    for key, value in cfg.to_dict().items():
        if key == "alphas":
            value = ",".join(repr(float(a)) for a in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
