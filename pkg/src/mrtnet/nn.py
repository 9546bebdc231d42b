"""Parameter initialisation and small layers shared by several modules."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

Params = dict[str, Tensor]


def uniform(rng: np.random.Generator, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def const(name: str, shape: tuple[int, ...], value: float) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)


def add_linear(p: Params, rng, prefix: str, d_in: int, d_out: int, bias: bool = True) -> None:
    p[f"{prefix}.w"] = uniform(rng, f"{prefix}.w", (d_in, d_out), d_in)
    if bias:
        p[f"{prefix}.b"] = uniform(rng, f"{prefix}.b", (d_out,), d_in)


def apply_linear(p: Params, prefix: str, x: Tensor) -> Tensor:
    return dc.linear(x, p[f"{prefix}.w"], p.get(f"{prefix}.b"))


def add_layer_norm(p: Params, prefix: str, d: int) -> None:
    p[f"{prefix}.gamma"] = const(f"{prefix}.gamma", (d,), 1.0)
    p[f"{prefix}.beta"] = const(f"{prefix}.beta", (d,), 0.0)


def apply_layer_norm(p: Params, prefix: str, x: Tensor) -> Tensor:
    return dc.layer_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])


def add_ds_conv(p: Params, rng, prefix: str, d_in: int, d_out: int, kernel: int) -> None:
    """Depthwise-separable conv: per-channel kernel then pointwise mix."""
    if kernel % 2 == 0:
        raise dc.ConfigError(f"kernel size must be odd, got {kernel}")
    p[f"{prefix}.dw"] = uniform(rng, f"{prefix}.dw", (kernel, d_in), kernel)
    p[f"{prefix}.dw_b"] = uniform(rng, f"{prefix}.dw_b", (d_in,), kernel)
    add_linear(p, rng, f"{prefix}.pw", d_in, d_out)


def apply_ds_conv(p: Params, prefix: str, x: Tensor) -> Tensor:
    h = dc.conv1d(x, p[f"{prefix}.dw"], p[f"{prefix}.dw_b"], depthwise=True)
    return apply_linear(p, f"{prefix}.pw", h)


def masked(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Zero the rows of ``x`` (``[..., n, d]``) where ``mask`` (``[..., n]``) is False."""
    if mask is None:
        return x
    return x * np.asarray(mask, dtype=np.float64)[..., None]


def count(p: Params) -> int:
    return int(sum(t.data.size for t in p.values()))
