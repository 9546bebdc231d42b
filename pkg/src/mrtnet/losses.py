"""Boundary cross-entropy plus per-resolution map losses (BCE, SSIM, soft IoU)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tensor
from .predictor import BoundaryScores

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alphas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ssim_window: int = 8
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    use_ce: bool = True
    use_ssim: bool = True
    use_iou: bool = True

    def __post_init__(self):
        if len(self.alphas) != 3 or any(a < 0 for a in self.alphas):
            raise ValueError(f"alphas must be three non-negative weights, got {self.alphas}")
        if self.ssim_window < 2:
            raise ValueError("ssim_window must be at least 2")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilisers must be positive")


@dataclass
class LossReport:
    total: Tensor
    boundary_ce: float
    per_resolution: list[float] = field(default_factory=list)
    components: list[tuple[float, float, float]] = field(default_factory=list)
    clamped: bool = False

    def named_components(self) -> list[tuple[str, float]]:
        """Components in a fixed order, used for logging and NaN diagnostics."""
        out = [("boundary_ce", self.boundary_ce)]
        for k, (ce, ssim, iou) in enumerate(self.components, start=1):
            out += [(f"ce_map@{k}", ce), (f"ssim@{k}", ssim), (f"iou@{k}", iou)]
        return out


def _check_same(s: Tensor, g: np.ndarray) -> None:
    if s.shape != g.shape:
        raise ContractError(f"map shapes differ: {s.shape} vs {g.shape}")


def _pick(p: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    if p.ndim == 1:
        return p[int(labels)]
    return p[np.arange(p.shape[0]), labels]


def ce_boundary(p_start, p_end, y_start, y_end) -> tuple[Tensor, bool]:
    """Half the summed negative log-likelihood of the start and end labels.

    Returns the batch-mean loss and whether any label probability hit the
    1e-12 floor.
    """
    p_start, p_end = dc.as_tensor(p_start), dc.as_tensor(p_end)
    ps = _pick(p_start, y_start)
    pe = _pick(p_end, y_end)
    clamped = bool((ps.data < PROB_FLOOR).any() or (pe.data < PROB_FLOOR).any())
    nll = dc.neg(dc.log(dc.clip(ps, PROB_FLOOR, 1.0))) + dc.neg(dc.log(dc.clip(pe, PROB_FLOOR, 1.0)))
    return dc.mean(nll * 0.5), clamped


def ce_map(s, g) -> Tensor:
    """Mean per-clip binary cross-entropy, averaged over the batch."""
    s = dc.as_tensor(s)
    g = np.asarray(g, dtype=np.float64)
    _check_same(s, g)
    s = dc.clip(s, PROB_FLOOR, 1.0 - PROB_FLOOR)
    bce = dc.neg(dc.log(s) * g + dc.log(1.0 - s) * (1.0 - g))
    return dc.mean(bce)


def ssim_loss(s, g, cfg: LossConfig = LossConfig(), window: int | None = None) -> Tensor:
    """One minus the mean windowed SSIM, population statistics, stride 1."""
    s = dc.as_tensor(s)
    g = dc.as_tensor(g)
    if s.shape != g.shape:
        raise ContractError(f"map shapes differ: {s.shape} vs {g.shape}")
    n = cfg.ssim_window if window is None else window
    if n > s.shape[-1]:
        raise ContractError(f"SSIM window {n} longer than map of width {s.shape[-1]}")
    mu_x = dc.window_mean(s, n)
    mu_y = dc.window_mean(g, n)
    var_x = dc.window_mean(s * s, n) - mu_x * mu_x
    var_y = dc.window_mean(g * g, n) - mu_y * mu_y
    cov = dc.window_mean(s * g, n) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mu_x * mu_x + mu_y * mu_y + cfg.c1) * (var_x + var_y + cfg.c2)
    return 1.0 - dc.mean(num / den)


def iou_loss(s, g) -> Tensor:
    """Soft IoU loss; a sample whose prediction and target are both empty scores 0."""
    s = dc.as_tensor(s)
    g = np.asarray(g, dtype=np.float64)
    _check_same(s, g)
    inter = dc.tsum(s * g, axis=-1)
    union = dc.tsum(s + g - s * g, axis=-1)
    nonempty = union.data > 0
    ratio = inter / dc.where(nonempty, union, 1.0)
    return dc.mean((1.0 - ratio) * nonempty.astype(np.float64))


def map_losses(s: Tensor, g: np.ndarray, cfg: LossConfig) -> tuple[Tensor | None, ...]:
    """(ce, ssim, iou) for one resolution; disabled members come back as None."""
    window = min(cfg.ssim_window, s.shape[-1])
    ce = ce_map(s, g) if cfg.use_ce else None
    ssim = ssim_loss(s, g, cfg, window=window) if cfg.use_ssim else None
    iou = iou_loss(s, g) if cfg.use_iou else None
    return ce, ssim, iou


def total_loss(maps: list[Tensor], gts: list[np.ndarray], boundaries: BoundaryScores,
               y_start, y_end, cfg: LossConfig = LossConfig()) -> LossReport:
    """Boundary CE once at full resolution plus the weighted map losses at each scale."""
    if len(maps) != 3 or len(gts) != 3:
        raise ContractError("expected maps and targets at three resolutions")
    for s, g in zip(maps, gts):
        _check_same(s, np.asarray(g))
    bce, clamped = ce_boundary(boundaries.p_start, boundaries.p_end, y_start, y_end)
    total = bce
    per_res, comps = [], []
    for alpha, s, g in zip(cfg.alphas, maps, gts):
        parts = map_losses(s, np.asarray(g, dtype=np.float64), cfg)
        level = None
        for part in parts:
            if part is not None:
                level = part if level is None else level + part
        values = tuple(0.0 if part is None else part.item() for part in parts)
        comps.append(values)
        per_res.append(float(sum(values)))
        if level is not None and alpha != 0.0:
            total = total + level * alpha
    return LossReport(total, bce.item(), per_res, comps, clamped)
