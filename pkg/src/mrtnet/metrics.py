"""Temporal IoU, R@1 at IoU thresholds and mIoU."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .diffcore import ContractError

THRESHOLDS = (0.3, 0.5, 0.7)

Span = tuple[float, float]


@dataclass
class EvalResult:
    r1_iou: dict[float, float]
    miou: float
    per_sample: list[tuple[Span, Span, float]] = field(default_factory=list)

    @property
    def num_samples(self) -> int:
        return len(self.per_sample)

    def report(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {f"r1_iou_{mu}": value for mu, value in self.r1_iou.items()}
        out["miou"] = self.miou
        out["num_samples"] = self.num_samples
        return out


def _endpoints(span) -> Span:
    if hasattr(span, "start_sec"):
        return float(span.start_sec), float(span.end_sec)
    start, end = span
    return float(start), float(end)


def temporal_iou(a, b) -> float:
    """IoU of two closed intervals on the real line.

    Zero-length intervals only match an identical zero-length interval.
    """
    a0, a1 = _endpoints(a)
    b0, b1 = _endpoints(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    if union == 0.0:
        return 1.0 if (a0, a1) == (b0, b1) else 0.0
    # disjoint spans that merely touch have zero overlap measure
    return inter / (a1 - a0 + b1 - b0 - inter) if inter > 0 else 0.0


def evaluate(preds: Sequence, gts: Sequence,
             thresholds: Iterable[float] = THRESHOLDS) -> EvalResult:
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ContractError("cannot evaluate an empty prediction list")
    per_sample = []
    for p, g in zip(preds, gts):
        per_sample.append((_endpoints(p), _endpoints(g), temporal_iou(p, g)))
    ious = [row[2] for row in per_sample]
    total = len(ious)
    r1 = {mu: 100.0 * sum(1 for v in ious if v > mu) / total for mu in thresholds}
    return EvalResult(r1, 100.0 * math.fsum(ious) / total, per_sample)
