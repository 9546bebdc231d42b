"""End-to-end wiring: encoders -> fusion -> MRT -> boundary predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoders, mrt, predictor
from .data import Batch
from .diffcore import ConfigError, Tensor
from .encoders import FeatureSequence, QueryEmbedding
from .losses import LossConfig, LossReport, total_loss
from .mrt import MrtFeatures
from .nn import Params
from .predictor import BoundaryScores, TemporalSpan


@dataclass(frozen=True)
class Architecture:
    d_v: int
    d_q: int = 300
    d: int = 128
    n_model: int = 64
    max_query_len: int = 32
    kernel_size: int = 7
    num_heads: int = 8

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.n_model % 4:
            raise ConfigError(f"n_model must be divisible by 4, got {self.n_model}")
        if self.d % self.num_heads:
            raise ConfigError(f"d={self.d} not divisible by num_heads={self.num_heads}")


@dataclass
class ForwardOutput:
    video: FeatureSequence
    query: QueryEmbedding
    fused: FeatureSequence
    features: MrtFeatures
    maps: list[Tensor]
    scores: BoundaryScores


def init_params(arch: Architecture, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    p = encoders.init_encoder_params(rng, arch.d_v, arch.d_q, arch.d, arch.n_model,
                                     arch.max_query_len, arch.kernel_size, arch.num_heads)
    p.update(mrt.init_mrt_params(rng, arch.d, arch.kernel_size))
    p.update(predictor.init_predictor_params(rng, arch.d))
    return p


class MRTNet:
    def __init__(self, arch: Architecture, params: Params | None = None, seed: int = 0):
        self.arch = arch
        self.params = init_params(arch, seed) if params is None else params

    def forward(self, video: np.ndarray, video_mask: np.ndarray, query: np.ndarray,
                query_mask: np.ndarray, dropout: float = 0.0,
                rng: np.random.Generator | None = None) -> ForwardOutput:
        p = self.params
        v, q = encoders.encode(video, query, p, video_mask, query_mask,
                               num_heads=self.arch.num_heads, dropout=dropout, rng=rng)
        scores = encoders.similarity(v, q, p)
        fused = encoders.fuse(v, q, scores, p)
        feats, maps = mrt.mrt_forward(fused, q, p)
        bounds = predictor.predict_scores(feats.dec1, p, video_mask)
        return ForwardOutput(v, q, fused, feats, maps, bounds)

    def forward_batch(self, batch: Batch, dropout: float = 0.0,
                      rng: np.random.Generator | None = None) -> ForwardOutput:
        return self.forward(batch.video, batch.video_mask, batch.query, batch.query_mask,
                            dropout, rng)

    def loss(self, batch: Batch, cfg: LossConfig, dropout: float = 0.0,
             rng: np.random.Generator | None = None) -> LossReport:
        out = self.forward_batch(batch, dropout, rng)
        return total_loss(out.maps, batch.maps, out.scores, batch.start, batch.end, cfg)

    def predict(self, batch: Batch) -> list[tuple[TemporalSpan, float]]:
        out = self.forward_batch(batch)
        ps, pe = out.scores.p_start.data, out.scores.p_end.data
        return [predictor.decode(ps[i], pe[i], s.n_valid, s.duration_sec)
                for i, s in enumerate(batch.samples)]
