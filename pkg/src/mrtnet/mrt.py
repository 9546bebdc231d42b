"""Multi-resolution temporal encoder-decoder with per-resolution map heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .diffcore import ContractError, Tensor
from .encoders import FeatureSequence, QueryEmbedding
from .nn import Params


@dataclass
class MrtFeatures:
    enc1: Tensor
    enc2: Tensor
    bridge: Tensor
    dec2: Tensor
    dec1: Tensor


@dataclass
class TemporalMap:
    scores: np.ndarray

    @property
    def width(self) -> int:
        return self.scores.shape[-1]


_STAGES = ("down1", "down2", "up2", "up1")


def init_mrt_params(rng: np.random.Generator, d: int, kernel: int = 7) -> Params:
    p: Params = {}
    for stage in _STAGES:
        d_in = 2 * d if stage.startswith("up") else d
        for j, width in enumerate((d_in, d)):
            prefix = f"mrt.{stage}.conv{j}"
            nn.add_ds_conv(p, rng, prefix, width, d, kernel)
            nn.add_layer_norm(p, f"{prefix}.ln", d)
    nn.add_linear(p, rng, "mrt.bridge.visual", d, d)
    nn.add_linear(p, rng, "mrt.bridge.word_score", d, 1)
    nn.add_linear(p, rng, "mrt.bridge.word", d, d)
    nn.add_linear(p, rng, "mrt.bridge.ffn", 2 * d, d)
    for head in ("low", "mid", "high"):
        p[f"mrt.head.{head}.w"] = nn.uniform(rng, f"mrt.head.{head}.w", (3, d, 1), 3 * d)
        p[f"mrt.head.{head}.b"] = nn.uniform(rng, f"mrt.head.{head}.b", (1,), 3 * d)
    return p


def conv_unit(p: Params, prefix: str, x: Tensor, mask: np.ndarray) -> Tensor:
    """Depthwise-separable conv, layer norm over channels, ReLU."""
    h = nn.apply_ds_conv(p, prefix, x)
    h = dc.relu(nn.apply_layer_norm(p, f"{prefix}.ln", h))
    return nn.masked(h, mask)


def _double_conv(p: Params, stage: str, x: Tensor, mask: np.ndarray) -> Tensor:
    x = conv_unit(p, f"mrt.{stage}.conv0", x, mask)
    return conv_unit(p, f"mrt.{stage}.conv1", x, mask)


def pool_mask(mask: np.ndarray) -> np.ndarray:
    n = mask.shape[-1]
    return mask.reshape(mask.shape[:-1] + (n // 2, 2)).any(axis=-1)


def pooled_query(p: Params, query: QueryEmbedding) -> Tensor:
    """Attention-weighted sum of projected word features, ``[..., 1, d]``."""
    q = query.words
    scores = nn.apply_linear(p, "mrt.bridge.word_score", q)          # [..., m, 1]
    weights = dc.softmax(scores, axis=-2, mask=np.asarray(query.mask)[..., None])
    words = nn.apply_linear(p, "mrt.bridge.word", q)
    return dc.tsum(words * weights, axis=-2, keepdims=True)


def _head(p: Params, name: str, x: Tensor) -> Tensor:
    logits = dc.conv1d(x, p[f"mrt.head.{name}.w"], p[f"mrt.head.{name}.b"])
    return dc.sigmoid(logits[..., 0])


def mrt_forward(video: FeatureSequence, query: QueryEmbedding,
                p: Params) -> tuple[MrtFeatures, list[Tensor]]:
    """Run the encoder-decoder; returns features and sigmoid maps at n/4, n/2, n."""
    x = video.features
    n = x.shape[-2]
    if n % 4:
        raise ContractError(f"sequence length {n} must be divisible by 4; pad it first")
    m1 = np.asarray(video.mask, dtype=bool)
    m2 = pool_mask(m1)
    m4 = pool_mask(m2)

    enc1 = x
    enc2 = dc.maxpool1d(_double_conv(p, "down1", enc1, m1))
    low = dc.maxpool1d(_double_conv(p, "down2", enc2, m2))

    visual = nn.apply_linear(p, "mrt.bridge.visual", low)
    language = pooled_query(p, query) + np.zeros(visual.shape)
    bridge = dc.relu(nn.apply_linear(p, "mrt.bridge.ffn", dc.concat([visual, language], axis=-1)))
    bridge = nn.masked(bridge, m4)

    dec2 = _double_conv(p, "up2", dc.concat([dc.upsample1d(bridge), enc2], axis=-1), m2)
    dec1 = _double_conv(p, "up1", dc.concat([dc.upsample1d(dec2), enc1], axis=-1), m1)

    maps = [_head(p, "low", bridge), _head(p, "mid", dec2), _head(p, "high", dec1)]
    return MrtFeatures(enc1, enc2, bridge, dec2, dec1), maps


def groundtruth_map(start: int, end: int, n: int) -> TemporalMap:
    if not 0 <= start <= end <= n - 1:
        raise ContractError(f"span ({start}, {end}) invalid for length {n}")
    scores = np.zeros(n)
    scores[start:end + 1] = 1.0
    return TemporalMap(scores)


def downsample_map(g: TemporalMap | np.ndarray, factor: int = 2) -> TemporalMap:
    scores = g.scores if isinstance(g, TemporalMap) else np.asarray(g, dtype=np.float64)
    w = scores.shape[-1]
    if w % factor:
        raise ContractError(f"map width {w} not divisible by {factor}")
    return TemporalMap(scores.reshape(scores.shape[:-1] + (w // factor, factor)).max(axis=-1))


def pyramid(g: TemporalMap) -> list[TemporalMap]:
    """Ground-truth maps ordered like the heads: n/4, n/2, n."""
    half = downsample_map(g)
    return [downsample_map(half), half, g]
