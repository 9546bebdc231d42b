"""Feature projection, the shared embedding encoder block, and video-query fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .diffcore import ConfigError, Tensor
from .nn import Params


@dataclass
class FeatureSequence:
    features: Tensor
    mask: np.ndarray

    @property
    def n(self) -> int:
        return self.features.shape[-2]


@dataclass
class QueryEmbedding:
    words: Tensor
    mask: np.ndarray

    @property
    def m(self) -> int:
        return self.words.shape[-2]


def init_encoder_params(rng: np.random.Generator, d_v: int, d_q: int, d: int,
                        max_video_len: int, max_query_len: int, kernel: int = 7,
                        num_heads: int = 8, conv_layers: int = 4) -> Params:
    if d % num_heads:
        raise ConfigError(f"hidden dim {d} not divisible by {num_heads} heads")
    p: Params = {}
    nn.add_linear(p, rng, "enc.proj_v", d_v, d)
    nn.add_linear(p, rng, "enc.proj_q", d_q, d)
    p["enc.pos_v"] = nn.uniform(rng, "enc.pos_v", (max_video_len, d), d)
    p["enc.pos_q"] = nn.uniform(rng, "enc.pos_q", (max_query_len, d), d)
    for i in range(conv_layers):
        nn.add_layer_norm(p, f"enc.block.conv{i}.ln", d)
        nn.add_ds_conv(p, rng, f"enc.block.conv{i}", d, d, kernel)
    nn.add_layer_norm(p, "enc.block.attn.ln", d)
    for part in ("q", "k", "v", "o"):
        nn.add_linear(p, rng, f"enc.block.attn.{part}", d, d)
    nn.add_layer_norm(p, "enc.block.ffn.ln", d)
    nn.add_linear(p, rng, "enc.block.ffn.1", d, d)
    nn.add_linear(p, rng, "enc.block.ffn.2", d, d)
    p["enc.sim.w"] = nn.uniform(rng, "enc.sim.w", (3, d), 3 * d)
    nn.add_linear(p, rng, "enc.fuse", 4 * d, d)
    return p


def _conv_layers(p: Params) -> int:
    return sum(1 for name in p if name.startswith("enc.block.conv") and name.endswith(".dw"))


def multi_head_attention(p: Params, prefix: str, x: Tensor, mask: np.ndarray,
                         num_heads: int) -> Tensor:
    *lead, n, d = x.shape
    dh = d // num_heads

    def split(t: Tensor) -> Tensor:
        t = dc.reshape(t, tuple(lead) + (n, num_heads, dh))
        return dc.swapaxes(t, -2, -3)  # [..., h, n, dh]

    q = split(nn.apply_linear(p, f"{prefix}.q", x))
    k = split(nn.apply_linear(p, f"{prefix}.k", x))
    v = split(nn.apply_linear(p, f"{prefix}.v", x))
    logits = (q @ dc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    key_mask = np.asarray(mask, dtype=bool)[..., None, None, :]
    attn = dc.softmax(logits, axis=-1, mask=key_mask)
    ctx = dc.swapaxes(attn @ v, -2, -3)
    ctx = dc.reshape(ctx, tuple(lead) + (n, d))
    return nn.apply_linear(p, f"{prefix}.o", ctx)


def encoder_block(x: Tensor, mask: np.ndarray, p: Params, num_heads: int = 8) -> Tensor:
    """Pre-norm residual conv stack, self-attention and feed-forward.

    Pad rows are re-zeroed after every sublayer so the output at valid
    positions does not depend on how much padding follows them.
    """
    x = nn.masked(x, mask)
    for i in range(_conv_layers(p)):
        h = nn.apply_layer_norm(p, f"enc.block.conv{i}.ln", x)
        h = dc.relu(nn.apply_ds_conv(p, f"enc.block.conv{i}", h))
        x = nn.masked(x + h, mask)
    h = nn.apply_layer_norm(p, "enc.block.attn.ln", x)
    x = nn.masked(x + multi_head_attention(p, "enc.block.attn", h, mask, num_heads), mask)
    h = nn.apply_layer_norm(p, "enc.block.ffn.ln", x)
    h = nn.apply_linear(p, "enc.block.ffn.2", dc.relu(nn.apply_linear(p, "enc.block.ffn.1", h)))
    return nn.masked(x + h, mask)


def _full_mask(x: Tensor) -> np.ndarray:
    return np.ones(x.shape[:-1], dtype=bool)


def _embed(raw: Tensor, proj: str, pos: str, p: Params) -> Tensor:
    w = p[f"{proj}.w"]
    if raw.shape[-1] != w.shape[0]:
        raise ConfigError(f"{proj} expects feature dim {w.shape[0]}, got {raw.shape[-1]}")
    length = raw.shape[-2]
    table = p[pos]
    if length > table.shape[0]:
        raise ConfigError(f"sequence length {length} exceeds positional table {table.shape[0]}")
    return nn.apply_linear(p, proj, raw) + table[:length]


def encode(v_raw, q_raw, p: Params, v_mask: np.ndarray | None = None,
           q_mask: np.ndarray | None = None, num_heads: int = 8, dropout: float = 0.0,
           rng: np.random.Generator | None = None) -> tuple[FeatureSequence, QueryEmbedding]:
    """Project both modalities to ``d`` and run each through the shared block."""
    v_raw, q_raw = dc.as_tensor(v_raw), dc.as_tensor(q_raw)
    v_mask = _full_mask(v_raw) if v_mask is None else np.asarray(v_mask, dtype=bool)
    q_mask = _full_mask(q_raw) if q_mask is None else np.asarray(q_mask, dtype=bool)
    v = encoder_block(_embed(v_raw, "enc.proj_v", "enc.pos_v", p), v_mask, p, num_heads)
    q = encoder_block(_embed(q_raw, "enc.proj_q", "enc.pos_q", p), q_mask, p, num_heads)
    v = nn.masked(dc.dropout(v, dropout, rng), v_mask)
    q = nn.masked(dc.dropout(q, dropout, rng), q_mask)
    return FeatureSequence(v, v_mask), QueryEmbedding(q, q_mask)


def similarity(video: FeatureSequence, query: QueryEmbedding, p: Params) -> Tensor:
    """Trilinear scores ``w . [v_i; q_j; v_i * q_j]`` as an ``[..., n, m]`` tensor."""
    w = p["enc.sim.w"]
    v, q = video.features, query.words
    if v.shape[-1] != q.shape[-1]:
        raise dc.ShapeError(f"feature dims differ: {v.shape} vs {q.shape}")
    d = v.shape[-1]
    wv = dc.reshape(w[0], (d, 1))
    wq = dc.reshape(w[1], (d, 1))
    v_term = v @ wv                                  # [..., n, 1]
    q_term = dc.swapaxes(q @ wq, -1, -2)             # [..., 1, m]
    cross = (v * w[2]) @ dc.swapaxes(q, -1, -2)      # [..., n, m]
    return cross + v_term + q_term


def attention_weights(video: FeatureSequence, query: QueryEmbedding,
                      scores: Tensor) -> tuple[Tensor, Tensor]:
    """Row-wise (over words) and column-wise (over clips) masked softmax."""
    row = dc.softmax(scores, axis=-1, mask=np.asarray(query.mask)[..., None, :])
    col = dc.softmax(scores, axis=-2, mask=np.asarray(video.mask)[..., :, None])
    return row, col


def fuse(video: FeatureSequence, query: QueryEmbedding, scores: Tensor,
         p: Params) -> FeatureSequence:
    """Video-to-query and query-to-video attention folded back to ``d`` channels."""
    v, q = video.features, query.words
    row, col = attention_weights(video, query, scores)
    a = row @ q
    b = (row @ dc.swapaxes(col, -1, -2)) @ v
    fused = nn.apply_linear(p, "enc.fuse", dc.concat([v, a, v * a, v * b], axis=-1))
    return FeatureSequence(nn.masked(fused, video.mask), video.mask)
