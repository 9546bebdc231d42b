"""Finite-difference checks of every composite forward pass.

Each check builds a small random instance, differentiates a scalar of its
output with the tape, and compares against central differences. Results are
worst-case relative errors as measured by :func:`diffcore.check_gradients`.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import encoders, mrt, predictor
from .data import SynthSpec, collate, generate_synthetic
from .diffcore import Tensor
from .encoders import FeatureSequence, QueryEmbedding
from .losses import LossConfig, ce_boundary, ce_map, iou_loss, ssim_loss
from .model import Architecture, MRTNet


def check_encoder_fusion(step=1e-4, seed=0, n=8, m=3, d=16, per_tensor=4) -> float:
    rng = np.random.default_rng(seed)
    p = encoders.init_encoder_params(rng, 6, 5, d, n, m, kernel=7, num_heads=4)
    v_raw, q_raw = rng.standard_normal((n, 6)), rng.standard_normal((m, 5))
    w = rng.standard_normal((n, d))

    def loss():
        v, q = encoders.encode(v_raw, q_raw, p, num_heads=4)
        fused = encoders.fuse(v, q, encoders.similarity(v, q, p), p)
        return dc.tsum(fused.features * w)

    return float(max(dc.check_param_gradients(loss, p, step, per_tensor, seed).values()))


def check_mrt(step=1e-4, seed=0, n=8, m=3, d=16, per_tensor=4) -> float:
    rng = np.random.default_rng(seed)
    p = mrt.init_mrt_params(rng, d)
    video = FeatureSequence(Tensor(rng.standard_normal((n, d))), np.ones(n, bool))
    query = QueryEmbedding(Tensor(rng.standard_normal((m, d))), np.ones(m, bool))
    w = rng.standard_normal((n, d))
    wmaps = [rng.standard_normal(n // 4), rng.standard_normal(n // 2), rng.standard_normal(n)]

    def loss():
        feats, maps = mrt.mrt_forward(video, query, p)
        total = dc.tsum(feats.dec1 * w)
        for s, wm in zip(maps, wmaps):
            total = total + dc.tsum(s * wm)
        return total

    return float(max(dc.check_param_gradients(loss, p, step, per_tensor, seed).values()))


def check_predictor(step=1e-4, seed=0, n=8, d=16, per_tensor=6) -> float:
    rng = np.random.default_rng(seed)
    p = predictor.init_predictor_params(rng, d)
    x = Tensor(rng.standard_normal((2, n, d)))
    ys, ye = np.array([1, 3]), np.array([4, 6])

    def loss():
        b = predictor.predict_scores(x, p)
        return ce_boundary(b.p_start, b.p_end, ys, ye)[0]

    return float(max(dc.check_param_gradients(loss, p, step, per_tensor, seed).values()))


def check_losses(step=1e-4, seed=0, width=16) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    g = np.zeros(width)
    g[4:11] = 1.0
    logits = rng.standard_normal(width)
    cfg = LossConfig()
    return {
        "ce_boundary": dc.check_gradients(
            lambda x: ce_boundary(dc.softmax(x), dc.softmax(x * 0.5), 3, 9)[0], logits, step),
        "ce_map": dc.check_gradients(lambda x: ce_map(dc.sigmoid(x), g), logits, step),
        "ssim": dc.check_gradients(lambda x: ssim_loss(dc.sigmoid(x), g, cfg), logits, step),
        "iou": dc.check_gradients(lambda x: iou_loss(dc.sigmoid(x), g), logits, step),
    }


def check_full_model(step=1e-4, seed=0, n=8, d=16, per_tensor=3) -> float:
    spec = SynthSpec(num_samples=1, n=n, d_v=8, d_q=12, vocab_size=8, noise_std=0.3, seed=seed)
    samples, _ = generate_synthetic(spec)
    batch = collate(samples)
    net = MRTNet(Architecture(d_v=8, d_q=12, d=d, n_model=n, max_query_len=8, num_heads=4),
                 seed=seed)
    cfg = LossConfig()

    def loss():
        return net.loss(batch, cfg).total

    return float(max(dc.check_param_gradients(loss, net.params, step, per_tensor, seed).values()))


def run_suite(step: float = 1e-4, seed: int = 0) -> dict[str, float]:
    results = {
        "encoder_fusion": check_encoder_fusion(step, seed),
        "mrt": check_mrt(step, seed),
        "predictor": check_predictor(step, seed),
    }
    results.update(check_losses(step, seed))
    results["full_model"] = check_full_model(step, seed)
    return results
