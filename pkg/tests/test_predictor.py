import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrtnet import diffcore as dc
from mrtnet import predictor as pr
from mrtnet.diffcore import Tensor
from mrtnet.losses import ce_boundary

from .oracles import brute_force_argmax


def test_scores_shapes_at_default_size():
    rng = np.random.default_rng(0)
    p = pr.init_predictor_params(rng, 128)
    b = pr.predict_scores(Tensor(rng.standard_normal((64, 128))), p)
    for t in (b.s_start, b.s_end, b.p_start, b.p_end):
        assert t.shape == (64,)
    assert b.p_start.data.sum() == pytest.approx(1.0)


def test_identical_logits_give_uniform_distribution():
    # zero output layer -> every clip gets the same logit
    rng = np.random.default_rng(1)
    p = pr.init_predictor_params(rng, 8)
    for branch in ("start", "end"):
        p[f"pred.{branch}.out.w"].data[:] = 0.0
    b = pr.predict_scores(Tensor(rng.standard_normal((64, 8))), p)
    np.testing.assert_allclose(b.p_start.data, 1 / 64)
    np.testing.assert_allclose(b.p_end.data, 1 / 64)


def test_masked_clips_get_zero_probability():
    rng = np.random.default_rng(2)
    p = pr.init_predictor_params(rng, 8)
    mask = np.arange(16) < 10
    b = pr.predict_scores(Tensor(rng.standard_normal((16, 8))), p, mask)
    assert np.all(b.p_start.data[10:] == 0)
    assert b.p_end.data[:10].sum() == pytest.approx(1.0)


def test_end_branch_sees_start_branch():
    rng = np.random.default_rng(3)
    p = pr.init_predictor_params(rng, 8)
    x = Tensor(rng.standard_normal((12, 8)))
    before = pr.predict_scores(x, p).s_end.data.copy()
    p["pred.start.lstm.h"].data += 0.5
    assert not np.allclose(pr.predict_scores(x, p).s_end.data, before)


def test_ce_gradient_wrt_recurrent_weights():
    rng = np.random.default_rng(4)
    p = pr.init_predictor_params(rng, 6)
    x = Tensor(rng.standard_normal((10, 6)))
    sub = {k: p[k] for k in ("pred.start.lstm.h", "pred.end.lstm.h")}

    def loss():
        b = pr.predict_scores(x, p)
        return ce_boundary(b.p_start, b.p_end, 2, 7)[0]

    assert max(dc.check_param_gradients(loss, sub, 1e-4, per_tensor=30).values()) < 1e-3


def test_joint_argmax_examples():
    assert pr.joint_argmax([0.1, 0.6, 0.3], [0.5, 0.2, 0.3]) == (1, 2)
    assert pr.joint_probability([0.1, 0.6, 0.3], [0.5, 0.2, 0.3], (1, 2)) == pytest.approx(0.18)
    assert pr.joint_argmax([1.0, 0.0], [1.0, 0.0]) == (0, 0)


def test_joint_argmax_all_zero_valid_mass_uses_tie_break():
    # every valid pair scores 0, so the smallest (s, e) wins
    assert pr.joint_argmax([0.0, 1.0], [1.0, 0.0]) == (0, 0)
    assert pr.joint_argmax([0.0, 1.0], [0.5, 0.5]) == (1, 1)


def test_joint_argmax_ties_prefer_smallest_start_then_end():
    assert pr.joint_argmax([0.5, 0.5], [0.5, 0.5]) == (0, 0)
    assert pr.joint_argmax([0.25] * 4, [0.0, 0.0, 0.5, 0.5]) == (0, 2)


@given(st.integers(1, 64), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_joint_argmax_matches_brute_force(n, seed, coarse):
    rng = np.random.default_rng(seed)
    ps, pe = rng.random(n), rng.random(n)
    if coarse:  # force plenty of ties
        ps, pe = np.round(ps * 3), np.round(pe * 3)
    ps = ps / ps.sum() if ps.sum() else np.full(n, 1 / n)
    pe = pe / pe.sum() if pe.sum() else np.full(n, 1 / n)
    assert pr.joint_argmax(ps, pe) == brute_force_argmax(ps, pe)


def test_time_to_index_examples():
    assert pr.time_to_index(15.0, 30.0, 128) == 64
    assert pr.time_to_index(0.0, 30.0, 128) == 0
    assert pr.time_to_index(30.0, 30.0, 128) == 127
    assert pr.time_to_index(8.1, 30.0, 64) == 17
    assert pr.time_to_index(16.0, 30.0, 64) == 34


def test_time_to_index_rejects_out_of_range():
    with pytest.raises(dc.ContractError):
        pr.time_to_index(31.0, 30.0, 8)
    with pytest.raises(dc.ContractError):
        pr.time_to_index(-0.1, 30.0, 8)


def test_index_to_time_examples():
    assert pr.index_to_time(64, 128, 30.0) == 15.0
    assert pr.index_to_time(0, 128, 30.0) == 0.0
    with pytest.raises(dc.ContractError):
        pr.index_to_time(128, 128, 30.0)


@given(st.floats(0.01, 1e4), st.floats(0, 1), st.integers(1, 1024))
def test_quantization_round_trip_bound(duration, frac, n):
    tau = frac * duration
    back = pr.index_to_time(pr.time_to_index(tau, duration, n), n, duration)
    assert abs(back - tau) <= duration / n * (1 + 1e-12)


def test_decode_restricts_to_valid_prefix():
    ps = np.array([0.1, 0.2, 0.1, 0.6])
    pe = np.array([0.1, 0.2, 0.1, 0.6])
    span, prob = pr.decode(ps, pe, n_valid=3, duration=30.0)
    assert (span.start_idx, span.end_idx) == (1, 1)
    assert span.start_sec == pytest.approx(10.0)
    assert span.end_sec == pytest.approx(10.0)
    assert prob == pytest.approx(0.04)
    assert span.start_sec <= span.end_sec
