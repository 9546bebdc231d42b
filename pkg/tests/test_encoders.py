import numpy as np
import pytest

from mrtnet import diffcore as dc
from mrtnet import encoders, nn
from mrtnet.diffcore import Tensor
from mrtnet.encoders import FeatureSequence, QueryEmbedding


def test_encode_shapes_at_default_dimensions():
    rng = np.random.default_rng(0)
    p = encoders.init_encoder_params(rng, 1024, 300, 128, 64, 16)
    v, q = encoders.encode(rng.standard_normal((64, 1024)), rng.standard_normal((8, 300)), p)
    assert v.features.shape == (64, 128)
    assert q.words.shape == (8, 128)


def test_encode_rejects_wrong_feature_dim(small_encoder):
    with pytest.raises(dc.ConfigError):
        encoders.encode(np.ones((8, 7)), np.ones((3, 5)), small_encoder, num_heads=4)


def test_masked_rows_are_zero(small_encoder):
    rng = np.random.default_rng(1)
    v_mask = np.array([True] * 5 + [False] * 3)
    q_mask = np.array([True, True, False])
    v, q = encoders.encode(np.zeros((8, 6)), rng.standard_normal((3, 5)), small_encoder,
                           v_mask, q_mask, num_heads=4)
    assert np.all(v.features.data[5:] == 0.0)
    assert np.all(q.words.data[2:] == 0.0)
    fused = encoders.fuse(v, q, encoders.similarity(v, q, small_encoder), small_encoder)
    assert np.all(fused.features.data[5:] == 0.0)


def test_valid_positions_ignore_trailing_padding(small_encoder):
    rng = np.random.default_rng(2)
    raw = rng.standard_normal((5, 6))
    padded = np.vstack([raw, np.zeros((3, 6))])
    mask = np.array([True] * 5 + [False] * 3)
    q = rng.standard_normal((2, 5))
    short, _ = encoders.encode(raw, q, small_encoder, num_heads=4)
    long, _ = encoders.encode(padded, q, small_encoder, mask, num_heads=4)
    np.testing.assert_allclose(long.features.data[:5], short.features.data, atol=1e-12)


def test_shared_block_has_no_cross_talk(small_encoder):
    rng = np.random.default_rng(3)
    v_raw, q_raw = rng.standard_normal((8, 6)), rng.standard_normal((3, 5))
    v, q = encoders.encode(v_raw, q_raw, small_encoder, num_heads=4)
    v_alone = encoders.encoder_block(
        encoders._embed(Tensor(v_raw), "enc.proj_v", "enc.pos_v", small_encoder),
        np.ones(8, bool), small_encoder, 4)
    np.testing.assert_array_equal(v.features.data, v_alone.data)
    _, q_other = encoders.encode(rng.standard_normal((8, 6)), q_raw, small_encoder, num_heads=4)
    np.testing.assert_array_equal(q.words.data, q_other.words.data)


def _seq(x):
    x = np.asarray(x, dtype=float)
    return FeatureSequence(Tensor(x), np.ones(x.shape[0], bool))


def _query(x):
    x = np.asarray(x, dtype=float)
    return QueryEmbedding(Tensor(x), np.ones(x.shape[0], bool))


def test_similarity_shape():
    p = {"enc.sim.w": Tensor(np.ones((3, 4)))}
    assert encoders.similarity(_seq(np.ones((3, 4))), _query(np.ones((2, 4))), p).shape == (3, 2)


def test_similarity_zero_inputs_give_uniform_rows():
    p = {"enc.sim.w": Tensor(np.zeros((3, 4)))}
    v, q = _seq(np.zeros((3, 4))), _query(np.zeros((2, 4)))
    s = encoders.similarity(v, q, p)
    assert np.all(s.data == 0.0)
    row, _ = encoders.attention_weights(v, q, s)
    np.testing.assert_allclose(row.data, 0.5)


def test_similarity_hand_computed():
    v = np.array([[1.0, 2.0], [-1.0, 0.5]])
    q = np.array([[0.5, -1.0], [3.0, 1.0]])
    p = {"enc.sim.w": Tensor(np.ones((3, 2)))}
    s = encoders.similarity(_seq(v), _query(q), p).data
    for i in range(2):
        for j in range(2):
            expected = v[i].sum() + q[j].sum() + (v[i] * q[j]).sum()
            assert s[i, j] == pytest.approx(expected, abs=1e-12)


def _fuse_params(d, rng):
    p = {}
    nn.add_linear(p, rng, "enc.fuse", 4 * d, d)
    return p


def test_fuse_single_word_copies_query():
    rng = np.random.default_rng(4)
    v, q = _seq(rng.standard_normal((5, 3))), _query(rng.standard_normal((1, 3)))
    s = Tensor(rng.standard_normal((5, 1)))
    row, col = encoders.attention_weights(v, q, s)
    a = (row @ q.words).data
    np.testing.assert_allclose(a, np.repeat(q.words.data, 5, axis=0), atol=1e-15)


def test_fuse_uniform_scores_average_query():
    rng = np.random.default_rng(5)
    v, q = _seq(rng.standard_normal((4, 3))), _query(rng.standard_normal((3, 3)))
    row, _ = encoders.attention_weights(v, q, Tensor(np.full((4, 3), 0.7)))
    a = (row @ q.words).data
    np.testing.assert_allclose(a, np.tile(q.words.data.mean(axis=0), (4, 1)), atol=1e-12)


def test_fuse_shape_and_length_preservation():
    rng = np.random.default_rng(6)
    d = 128
    v, q = _seq(rng.standard_normal((64, d))), _query(rng.standard_normal((7, d)))
    p = _fuse_params(d, rng)
    p["enc.sim.w"] = nn.uniform(rng, "enc.sim.w", (3, d), 3 * d)
    out = encoders.fuse(v, q, encoders.similarity(v, q, p), p)
    assert out.features.shape == (64, d)


def test_attention_normalisation_over_unmasked_entries():
    rng = np.random.default_rng(7)
    v = FeatureSequence(Tensor(rng.standard_normal((6, 4))), np.array([1, 1, 1, 1, 0, 0], bool))
    q = QueryEmbedding(Tensor(rng.standard_normal((3, 4))), np.array([1, 1, 0], bool))
    s = Tensor(rng.standard_normal((6, 3)) * 5)
    row, col = encoders.attention_weights(v, q, s)
    assert np.all(np.abs(row.data.sum(axis=1) - 1) < 1e-9)
    assert np.all(np.abs(col.data.sum(axis=0) - 1) < 1e-9)
    assert np.all(row.data[:, 2] < 1e-300)
    assert np.all(col.data[4:] < 1e-300)


def test_encode_gradient_wrt_projection(small_encoder):
    rng = np.random.default_rng(8)
    v_raw, q_raw = rng.standard_normal((8, 6)), rng.standard_normal((3, 5))
    params = {k: small_encoder[k] for k in ("enc.proj_v.w", "enc.proj_v.b")}

    def loss():
        v, _ = encoders.encode(v_raw, q_raw, small_encoder, num_heads=4)
        return dc.tsum(v.features)

    errs = dc.check_param_gradients(loss, params, step=1e-5, per_tensor=None)
    assert max(errs.values()) < 1e-4


def test_fuse_gradient_on_4x4_instance():
    rng = np.random.default_rng(9)
    d = 4
    p = _fuse_params(d, rng)
    p["enc.sim.w"] = nn.uniform(rng, "enc.sim.w", (3, d), 3 * d)
    v, q = _seq(rng.standard_normal((4, d))), _query(rng.standard_normal((4, d)))
    w = rng.standard_normal((4, d))

    def loss():
        return dc.tsum(encoders.fuse(v, q, encoders.similarity(v, q, p), p).features * w)

    assert max(dc.check_param_gradients(loss, p, 1e-4, per_tensor=None).values()) < 1e-3
    vq = np.concatenate([v.features.data, q.words.data])

    def loss_inputs(x):
        vs, qs = FeatureSequence(x[:4], v.mask), QueryEmbedding(x[4:], q.mask)
        return dc.tsum(encoders.fuse(vs, qs, encoders.similarity(vs, qs, p), p).features * w)

    assert dc.check_gradients(loss_inputs, vq, 1e-4) < 1e-3
