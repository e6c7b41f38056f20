"""Quantizer stack, EMA dynamics, and commitment loss."""

import numpy as np
import pytest

from aha import autodiff as ad
from aha import quantizer as qz
from aha.autodiff import Tensor


def make_codebook(rows, decay=0.99):
    rows = np.asarray(rows, dtype=np.float64)
    return qz.Codebook(rows, np.zeros(len(rows)), np.zeros_like(rows), decay)


def make_stack(layer_rows, k):
    return qz.RvqStack([make_codebook(r) for r in layer_rows], shared_prefix=k)


def test_nearest_code_basic():
    cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
    # distances 1.204 vs 0.224
    assert qz.nearest_code([0.9, 0.8], cb) == 1


def test_nearest_code_exact_match():
    cb = make_codebook([[1.0], [2.0], [3.0], [4.0]])
    assert qz.nearest_code([4.0], cb) == 3


def test_nearest_code_tie_breaks_low():
    cb = make_codebook([[0.0], [2.0]])
    assert qz.nearest_code([1.0], cb) == 0


def test_nearest_code_empty_codebook():
    cb = make_codebook(np.zeros((1, 2)))
    cb.embeddings = np.zeros((0, 2))
    cb.cluster_size = np.zeros(0)
    cb.embed_sum = np.zeros((0, 2))
    with pytest.raises(ad.ConfigError):
        qz.nearest_codes(np.zeros((3, 2)), cb)


def test_quantize_layer_exact_code_gives_zero_residual():
    cb = make_codebook([[0.5, -0.5], [2.0, 2.0]])
    q, res, idx = qz.quantize_layer(Tensor([[2.0, 2.0]]), cb)
    np.testing.assert_array_equal(q.values, [[2.0, 2.0]])
    np.testing.assert_array_equal(res.values, [[0.0, 0.0]])
    assert idx.tolist() == [1]


def test_quantize_layer_scalar_example():
    cb = make_codebook([[0.0], [2.0]])
    q, res, idx = qz.quantize_layer(Tensor([[1.2]]), cb)
    np.testing.assert_allclose(q.values, [[2.0]])
    np.testing.assert_allclose(res.values, [[-0.8]])
    assert idx.tolist() == [1]


def test_two_layer_telescoping():
    rng = np.random.default_rng(0)
    stack = make_stack([rng.normal(size=(4, 3)), rng.normal(size=(4, 3))], k=2)
    x = rng.normal(size=(6, 3))
    seq = qz.rvq_encode_video(stack, Tensor(x))
    recon = sum(q.values for q in seq.per_layer_q) + seq.residual_final
    np.testing.assert_allclose(recon, x, atol=1e-9)


@pytest.mark.parametrize("k,n", [(1, 4), (2, 5)])
def test_telescoping_many_random_inputs(k, n):
    rng = np.random.default_rng(42 + k)
    stack = make_stack([rng.normal(size=(8, 5)) for _ in range(n)], k=k)
    for _ in range(100):
        x = rng.normal(size=(7, 5)) * rng.uniform(0.1, 3.0)
        _, full = qz.rvq_encode_audio(stack, Tensor(x))
        recon = sum(q.values for q in full.per_layer_q) + full.residual_final
        np.testing.assert_allclose(recon, x, atol=1e-9)
        np.testing.assert_allclose(full.unit.values + full.residual_final, x, atol=1e-9)


def test_video_unit_is_single_code_when_k1():
    rng = np.random.default_rng(3)
    stack = make_stack([rng.normal(size=(5, 2)), rng.normal(size=(5, 2))], k=1)
    seq = qz.rvq_encode_video(stack, Tensor(rng.normal(size=(4, 2))))
    assert seq.indices.shape == (4, 1)
    np.testing.assert_array_equal(
        seq.unit.values, stack.layers[0].embeddings[seq.indices[:, 0]])


def test_video_zero_input_selects_zero_codes():
    rng = np.random.default_rng(4)
    layers = []
    for _ in range(2):
        rows = rng.normal(size=(5, 3)) + 1.0  # keep other codes away from zero
        rows[0] = 0.0
        layers.append(rows)
    stack = make_stack(layers, k=2)
    seq = qz.rvq_encode_video(stack, Tensor(np.zeros((3, 3))))
    np.testing.assert_array_equal(seq.unit.values, np.zeros((3, 3)))
    assert (seq.indices == 0).all()


def test_audio_anchor_matches_prefix_of_full():
    rng = np.random.default_rng(9)
    stack = make_stack([rng.normal(size=(6, 4)) for _ in range(4)], k=1)
    anchor, full = qz.rvq_encode_audio(stack, Tensor(rng.normal(size=(5, 4))))
    assert full.indices.shape == (5, 4)
    assert anchor.indices.shape == (5, 1)
    np.testing.assert_array_equal(anchor.indices, full.indices[:, :1])
    np.testing.assert_array_equal(
        anchor.unit.values, full.per_layer_q[0].values)


def test_audio_degenerate_suffix():
    rng = np.random.default_rng(10)
    stack = make_stack([rng.normal(size=(6, 4)) for _ in range(2)], k=2)
    anchor, full = qz.rvq_encode_audio(stack, Tensor(rng.normal(size=(5, 4))))
    np.testing.assert_array_equal(anchor.unit.values, full.unit.values)
    np.testing.assert_array_equal(anchor.indices, full.indices)


def test_residual_norm_non_increasing_with_zero_code():
    rng = np.random.default_rng(11)
    stack = qz.RvqStack(
        [qz.init_codebook(8, 4, rng, seed_features=rng.normal(size=(16, 4))) for _ in range(4)],
        shared_prefix=1)
    x = rng.normal(size=(10, 4)) * 2.0
    _, full = qz.rvq_encode_audio(stack, Tensor(x))
    norms = [np.linalg.norm(r, axis=-1) for r in full.layer_inputs]
    norms.append(np.linalg.norm(full.residual_final, axis=-1))
    for a, b in zip(norms, norms[1:]):
        assert (b <= a + 1e-12).all()


def test_straight_through_gradient_is_identity_on_unit():
    rng = np.random.default_rng(12)
    stack = make_stack([rng.normal(size=(6, 3)) for _ in range(3)], k=2)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    _, full = qz.rvq_encode_audio(stack, x)
    up = rng.normal(size=(4, 3))
    ad.backward(ad.tensor_sum(ad.multiply(full.unit, ad.constant(up))))
    np.testing.assert_array_equal(x.grad, up)


def test_mm_ema_gamma_zero_is_joint_centroid():
    cb = make_codebook(np.ones((2, 2)), decay=0.0)
    audio = [np.array([[1.0, 0.0]]), np.zeros((0, 2))]
    video = [np.array([[3.0, 0.0]]), np.zeros((0, 2))]
    qz.mm_ema_update(cb, audio, video)
    np.testing.assert_allclose(cb.embeddings[0], [2.0, 0.0], atol=1e-12)


def test_mm_ema_untouched_code_unchanged():
    cb = make_codebook(np.full((6, 2), 7.0), decay=0.99)
    empty = [np.zeros((0, 2))] * 6
    audio = [np.zeros((0, 2))] * 6
    audio[0] = np.array([[1.0, 1.0]])
    qz.mm_ema_update(cb, audio, empty)
    np.testing.assert_array_equal(cb.embeddings[5], [7.0, 7.0])


def test_mm_ema_ratio_invariant_many_updates():
    rng = np.random.default_rng(13)
    cb = qz.init_codebook(8, 3, rng, decay=0.9)
    for _ in range(25):
        feats = rng.normal(size=(20, 3))
        idx = qz.nearest_codes(feats, cb)
        vfeats = rng.normal(size=(20, 3))
        vidx = qz.nearest_codes(vfeats, cb)
        qz.mm_ema_update(cb, qz.assignments(feats, idx, 8), qz.assignments(vfeats, vidx, 8))
        live = cb.cluster_size > 0
        np.testing.assert_allclose(
            cb.embeddings[live],
            cb.embed_sum[live] / cb.cluster_size[live][:, None],
            rtol=0, atol=1e-12)


def test_mm_ema_matches_hand_unrolled_recurrence():
    rng = np.random.default_rng(14)
    gamma = 0.99
    cb = qz.init_codebook(4, 2, rng, decay=gamma)
    n_ref = np.zeros(4)
    m_ref = np.zeros((4, 2))
    e_ref = cb.embeddings.copy()
    for _ in range(10):
        feats = rng.normal(size=(30, 2))
        idx = qz.nearest_codes(feats, cb)
        qz.mm_ema_update(cb, qz.assignments(feats, idx, 4))
        # independent unrolling of the same recurrence
        for i in range(4):
            rows = feats[idx == i]
            new_n = gamma * n_ref[i] + (1 - gamma) * len(rows)
            if new_n < qz.MIN_LIFETIME:
                continue
            m_ref[i] = gamma * m_ref[i] + (1 - gamma) * rows.sum(axis=0)
            n_ref[i] = new_n
            e_ref[i] = m_ref[i] / n_ref[i]
    np.testing.assert_allclose(cb.embeddings, e_ref, atol=1e-10)


def test_commitment_loss_zero_at_codes():
    f = Tensor([[1.0, 2.0]])
    assert qz.commitment_loss(f, Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0]])).item() == 0.0


def test_commitment_loss_hand_value():
    loss = qz.commitment_loss(
        Tensor([[1.0, 0.0]]), Tensor([[0.0, 0.0]]), Tensor([[2.0, 0.0]]), beta=0.25)
    assert loss.item() == pytest.approx(0.375, abs=1e-12)


def test_commitment_loss_gradient_only_into_features():
    f = Tensor([[1.0, 0.0]], requires_grad=True)
    cs = Tensor([[0.0, 0.0]], requires_grad=True)
    co = Tensor([[2.0, 0.0]], requires_grad=True)
    loss = qz.commitment_loss(f, cs, co, beta=0.25)
    ad.backward(loss)
    assert f.grad is not None and np.any(f.grad != 0)
    assert cs.grad is None and co.grad is None


def test_commitment_loss_nonnegative_random():
    rng = np.random.default_rng(15)
    for _ in range(20):
        loss = qz.commitment_loss(
            Tensor(rng.normal(size=(5, 3))),
            Tensor(rng.normal(size=(5, 3))),
            Tensor(rng.normal(size=(5, 3))))
        assert loss.item() >= 0.0


def test_init_codebook_has_zero_row_and_data_rows():
    rng = np.random.default_rng(16)
    feats = rng.normal(size=(10, 3)) + 5.0
    cb = qz.init_codebook(6, 3, rng, seed_features=feats)
    np.testing.assert_array_equal(cb.embeddings[0], np.zeros(3))
    # rows 1..5 come from the feature pool
    for row in cb.embeddings[1:]:
        assert any(np.allclose(row, f) for f in feats)


def test_perplexity_bounds():
    assert qz.perplexity(np.zeros(10, dtype=int), 4) == pytest.approx(1.0)
    assert qz.perplexity(np.arange(4), 4) == pytest.approx(4.0)
