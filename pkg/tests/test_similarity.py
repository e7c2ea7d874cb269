import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from upret import autodiff as ad
from upret import similarity as sim

LN_1P_EXP_M1 = 0.31326168751822286  # ln(1 + e^-1), evaluated with mpmath at 30 digits


def square(max_b=8):
    return st.integers(1, max_b).flatmap(
        lambda b: arrays(np.float64, (b, b), elements=st.floats(-3, 3, allow_nan=False)))


# ---- token alignment

def test_alignment_examples():
    np.testing.assert_allclose(sim.token_alignment([[0.3, 0.4]], [[0.3, 0.4]]), [[1.0]], rtol=0, atol=1e-15)
    np.testing.assert_allclose(sim.token_alignment([[1.0, 0.0]], [[0.0, 2.0]]), [[0.0]], atol=0)
    np.testing.assert_allclose(sim.token_alignment([[1.0, 0.0]], [[1.0, 0.0], [0.6, 0.8]]), [[1.0, 0.6]],
                               rtol=0, atol=1e-15)


def test_alignment_names_zero_token():
    with pytest.raises(ValueError, match="text token 1"):
        sim.token_alignment([[1.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]])


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_alignment_entries_are_cosines(n_v, n_t, seed):
    rng = np.random.default_rng(seed)
    A = sim.token_alignment(rng.standard_normal((n_v, 5)), rng.standard_normal((n_t, 5)))
    assert A.shape == (n_v, n_t)
    assert np.all(np.abs(A) <= 1 + 1e-9)


# ---- token weights

def test_zero_mlp_gives_uniform_weights(rng):
    w = sim.token_weights(rng.standard_normal((4, 6)), sim.WeightMLP.zeros(6)).data
    np.testing.assert_allclose(w, 0.25, rtol=0, atol=1e-15)


def test_single_token_weight_is_one(rng):
    assert sim.token_weights(rng.standard_normal((1, 6)), sim.WeightMLP.init(6, rng)).data.tolist() == [1.0]


def test_scores_one_zero_give_logistic_weights():
    # w2 reads the first hidden unit; gelu(b) with b chosen so gelu(b) = 1 exactly is awkward, so
    # route the score through b2 and a one-hot second layer on a zero hidden state instead
    p = sim.WeightMLP.zeros(2)
    p.w1.data = np.array([[50.0, 0.0], [0.0, 0.0]])
    p.w2.data = np.array([[0.02], [0.0]])
    w = sim.token_weights(np.array([[1.0, 0.0], [0.0, 0.0]]), p).data
    e = math.e
    np.testing.assert_allclose(w, [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-12)


def test_masked_tokens_get_zero_weight(rng):
    w = sim.token_weights(rng.standard_normal((1, 4, 6)), sim.WeightMLP.init(6, rng),
                          mask=np.array([[True, True, False, False]])).data
    assert w[0, 2] == 0.0 and w[0, 3] == 0.0
    assert w[0].sum() == pytest.approx(1.0, abs=1e-12)


# ---- fused similarity

def test_fused_identity_inference():
    assert sim.fused_similarity(np.eye(2), [0.5, 0.5], [0.5, 0.5]) == 1.0


def test_fused_identity_train_adds_ot_once():
    assert sim.fused_similarity(np.eye(2), [0.5, 0.5], [0.5, 0.5], s_ot=0.5, lambda_ot=1.0, mode="train") == 1.5


def test_fused_hand_example():
    A = [[0.2, 0.8], [0.4, 0.6]]
    assert sim.fused_similarity(A, [0.5, 0.5], [0.5, 0.5]) == pytest.approx(0.65, abs=1e-15)


def test_fused_mode_mismatch_rejected():
    with pytest.raises(ValueError):
        sim.fused_similarity(np.eye(2), [0.5, 0.5], [0.5, 0.5], s_ot=0.1)
    with pytest.raises(ValueError):
        sim.fused_similarity(np.eye(2), [0.5, 0.5], [0.5, 0.5], mode="train")


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_inference_fused_in_unit_interval(n_v, n_t, seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1, 1, (n_v, n_t))
    w_v, w_t = rng.dirichlet(np.ones(n_v)), rng.dirichlet(np.ones(n_t))
    assert -1.0 <= sim.fused_similarity(A, w_v, w_t) <= 1.0


def test_batched_token_max_matches_scalar_form():
    rng = np.random.default_rng(7)
    lens_v, lens_t = [3, 5, 2], [4, 1, 3]
    V = np.zeros((3, 5, 4))
    T = np.zeros((3, 4, 4))
    w_v = np.zeros((3, 5))
    w_t = np.zeros((3, 4))
    for b in range(3):
        V[b, : lens_v[b]] = rng.standard_normal((lens_v[b], 4))
        T[b, : lens_t[b]] = rng.standard_normal((lens_t[b], 4))
        w_v[b, : lens_v[b]] = rng.dirichlet(np.ones(lens_v[b]))
        w_t[b, : lens_t[b]] = rng.dirichlet(np.ones(lens_t[b]))
    mask_v = np.arange(5)[None] < np.array(lens_v)[:, None]
    mask_t = np.arange(4)[None] < np.array(lens_t)[:, None]
    Vn = ad.l2_normalize(V).data
    Tn = ad.l2_normalize(T).data
    S = sim.token_max_similarity(sim.pairwise_alignment(Vn, Tn), w_v, w_t, mask_v, mask_t).data
    for i in range(3):
        for j in range(3):
            A = sim.token_alignment(V[i, : lens_v[i]], T[j, : lens_t[j]])
            want = sim.fused_similarity(A, w_v[i, : lens_v[i]], w_t[j, : lens_t[j]])
            assert S[i, j] == pytest.approx(want, abs=1e-12)


# ---- losses

def test_single_pair_losses_are_zero():
    assert float(sim.contrastive_loss(np.array([[0.3]])).data) == 0.0
    assert float(sim.ot_loss(np.array([[-0.8]])).data) == 0.0


def test_two_pair_identity_closed_form():
    assert float(sim.contrastive_loss(np.eye(2), tau=1.0).data) == pytest.approx(LN_1P_EXP_M1, abs=1e-12)
    assert float(sim.ot_loss(np.eye(2), tau=1.0).data) == pytest.approx(LN_1P_EXP_M1, abs=1e-12)


def test_loss_matches_direct_cross_entropy(rng):
    S = rng.standard_normal((5, 5))
    tau = 0.3
    L = S / tau
    row = -np.mean([L[i, i] - math.log(np.exp(L[i]).sum()) for i in range(5)])
    col = -np.mean([L[i, i] - math.log(np.exp(L[:, i]).sum()) for i in range(5)])
    assert float(sim.contrastive_loss(S, tau).data) == pytest.approx(0.5 * (row + col), abs=1e-12)


def test_loss_rejects_bad_arguments():
    with pytest.raises(ValueError):
        sim.contrastive_loss(np.eye(2), tau=0.0)
    with pytest.raises(ValueError):
        sim.ot_loss(np.eye(2), tau=-1.0)
    with pytest.raises(ad.ShapeError):
        sim.contrastive_loss(np.ones((2, 3)))


def test_uninformative_logits_give_log_batch():
    vals = []
    for seed in range(5):
        r = np.random.default_rng(seed)
        V = ad.l2_normalize(r.standard_normal((64, 32))).data
        T = ad.l2_normalize(r.standard_normal((64, 32))).data
        vals.append(float(sim.contrastive_loss(V @ T.T, tau=1.0).data))
    assert abs(np.mean(vals) - math.log(64)) <= 0.1


@given(square(), st.floats(-50, 50), st.sampled_from([0.07, 0.5, 1.0]))
def test_loss_is_shift_invariant(S, c, tau):
    a = float(sim.contrastive_loss(S, tau).data)
    b = float(sim.ot_loss(S + c, tau).data)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


@given(square())
def test_loss_is_nonnegative(S):
    assert float(sim.contrastive_loss(S, 0.5).data) >= -1e-12


def test_loss_decreases_with_diagonal_margin():
    vals = [float(sim.contrastive_loss(s * np.eye(4), tau=1.0).data) for s in (0.5, 1, 2, 4, 8, 16, 32)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-12


@given(st.integers(1, 8).flatmap(lambda b: arrays(np.int64, (b, b), elements=st.integers(-24, 24))),
       st.sampled_from([0.25, 0.5, 2.0, 8.0]), st.integers(-5, 5))
def test_affine_transform_keeps_row_order(grid, a, b):
    S = grid / 8.0  # dyadic values keep a*S + b exact, so ties stay ties
    for row, row2 in zip(S, a * S + b):
        np.testing.assert_array_equal(np.argsort(row, kind="stable"), np.argsort(row2, kind="stable"))
