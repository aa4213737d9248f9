from __future__ import annotations

import math
from decimal import Decimal, localcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from probembed.prob_core import (
    GaussianEmbedding,
    InvalidInputError,
    MatchScalars,
    analytic_grads,
    clamp_grad_mask,
    clamp_log_var,
    csd,
    match_bce,
    match_prob,
    pairwise_csd,
    vib_kl,
    vib_kl_grad,
)

finite = st.floats(-5.0, 5.0, allow_nan=False, allow_infinity=False)
log_vars = st.floats(-6.0, 6.0, allow_nan=False, allow_infinity=False)


@st.composite
def embedding_pairs(draw, max_dim=8):
    D = draw(st.integers(1, max_dim))
    vec = lambda elems: draw(arrays(np.float64, D, elements=elems))
    return GaussianEmbedding(vec(finite), vec(log_vars)), GaussianEmbedding(vec(finite), vec(log_vars))


def gaussian(mu, var):
    return GaussianEmbedding(np.asarray(mu, float), np.log(np.asarray(var, float)))


# -- clamp ------------------------------------------------------------------


def test_clamp_examples():
    assert clamp_log_var([7.0]).tolist() == [6.0]
    assert clamp_log_var([-10.0]).tolist() == [-6.0]
    assert clamp_log_var([0.0, 3.2]).tolist() == [0.0, 3.2]


def test_clamp_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        clamp_log_var([np.nan])
    with pytest.raises(InvalidInputError):
        GaussianEmbedding([0.0], [np.inf])


def test_clamp_subgradient_takes_interior_value_at_boundary():
    assert clamp_grad_mask([-7.0, -6.0, 0.0, 6.0, 6.5]).tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]


def test_embedding_validation():
    with pytest.raises(InvalidInputError):
        GaussianEmbedding([0.0, 1.0], [0.0])
    with pytest.raises(InvalidInputError):
        GaussianEmbedding([], [])
    z = GaussianEmbedding([0.0], [9.0])
    assert z.log_var[0] == 6.0


# -- CSD ----------------------------------------------------------------------


def test_csd_examples():
    assert csd(gaussian([0, 0], [0.5, 0.5]), gaussian([0, 0], [0.5, 0.5])) == 0.0
    assert csd(gaussian([0], [1]), gaussian([2], [1])) == pytest.approx(0.5 * (2 + math.log(2)), abs=1e-12)
    assert csd(gaussian([0], [1]), gaussian([2], [1])) == pytest.approx(1.346574, abs=5e-7)


def test_csd_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        csd(gaussian([0], [1]), gaussian([0, 0], [1, 1]))


@given(embedding_pairs())
def test_csd_symmetric_exactly(pair):
    z1, z2 = pair
    assert csd(z1, z2) == csd(z2, z1)


@given(embedding_pairs(), st.floats(-4, 4))
def test_csd_constant_variance_reduction(pair, log_c):
    z1, z2 = pair
    D = z1.dim
    lv = np.full(D, log_c)
    a, b = GaussianEmbedding(z1.mu, lv), GaussianEmbedding(z2.mu, lv)
    c = math.exp(log_c)
    expected = 0.5 * (np.sum((z1.mu - z2.mu) ** 2) / (2 * c) + D * math.log(2 * c))
    assert csd(a, b) == pytest.approx(expected, abs=1e-12, rel=1e-12)


@pytest.mark.parametrize("gap", [0.1, 0.5, 1.0, 2.0, 4.0])
def test_csd_per_dimension_minimum_at_squared_gap(gap):
    s_grid = np.linspace(0.005, 20.0, 40000)
    step = s_grid[1] - s_grid[0]
    terms = gap**2 / s_grid + np.log(s_grid)
    assert abs(s_grid[np.argmin(terms)] - gap**2) <= step


def test_pairwise_csd():
    rng = np.random.default_rng(0)
    A = [GaussianEmbedding(rng.normal(size=4), rng.normal(size=4)) for _ in range(3)]
    B = [GaussianEmbedding(rng.normal(size=4), rng.normal(size=4)) for _ in range(2)]
    M = pairwise_csd(A, B)
    assert M.shape == (3, 2)
    assert M[2, 1] == pytest.approx(csd(A[2], B[1]), abs=1e-12)
    np.testing.assert_allclose(M, pairwise_csd(B, A).T, atol=1e-12)
    assert pairwise_csd(A[:1], B[:1])[0, 0] == pytest.approx(csd(A[0], B[0]), abs=1e-12)
    same = pairwise_csd([A[0], A[0]], [A[0], A[0]])
    assert np.all(same == same[0, 0])


# -- match probability and BCE ------------------------------------------------


def test_match_prob_examples():
    assert match_prob(0.0, MatchScalars()) == 0.5
    assert match_prob(1.0, MatchScalars.from_ab(2.0, 0.0)) == pytest.approx(0.119203, abs=5e-7)
    assert match_prob(1e6, MatchScalars()) == pytest.approx(0.0, abs=1e-300)


def test_match_scalars_default_and_positivity():
    s = MatchScalars()
    assert s.a == pytest.approx(1.0, abs=1e-15) and s.b == 0.0
    assert MatchScalars(a_raw=-50.0).a > 0
    with pytest.raises(InvalidInputError):
        MatchScalars.from_ab(0.0, 1.0)


@given(st.floats(-50, 50), st.floats(0.01, 5), st.floats(-5, 5), st.floats(0.001, 10))
def test_match_prob_strictly_decreasing(d, a, b, delta):
    s = MatchScalars.from_ab(a, b)
    z1, z2 = -a * d + b, -a * (d + delta) + b
    if z1 - z2 > 1e-9 and z1 < 30:
        assert match_prob(d + delta, s) < match_prob(d, s)


def test_bce_examples():
    s = MatchScalars()
    assert match_bce(0.0, 1, s) == pytest.approx(math.log(2), abs=1e-12)
    assert match_bce(0.0, 0, s, "standard") == pytest.approx(0.693147, abs=5e-7)
    assert match_bce(1e4, 0, s) == pytest.approx(0.0, abs=1e-12)


def test_bce_rejects_bad_labels_and_modes():
    with pytest.raises(InvalidInputError):
        match_bce(0.0, 2, MatchScalars())
    with pytest.raises(InvalidInputError):
        match_bce(0.0, 1, MatchScalars(), "other")


@given(st.floats(-40, 40), st.floats(0.05, 5), st.floats(-5, 5))
def test_bce_standard_matches_log_decomposition(d, a, b):
    s = MatchScalars.from_ab(a, b)
    # 200-digit reference: 1 - p can be ~1e-87 here, so low precision would cancel
    with localcontext() as ctx:
        ctx.prec = 200
        z = Decimal(s.a) * Decimal(d) - Decimal(s.b)
        p = 1 / (1 + z.exp())
        neg_log_p = float(-p.ln())
        neg_log_q = float(-(1 - p).ln())
    assert match_bce(d, 1, s) == pytest.approx(neg_log_p, abs=1e-12, rel=1e-12)
    assert match_bce(d, 0, s) == pytest.approx(neg_log_q, abs=1e-12, rel=1e-12)


def test_bce_stable_for_large_logits():
    for mode in ("standard", "paper_literal"):
        for d in (-50.0, 50.0):
            for y in (0, 1):
                value = match_bce(d, y, MatchScalars(), mode)
                assert np.isfinite(value) and value >= 0
    # -ln logistic(-50) ~ 50 with no cancellation
    assert match_bce(50.0, 1, MatchScalars()) == pytest.approx(50.0 + math.log1p(math.exp(-50.0)), rel=1e-15)


def test_literal_mode_negative_term_sign():
    s = MatchScalars.from_ab(1.0, 0.5)
    d = 2.0
    expected = -math.log(1.0 / (1.0 + math.exp(a_d_plus_b := (1.0 * d + 0.5))))
    assert match_bce(d, 0, s, "paper_literal") == pytest.approx(expected, abs=1e-12)
    assert a_d_plus_b == 2.5
    # the literal form grows with distance for negatives, the standard form shrinks
    assert match_bce(10.0, 0, s, "paper_literal") > match_bce(1.0, 0, s, "paper_literal")
    assert match_bce(10.0, 0, s, "standard") < match_bce(1.0, 0, s, "standard")


# -- VIB KL ---------------------------------------------------------------------


def test_kl_examples():
    assert vib_kl(gaussian([0.0], [1.0])) == 0.0
    assert vib_kl(gaussian([1.0], [1.0])) == pytest.approx(0.5, abs=1e-15)
    assert vib_kl(GaussianEmbedding([0.0], [1.0])) == pytest.approx(0.5 * (math.e - 2), abs=1e-15)
    assert vib_kl(GaussianEmbedding([0.0], [1.0])) == pytest.approx(0.359141, abs=5e-7)


@settings(max_examples=200)
@given(embedding_pairs(max_dim=16))
def test_kl_nonnegative(pair):
    for z in pair:
        assert vib_kl(z) >= 0.0


def test_kl_gradient_zero_at_minimum():
    d_mu, d_lv = vib_kl_grad(GaussianEmbedding.standard_normal(5))
    assert np.all(d_mu == 0) and np.all(d_lv == 0)


# -- analytic gradients -------------------------------------------------------


def _fd_pair(z1, z2, y, s, mode, h=1e-5):
    def f(mu1, lv1, mu2, lv2, a, b):
        return match_bce(csd(GaussianEmbedding(mu1, lv1), GaussianEmbedding(mu2, lv2)), y, MatchScalars.from_ab(a, b), mode)

    base = [z1.mu.copy(), z1.log_var.copy(), z2.mu.copy(), z2.log_var.copy()]
    grads = []
    for k in range(4):
        g = np.zeros_like(base[k])
        for i in range(g.size):
            plus = [x.copy() for x in base]
            minus = [x.copy() for x in base]
            plus[k][i] += h
            minus[k][i] -= h
            g[i] = (f(*plus, s.a, s.b) - f(*minus, s.a, s.b)) / (2 * h)
        grads.append(g)
    d_a = (f(*base, s.a + h, s.b) - f(*base, s.a - h, s.b)) / (2 * h)
    d_b = (f(*base, s.a, s.b + h) - f(*base, s.a, s.b - h)) / (2 * h)
    return grads, d_a, d_b


def _rel(a, n, floor=1e-5):
    a, n = np.asarray(a), np.asarray(n)
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))


@pytest.mark.parametrize("mode", ["standard", "paper_literal"])
@pytest.mark.parametrize("y", [0, 1])
def test_analytic_grads_match_finite_differences(mode, y):
    rng = np.random.default_rng(3 + y)
    for _ in range(5):
        z1 = GaussianEmbedding(rng.normal(size=16) * 0.3, rng.normal(size=16) * 0.5)
        z2 = GaussianEmbedding(rng.normal(size=16) * 0.3, rng.normal(size=16) * 0.5)
        s = MatchScalars.from_ab(rng.uniform(0.05, 0.3), rng.normal())
        loss, g = analytic_grads(z1, z2, y, s, mode)
        assert loss == pytest.approx(match_bce(csd(z1, z2), y, s, mode), abs=1e-12)
        (n_mu1, n_lv1, n_mu2, n_lv2), n_a, n_b = _fd_pair(z1, z2, y, s, mode)
        assert _rel(g.d_mu1, n_mu1) < 1e-5
        assert _rel(g.d_logvar1, n_lv1) < 1e-5
        assert _rel(g.d_mu2, n_mu2) < 1e-5
        assert _rel(g.d_logvar2, n_lv2) < 1e-5
        assert _rel(g.d_a, n_a) < 1e-5
        assert _rel(g.d_b, n_b) < 1e-5


def test_equal_means_give_zero_mean_gradient():
    mu = np.array([0.3, -1.0, 2.0])
    z1 = GaussianEmbedding(mu, [0.1, 0.2, -0.3])
    z2 = GaussianEmbedding(mu, [1.0, -0.5, 0.0])
    _, g = analytic_grads(z1, z2, 1, MatchScalars())
    assert np.all(g.d_mu1 == 0) and np.all(g.d_mu2 == 0)


def test_saturated_log_variance_gets_zero_gradient():
    from probembed.prob_core import pairwise_csd_backward

    raw = np.array([[8.0, 0.5]])
    mask = clamp_grad_mask(raw)
    lv = clamp_log_var(raw)
    _, d_lv1, _, _ = pairwise_csd_backward(np.zeros((1, 2)), lv, np.ones((1, 2)), np.zeros((1, 2)), np.ones((1, 1)))
    assert (d_lv1 * mask)[0, 0] == 0.0 and (d_lv1 * mask)[0, 1] != 0.0
