import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import logsumexp

from conftest import random_state, small_panel
from dlnmclust.graph import grid_graph, path_graph
from dlnmclust.model import (
    ModelData,
    ModelSpec,
    PanelDataset,
    ParameterState,
    PriorSpec,
    Variant,
    area_cluster_loglik,
    assignment_probabilities,
    cluster_logliks,
    linear_predictor,
    log_likelihood,
    log_posterior,
    log_prior,
    nb_log_pmf,
    pointwise_loglik,
    rw2_log_prior,
)
from dlnmclust.splines import build_crossbasis, default_crossbasis_spec


def naive_nb(y, lam, r):
    p = r / (r + lam)
    return (math.lgamma(y + r) - math.lgamma(r) - math.lgamma(y + 1)
            + r * math.log(p) + y * math.log(1 - p))


# ------------------------------------------------------------- NB pmf


def test_geometric_case():
    assert nb_log_pmf(0, 1.0, 1.0) == pytest.approx(math.log(0.5), abs=1e-15)


def test_matches_naive_and_scipy(rng):
    for _ in range(100):
        y = int(rng.integers(0, 60))
        lam = float(rng.gamma(2.0, 3.0)) + 1e-3
        r = float(np.exp(rng.uniform(-2, 4)))
        got = nb_log_pmf(y, lam, r)
        assert got == pytest.approx(naive_nb(y, lam, r), abs=1e-10)
        assert got == pytest.approx(stats.nbinom.logpmf(y, r, r / (r + lam)), abs=1e-10)


def test_poisson_limit():
    y = np.arange(0, 15)
    np.testing.assert_allclose(nb_log_pmf(y, 3.2, 1e8), stats.poisson.logpmf(y, 3.2), atol=1e-5)


def test_sums_to_one():
    y = np.arange(0, 501)
    assert np.exp(nb_log_pmf(y, 2.0, 3.0)).sum() == pytest.approx(1.0, abs=1e-8)


def test_simulated_moments():
    lam, r = 2.0, 4.0
    draws = np.random.default_rng(7).negative_binomial(r, r / (r + lam), size=10**6)
    se_mean = math.sqrt(3.0 / 1e6)
    assert abs(draws.mean() - 2.0) < 4 * se_mean
    assert abs(draws.var() - lam * (lam + r) / r) < 0.03


@pytest.mark.parametrize("lam,r", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)])
def test_invalid_parameters(lam, r):
    with pytest.raises(ValueError):
        nb_log_pmf(1, lam, r)


def test_huge_dispersion_stays_finite():
    assert math.isfinite(nb_log_pmf(40, 5.0, 1e15))


# ------------------------------------------------------------ predictor


def test_linear_predictor_terms(rng, panel):
    spec = default_crossbasis_spec(panel.X, 3)
    cb = build_crossbasis(panel, spec)
    st_ = random_state(rng, panel.n, panel.T, cb.n_coef, C=2, variant=Variant.MIXTURE_FLAT)
    i, t, c = 4, 10, 1
    b = cb.values[i, t - 4]
    expect = math.log(panel.offsets[i]) + st_.alpha + b @ st_.eta[c] + st_.u[i] + st_.v[i] + st_.gamma[t - 1]
    assert linear_predictor(st_, panel, cb, i, t, c) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ValueError):
        linear_predictor(st_, panel, cb, i, 3, c)


def test_area_cluster_loglik_naive_loop(rng, panel):
    cb = build_crossbasis(panel, default_crossbasis_spec(panel.X, 3))
    data = ModelData(panel, cb)
    st_ = random_state(rng, panel.n, panel.T, cb.n_coef, C=3, variant=Variant.MIXTURE_FLAT)
    table = cluster_logliks(st_, data)
    for i in range(panel.n):
        for c in range(3):
            naive = sum(naive_nb(int(panel.Y[i, t - 1]),
                                 math.exp(linear_predictor(st_, panel, cb, i, t, c)), st_.r)
                        for t in range(4, panel.T + 1))
            assert area_cluster_loglik(st_, panel, cb, i, c) == pytest.approx(naive, abs=1e-9)
            assert table[i, c] == pytest.approx(naive, abs=1e-9)


def test_pointwise_conditional_and_marginal(rng, model_data):
    st_ = random_state(rng, model_data.n, model_data.T, model_data.B.shape[2], C=2,
                       variant=Variant.MIXTURE_FLAT)
    pw = pointwise_loglik(st_, model_data)
    cl = cluster_logliks(st_, model_data)
    np.testing.assert_allclose(pw.sum(axis=1), cl[np.arange(model_data.n), st_.z], atol=1e-9)
    marg = pointwise_loglik(st_, model_data, marginal=True)
    i, t = 2, 5
    comp = [math.log(st_.q[i, c]) + naive_nb(model_data.Y[i, t],
            math.exp(linear_predictor(st_, model_data.dataset, model_data.crossbasis, i, t + 4, c)), st_.r)
            for c in range(2)]
    assert marg[i, t] == pytest.approx(logsumexp(comp), abs=1e-10)


def test_panel_validation(rng):
    g = path_graph(2)
    with pytest.raises(ValueError):
        PanelDataset(np.array([[1, -1]]), np.zeros((1, 2)), np.ones(1), path_graph(1))
    with pytest.raises(ValueError):
        PanelDataset(np.ones((2, 3)), np.zeros((2, 3)), np.array([1.0, 0.0]), g)
    with pytest.raises(ValueError):
        PanelDataset(np.full((2, 3), 1.5), np.zeros((2, 3)), np.ones(2), g)
    with pytest.raises(ValueError):
        PanelDataset(np.ones((2, 3)), np.zeros((2, 2)), np.ones(2), g)


def test_spec_validation():
    cb = default_crossbasis_spec(np.arange(20.0), 2)
    with pytest.raises(ValueError):
        ModelSpec("standard", 2, cb)
    with pytest.raises(ValueError):
        ModelSpec("spatial", 1, cb)
    ModelSpec("flat", 1, cb)
    with pytest.raises(ValueError):
        PriorSpec(alpha_sd=0.0)


# --------------------------------------------------------------- priors


def prior_oracle(s, spec, graph):
    """Same dropped constants as the implementation, independent arithmetic."""
    p = spec.priors
    n = len(s.u)
    lp = stats.gamma.logpdf(s.r, p.r_shape, scale=1 / p.r_rate)
    lp += stats.norm.logpdf(s.alpha, 0, p.alpha_sd)
    lp += stats.norm.logpdf(s.eta, 0, p.eta_sd).sum()
    for sd, up in ((s.sigma_u, p.sigma_u_upper), (s.sigma_v, p.sigma_v_upper),
                   (s.sigma_gamma, p.sigma_gamma_upper)):
        lp += stats.uniform.logpdf(sd, 0, up)
    A = graph.weight_matrix() > 0
    Q = np.diag(A.sum(1)) - A
    rank = np.linalg.matrix_rank(Q)
    lp += -rank * math.log(s.sigma_u) - s.u @ Q @ s.u / (2 * s.sigma_u**2)
    lp += -(n - 1) * math.log(s.sigma_v) - s.v @ s.v / (2 * s.sigma_v**2)
    T = len(s.gamma)
    D = np.diff(np.eye(T), 2, axis=0)
    lp += -(T - 2) * math.log(s.sigma_gamma) - np.sum((D @ s.gamma) ** 2) / (2 * s.sigma_gamma**2)
    if spec.variant is Variant.MIXTURE_FLAT and spec.C > 1:
        lp += np.log(s.q[np.arange(n), s.z]).sum()
    if spec.variant is Variant.MIXTURE_SPATIAL:
        full_u = np.vstack([s.assignment_u, np.zeros(n)])
        full_v = np.vstack([s.assignment_v, np.zeros(n)])
        q = assignment_probabilities(full_u, full_v)
        lp += np.log(q[np.arange(n), s.z]).sum()
        lp += stats.halfnorm.logpdf(s.sigma_uc, scale=p.assignment_sd_scale).sum()
        lp += stats.halfnorm.logpdf(s.sigma_vc, scale=p.assignment_sd_scale).sum()
        for c in range(spec.C - 1):
            f, sd = s.assignment_u[c], s.sigma_uc[c]
            lp += -rank * math.log(sd) - f @ Q @ f / (2 * sd**2)
            f, sd = s.assignment_v[c], s.sigma_vc[c]
            lp += -n * math.log(sd) - f @ f / (2 * sd**2)
    return lp


@pytest.mark.parametrize("variant,C", [("standard", 1), ("flat", 3), ("spatial", 3)])
def test_log_prior_matches_oracle(rng, variant, C):
    g = grid_graph(3, 4)
    cb = default_crossbasis_spec(np.linspace(0, 1, 30), 4)
    spec = ModelSpec(variant, C, cb)
    for _ in range(10):
        s = random_state(rng, g.n, 15, 9, C, spec.variant)
        assert log_prior(s, spec, g) == pytest.approx(prior_oracle(s, spec, g), abs=1e-9)


def test_out_of_support_is_minus_inf(rng):
    g = grid_graph(2, 2)
    spec = ModelSpec("spatial", 2, default_crossbasis_spec(np.linspace(0, 1, 30), 4))
    s = random_state(rng, g.n, 10, 9, 2, spec.variant)
    for name, value in (("sigma_u", 10.0), ("sigma_v", -0.1), ("sigma_gamma", 11.0)):
        t = s.copy()
        setattr(t, name, value)
        assert log_prior(t, spec, g) == -math.inf
    t = s.copy()
    t.sigma_uc[0] = -1.0
    assert log_prior(t, spec, g) == -math.inf


def test_rw2_invariant_to_linear_trend(rng):
    g = rng.normal(size=20)
    t = np.arange(20)
    assert rw2_log_prior(g + 3.0 - 0.4 * t, 0.7) == pytest.approx(rw2_log_prior(g, 0.7), rel=1e-12)


def test_softmax_examples():
    q = assignment_probabilities(np.array([[1.0], [0.0]]), np.zeros((2, 1)), i=0)
    np.testing.assert_allclose(q, [0.7310585786300049, 0.2689414213699951], atol=1e-15)
    np.testing.assert_allclose(assignment_probabilities(np.zeros((4, 3)), np.zeros((4, 3))), 0.25)


def test_softmax_matches_naive(rng):
    for _ in range(100):
        C, n = int(rng.integers(2, 6)), int(rng.integers(1, 8))
        u, v = rng.normal(0, 3, (2, C, n))
        naive = np.exp(u + v) / np.exp(u + v).sum(axis=0)
        np.testing.assert_allclose(assignment_probabilities(u, v), naive.T, atol=1e-10, rtol=0)


def test_collapse_standard_equals_flat_c1(rng):
    ds = small_panel(rng)
    data = ModelData(ds, build_crossbasis(ds, default_crossbasis_spec(ds.X, 3)))
    cbs = data.crossbasis.spec
    std, flat = ModelSpec("standard", 1, cbs), ModelSpec("flat", 1, cbs)
    for _ in range(20):
        s = random_state(rng, ds.n, ds.T, cbs.n_coef, 1)
        assert log_posterior(s, std, data) == log_posterior(s, flat, data)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_likelihood_invariant_to_cluster_relabelling(seed):
    r = np.random.default_rng(seed)
    ds = small_panel(r, 2, 2, 12)
    data = ModelData(ds, build_crossbasis(ds, default_crossbasis_spec(ds.X, 2)))
    s = random_state(r, ds.n, ds.T, data.B.shape[2], 3, Variant.MIXTURE_FLAT)
    perm = r.permutation(3)
    t = s.copy()
    t.eta = s.eta[np.argsort(perm)]
    t.z = perm[s.z]
    t.q = s.q[:, np.argsort(perm)]
    spec = ModelSpec("flat", 3, data.crossbasis.spec)
    assert log_likelihood(t, data) == pytest.approx(log_likelihood(s, data), rel=1e-12)
    assert log_prior(t, spec, ds.graph) == pytest.approx(log_prior(s, spec, ds.graph), rel=1e-12)
