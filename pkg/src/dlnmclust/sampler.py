"""Adaptive Metropolis-within-Gibbs sampler for the standard and mixture DLNMs.

Site-wise fields (``u``, ``v``, ``gamma`` and the assignment fields) are
updated one site at a time, but sites of one colour class of the graph are
conditionally independent, so their proposals and local likelihood terms are
computed together. The sum-to-zero constraints are kept exactly: a move
``field_i += d`` is paired with ``field -= d / m`` over the constrained set and
a compensating shift of the level parameter (``alpha``, or ``v^c`` for the
assignment fields), which leaves every other linear predictor untouched.
Only the level parameter's prior ties sites together, and that coupling is
resolved by a cheap scalar pass over the sites in order.

Two block moves complement the site updates: a preconditioned random walk on
``(alpha, eta)`` and a Fisher-scoring independence-type proposal on
``(gamma, alpha, eta)`` jointly, which follows the slow directions along
which trends, levels and surfaces trade off.
"""
from __future__ import annotations

import io
import json
import logging
import math
import warnings
import zipfile
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .model import (
    ModelData,
    ModelSpec,
    ParameterState,
    PriorSpec,
    Variant,
    _log_coef,
    total_log_coef,
    base_predictor,
    cluster_logliks,
    exposure_effects,
    log_posterior,
    log_prior,
    log_likelihood,
    nb_kernel,
    pointwise_loglik,
    rw2_quadratic,
)
from .graph import car_quadratic
from .splines import CrossBasisSpec

log = logging.getLogger(__name__)

SCALAR_BLOCKS = ("r", "alpha", "sigma_u", "sigma_v", "sigma_gamma")


class SamplerInitError(RuntimeError):
    def __init__(self, message, terms):
        super().__init__(f"{message}: {json.dumps(terms)}")
        self.terms = terms


@dataclass
class SamplerConfig:
    n_iterations: int = 80000
    burn_in: int = 40000
    thinning: int = 10
    seed: int = 0
    adaptation_window: int = 50
    target_acceptance: float = 0.44
    target_acceptance_block: float = 0.234
    n_chains: int = 1
    likelihood: bool = True
    waic_mode: str = "conditional"
    # sweeps at the start during which cluster labels stay at their initial values
    assignment_warmup: int = 200

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("need 0 <= burn_in < n_iterations")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.adaptation_window < 1:
            raise ValueError("adaptation_window must be >= 1")
        if self.waic_mode not in ("conditional", "marginal"):
            raise ValueError("waic_mode must be 'conditional' or 'marginal'")
        if self.assignment_warmup < 0:
            raise ValueError("assignment_warmup must be non-negative")

    @property
    def n_draws(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thinning

    def retained(self, sweep: int) -> bool:
        return sweep > self.burn_in and (sweep - self.burn_in) % self.thinning == 0


# ------------------------------------------------------------ Gibbs updates


def categorical_draw(log_w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row of ``log_w`` using the uniforms ``u``."""
    p = np.exp(log_w - log_w.max(axis=1, keepdims=True))
    cdf = np.cumsum(p, axis=1)
    cdf /= cdf[:, -1:]
    return np.minimum((cdf < u[:, None]).sum(axis=1), log_w.shape[1] - 1)


def z_full_conditional(state: ParameterState, data: Optional[ModelData], likelihood: bool = True) -> np.ndarray:
    """``log P(z_i = c | .)`` up to a per-area constant, shape ``(n, C)``."""
    with np.errstate(divide="ignore"):
        log_w = np.log(state.q)
    if likelihood:
        log_w = log_w + cluster_logliks(state, data, full=False)
    if np.any(np.all(~np.isfinite(log_w), axis=1)):
        raise FloatingPointError("every cluster has zero weight for some area")
    return log_w


def gibbs_update_z(state: ParameterState, data: Optional[ModelData], rng: np.random.Generator,
                   likelihood: bool = True) -> np.ndarray:
    """Draw every ``z_i`` from its categorical full conditional."""
    if state.C == 1:
        return np.zeros_like(state.z)
    log_w = z_full_conditional(state, data, likelihood)
    return categorical_draw(log_w, rng.random(log_w.shape[0]))


def gibbs_update_q_flat(state: ParameterState, rng: np.random.Generator) -> np.ndarray:
    """``q_i | z_i ~ Dirichlet(1 + 1{z_i = 1}, ..., 1 + 1{z_i = C})``."""
    n, C = state.q.shape
    if C == 1:
        return np.ones((n, 1))
    conc = np.ones((n, C))
    conc[np.arange(n), state.z] += 1.0
    g = rng.standard_gamma(conc)
    return g / g.sum(axis=1, keepdims=True)


def area_assignment_loglik(logits: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``log q_{i, z_i}`` per area from ``(C, n)`` logits."""
    n = logits.shape[1]
    return logits[z, np.arange(n)] - logsumexp(logits, axis=0)


def field_site_log_ratio(logits, z, c, i, delta, nbr_diff_sum, n_nbr, sigma) -> float:
    """Log acceptance ratio for ``u^c_i += delta`` ignoring the level compensation.

    ``nbr_diff_sum`` is ``sum_{j ~ i} (u^c_i - u^c_j)``.
    """
    logits = np.array(logits, dtype=float)
    before = area_assignment_loglik(logits[:, [i]], np.array([z[i]]))[0]
    logits[c, i] += delta
    after = area_assignment_loglik(logits[:, [i]], np.array([z[i]]))[0]
    dq = n_nbr * delta**2 + 2 * delta * nbr_diff_sum
    return after - before - dq / (2 * sigma**2)


def mh_accept(log_ratio, log_u) -> np.ndarray:
    return np.asarray(log_u) < np.asarray(log_ratio)


# ------------------------------------------------------------ draw storage


@dataclass
class PosteriorDraws:
    """Retained draws (stacked per parameter) and the pointwise log-likelihood matrix.

    Observations in ``loglik`` are ordered area-major over the likelihood
    window: column ``i * (T - L) + (t - L - 1)``.
    """

    arrays: dict
    loglik: np.ndarray
    acceptance_rates: dict
    config: SamplerConfig
    spec: ModelSpec
    permutations: Optional[np.ndarray] = None
    loglik_marginal: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)

    @property
    def n_draws(self) -> int:
        return self.loglik.shape[0]

    def __getitem__(self, key):
        return self.arrays[key]

    def state(self, s: int) -> ParameterState:
        """Draw ``s`` as a state; assignment fields are re-expressed against the last label."""
        a = self.arrays
        C = self.spec.C
        k = C - 1 if self.spec.variant is Variant.MIXTURE_SPATIAL else 0
        au, av = a["assignment_u"][s], a["assignment_v"][s]
        if k:
            au, av = au - au[-1], av - av[-1]
        return ParameterState(
            alpha=float(a["alpha"][s]), log_r=float(a["log_r"][s]),
            eta=a["eta"][s].copy(), u=a["u"][s].copy(), v=a["v"][s].copy(), gamma=a["gamma"][s].copy(),
            sigma_u=float(a["sigma_u"][s]), sigma_v=float(a["sigma_v"][s]),
            sigma_gamma=float(a["sigma_gamma"][s]), z=a["z"][s].copy(), q=a["q"][s].copy(),
            assignment_u=au[:k].copy(), assignment_v=av[:k].copy(),
            sigma_uc=a["sigma_uc"][s].copy(), sigma_vc=a["sigma_vc"][s].copy(),
        )


# ---------------------------------------------------------- initialisation


def _area_profiles(data: ModelData, alpha0: float, ridge: float = 10.0):
    """Two-way demeaned crude log-incidence regressed on the cross-basis, per area.

    Profiles are whitened by the average cross-product matrix so that
    Euclidean distance between them is distance between fitted predictors.
    """
    rho = np.log((data.Y + 0.5)) - data.log_offsets[:, None] - alpha0
    rho = rho - rho.mean(axis=1, keepdims=True) - rho.mean(axis=0, keepdims=True) + rho.mean()
    B = data.B - data.B.mean(axis=1, keepdims=True) - data.B.mean(axis=0, keepdims=True) + data.B.mean(axis=(0, 1))
    p = B.shape[2]
    XtX = np.einsum("itp,itq->ipq", B, B)
    Xty = np.einsum("itp,it->ip", B, rho)
    profiles = np.linalg.solve(XtX + ridge * np.eye(p), Xty[..., None])[..., 0]
    profiles = profiles @ np.linalg.cholesky(XtX.mean(axis=0) + 1e-9 * np.eye(p))
    return profiles, XtX, Xty


def initial_state(spec: ModelSpec, data: ModelData, seed: int) -> ParameterState:
    """Deterministic start: crude level, pooled ridge eta, k-means z for mixtures."""
    n, T, p, C = data.n, data.T, data.B.shape[2], spec.C
    st = ParameterState.zeros(n, T, p, C, spec.variant)
    tot = data.Y.sum()
    st.alpha = float(np.log(max(tot, 0.5) / (np.exp(data.log_offsets).sum() * data.n_obs_time)))
    m, var = data.Y.mean(), data.Y.var()
    r0 = m * m / (var - m) if var > m * 1.05 else 100.0
    st.log_r = float(np.log(np.clip(r0, 0.5, 1000.0)))
    st.sigma_u = st.sigma_v = min(1.0, 0.5 * spec.priors.sigma_u_upper)
    st.sigma_v = min(1.0, 0.5 * spec.priors.sigma_v_upper)
    st.sigma_gamma = min(0.1, 0.5 * spec.priors.sigma_gamma_upper)
    if spec.variant is Variant.MIXTURE_SPATIAL:
        st.sigma_uc[:] = 0.5 * spec.priors.assignment_sd_scale
        st.sigma_vc[:] = 0.5 * spec.priors.assignment_sd_scale
    profiles, XtX, Xty = _area_profiles(data, st.alpha)
    z = np.zeros(n, dtype=int)
    if C > 1:
        init_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
        try:
            from sklearn.cluster import KMeans

            km = KMeans(n_clusters=C, n_init=10, random_state=int(init_rng.integers(2**31 - 1)))
            z = km.fit_predict(profiles).astype(int)
            if len(np.unique(z)) < C:
                raise ValueError("k-means produced an empty cluster")
        except ValueError:
            z = init_rng.integers(C, size=n)
    for c in range(C):
        members = z == c
        A = XtX[members].sum(axis=0) + np.eye(p)
        st.eta[c] = np.linalg.solve(A, Xty[members].sum(axis=0))
    st.z = z
    if spec.variant is Variant.MIXTURE_SPATIAL:
        st.q = np.full((n, C), 1.0 / C)
    return st


def _write_npz(path, arrays: dict):
    """``np.savez`` layout with fixed zip timestamps, so equal content gives equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def _chol_solve(chol, b):
    return cho_solve((chol, True), b)


def _chol_solve_t(chol, z):
    """Solve ``L^T x = z``: a draw with precision ``L L^T`` when ``z`` is standard normal."""
    return solve_triangular(chol, z, lower=True, trans="T")


# -------------------------------------------------------------------- chain


class Chain:
    """One Markov chain; all randomness comes from ``self.rng``."""

    def __init__(self, data: ModelData, spec: ModelSpec, config: SamplerConfig,
                 state: Optional[ParameterState] = None):
        self.data = data
        self.spec = spec
        self.config = config
        self.rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0])
        self.state = initial_state(spec, data, config.seed) if state is None else state.copy()
        self.sweep = 0
        g = data.graph
        n, T, C = data.n, data.T, spec.C
        p = data.B.shape[2]
        self.k_fields = C - 1 if spec.variant is Variant.MIXTURE_SPATIAL else 0
        # per-site and per-block proposal log-scales
        self.log_scales = {
            "r": math.log(0.1), "alpha": math.log(0.05),
            "sigma_u": math.log(0.3), "sigma_v": math.log(0.3), "sigma_gamma": math.log(0.3),
            "eta": 0.0, "u": np.full(n, math.log(0.1)), "v": np.full(n, math.log(0.1)),
            "gamma": np.full(T, math.log(0.05)),
            "field_u": np.full((self.k_fields, n), math.log(0.5)),
            "field_v": np.full((self.k_fields, n), math.log(0.5)),
            "sigma_uc": np.full(self.k_fields, math.log(0.3)),
            "sigma_vc": np.full(self.k_fields, math.log(0.3)),
        }
        # the eta block carries alpha as its first coordinate
        self.eta_chol = np.eye(1 + C * p) * (2.38 / math.sqrt(1 + C * p))
        self.accepts = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in self.log_scales.items()}
        self.proposals = {k: 0 for k in self.log_scales}
        self.post_accepts = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in self.log_scales.items()}
        self.post_sweeps = 0
        self.eta_ref_sum = np.zeros((C, p))
        self.eta_ref_count = 0
        self.records = []
        self.loglik_rows = []
        self.loglik_marginal_rows = []
        # batches of (component index, sites) for the CAR fields
        self.car_batches = []
        for k, comp in enumerate(g.components):
            in_comp = np.zeros(n, dtype=bool)
            in_comp[comp] = True
            for cls in g.colors:
                sites = cls[in_comp[cls]]
                if sites.size:
                    self.car_batches.append((k, sites))
        self.outside = []
        for comp in g.components:
            mask = np.ones(n, dtype=bool)
            mask[comp] = False
            self.outside.append(np.flatnonzero(mask))
        self.gamma_classes = [np.arange(s, T, 3) for s in range(3)]
        D = np.diff(np.eye(T), n=2, axis=0)
        self.rw2_precision = D.T @ D
        self.sum_vector = np.r_[np.ones(T), np.zeros(1 + C * p)]
        self.accepts["joint"] = 0.0
        self.post_accepts["joint"] = 0.0
        self._check_initial()
        self._refresh()
        if config.likelihood:
            self._update_eta_preconditioner()

    # ---------------------------------------------------------- bookkeeping

    def _check_initial(self):
        st = self.state
        lp = log_prior(st, self.spec, self.data.graph)
        ll = log_likelihood(st, self.data) if self.config.likelihood else 0.0
        if not (math.isfinite(lp) and math.isfinite(ll)):
            terms = {"log_prior": lp, "log_likelihood": ll, "alpha": st.alpha, "log_r": st.log_r,
                     "sigma_u": st.sigma_u, "sigma_v": st.sigma_v, "sigma_gamma": st.sigma_gamma,
                     "eta_finite": bool(np.all(np.isfinite(st.eta)))}
            raise SamplerInitError("non-finite log-posterior at initialisation", terms)

    def _refresh(self):
        st, d = self.state, self.data
        self.s = exposure_effects(st, d)
        self.log_lam = base_predictor(st, d) + self.s[st.z, np.arange(d.n)]

    @property
    def adapting(self) -> bool:
        return self.sweep <= self.config.burn_in

    def _adapt(self, key, accepted, target=None, index=None):
        accepted = np.asarray(accepted, dtype=float)
        if index is None:
            self.accepts[key] = self.accepts[key] + accepted
        else:
            self.accepts[key][index] += accepted
        if not self.adapting:
            if index is None:
                self.post_accepts[key] = self.post_accepts[key] + accepted
            else:
                self.post_accepts[key][index] += accepted
            return
        target = self.config.target_acceptance if target is None else target
        step = 1.0 / math.ceil(self.sweep / self.config.adaptation_window)
        if index is None:
            self.log_scales[key] = self.log_scales[key] + step * (accepted - target)
        else:
            self.log_scales[key][index] += step * (accepted - target)

    def _lik_delta(self, rows, cols, delta):
        """Summed kernel change for adding ``delta`` to ``log_lam[rows][:, cols]`` (broadcast)."""
        y = self.data.Y[rows][:, cols] if cols is not None else self.data.Y[rows]
        ll = self.log_lam[rows][:, cols] if cols is not None else self.log_lam[rows]
        lr = self.state.log_r
        return nb_kernel(y, ll + delta, lr) - nb_kernel(y, ll, lr)

    def _alpha_prior_delta(self, a, s):
        sd = self.spec.priors.alpha_sd
        return -((a + s) ** 2 - a * a) / (2 * sd * sd)

    # ------------------------------------------------------- scalar blocks

    def update_r(self):
        st, d = self.state, self.data
        pr = self.spec.priors
        w = st.log_r
        w_new = w + math.exp(self.log_scales["r"]) * self.rng.standard_normal()
        log_u = math.log(self.rng.random())
        if w_new > 700.0:  # exp overflows; the Gamma tail is negligible there anyway
            self._adapt("r", False)
            return
        lr = (pr.r_shape * (w_new - w) - pr.r_rate * (math.exp(w_new) - math.exp(w)))
        if self.config.likelihood:
            new = nb_kernel(d.Y, self.log_lam, w_new).sum() + total_log_coef(d.y_unique, d.y_counts, math.exp(w_new))
            old = nb_kernel(d.Y, self.log_lam, w).sum() + total_log_coef(d.y_unique, d.y_counts, math.exp(w))
            lr += float(new - old)
        ok = log_u < lr
        if ok:
            st.log_r = w_new
        self._adapt("r", ok)

    def update_alpha(self):
        st = self.state
        delta = math.exp(self.log_scales["alpha"]) * self.rng.standard_normal()
        log_u = math.log(self.rng.random())
        lr = self._alpha_prior_delta(st.alpha, delta)
        if self.config.likelihood:
            lr += float(self._lik_delta(slice(None), None, delta).sum())
        ok = log_u < lr
        if ok:
            st.alpha += delta
            self.log_lam += delta
        self._adapt("alpha", ok)

    def _sigma_move(self, key, value, log_target):
        w = math.log(value)
        w_new = w + math.exp(self.log_scales[key]) * self.rng.standard_normal()
        log_u = math.log(self.rng.random())
        lr = log_target(math.exp(w_new)) + w_new - log_target(value) - w
        ok = log_u < lr
        self._adapt(key, ok)
        return math.exp(w_new) if ok else value

    def update_sigmas(self):
        st, pr, g = self.state, self.spec.priors, self.data.graph

        def uniform_sd(upper, rank, quad):
            def f(s):
                if not 0 < s < upper:
                    return -math.inf
                return -rank * math.log(s) - quad / (2 * s * s)
            return f

        st.sigma_u = self._sigma_move(
            "sigma_u", st.sigma_u, uniform_sd(pr.sigma_u_upper, g.car_rank, car_quadratic(st.u, g)))
        st.sigma_v = self._sigma_move(
            "sigma_v", st.sigma_v, uniform_sd(pr.sigma_v_upper, self.data.n - 1, float(st.v @ st.v)))
        st.sigma_gamma = self._sigma_move(
            "sigma_gamma", st.sigma_gamma,
            uniform_sd(pr.sigma_gamma_upper, max(self.data.T - 2, 0), rw2_quadratic(st.gamma)))

    # ----------------------------------------------------------- eta blocks

    def update_eta(self):
        """Joint random-walk move of ``alpha`` and every cluster's ``eta``.

        The overall level and the surface levels are strongly correlated
        because cross-basis rows are mostly of one sign, so they move together
        under a curvature-preconditioned proposal.
        """
        st, d = self.state, self.data
        sd = self.spec.priors.eta_sd
        C, p = st.eta.shape
        step = math.exp(self.log_scales["eta"]) * (self.eta_chol @ self.rng.standard_normal(1 + C * p))
        log_u = math.log(self.rng.random())
        da, de = float(step[0]), step[1:].reshape(C, p)
        new = st.eta + de
        lr = -((new * new).sum() - (st.eta * st.eta).sum()) / (2 * sd * sd) + self._alpha_prior_delta(st.alpha, da)
        delta = None
        if self.config.likelihood:
            delta = da + np.einsum("itp,ip->it", d.B, de[st.z])
            lr += float(self._lik_delta(slice(None), None, delta).sum())
        ok = log_u < lr
        if ok:
            st.eta = new
            st.alpha += da
            if delta is not None:
                self.log_lam += delta
        self._adapt("eta", ok, target=self.config.target_acceptance_block)

    def _update_eta_preconditioner(self):
        st, d = self.state, self.data
        C, p = st.eta.shape
        lam = np.exp(self.log_lam)
        w = lam * st.r / (lam + st.r)
        H = np.diag(np.r_[self.spec.priors.alpha_sd ** -2, np.full(C * p, self.spec.priors.eta_sd ** -2)])
        H[0, 0] += w.sum()
        for c in range(C):
            rows = st.z == c
            Bc, wc = d.B[rows], w[rows]
            blk = slice(1 + c * p, 1 + (c + 1) * p)
            H[0, blk] = H[blk, 0] = np.einsum("itp,it->p", Bc, wc)
            H[blk, blk] += np.einsum("itp,it,itq->pq", Bc, wc, Bc)
        try:
            cov = np.linalg.inv(H)
            self.eta_chol = np.linalg.cholesky((cov + cov.T) / 2) * (2.38 / math.sqrt(1 + C * p))
        except np.linalg.LinAlgError:
            pass

    # ------------------------------------------------------ field site moves

    def _sequential_alpha(self, local, deltas, m, log_u, extra=None):
        """Accept/reject sites in order, threading alpha's prior through the compensating shifts."""
        a = self.state.alpha
        k = 2.0 * self.spec.priors.alpha_sd ** 2
        acc = np.zeros(len(deltas), dtype=bool)
        total = 0.0
        local_l, steps, lu = local.tolist(), (np.asarray(deltas) / m).tolist(), log_u.tolist()
        for j in range(len(steps)):
            s = steps[j]
            lr = local_l[j] - (2.0 * a + s) * s / k
            if extra is not None:
                lr += extra(total, s, j)
            if lu[j] < lr:
                acc[j] = True
                a += s
                total += s
        return acc, a, total

    def update_u(self):
        st, d, g = self.state, self.data, self.data.graph
        sig2 = st.sigma_u**2
        for k, sites in self.car_batches:
            comp = g.components[k]
            m = len(comp)
            delta = np.exp(self.log_scales["u"][sites]) * self.rng.standard_normal(sites.size)
            log_u = np.log(self.rng.random(sites.size))
            deg = g.n_neighbors[sites]
            diff = deg * st.u[sites] - g.neighbor_sums(st.u, sites)
            local = -(deg * delta**2 + 2 * delta * diff) / (2 * sig2)
            if self.config.likelihood:
                local = local + self._lik_delta(sites, None, delta[:, None]).sum(axis=1)
            out = self.outside[k]
            extra = None
            if self.config.likelihood and out.size:
                y_out, ll_out, lr_ = d.Y[out], self.log_lam[out], st.log_r

                def extra(total, s, j):
                    return float((nb_kernel(y_out, ll_out + total + s, lr_)
                                  - nb_kernel(y_out, ll_out + total, lr_)).sum())

            acc, a_new, total = self._sequential_alpha(local, delta, m, log_u, extra)
            st.u[sites[acc]] += delta[acc]
            st.u[comp] -= total
            st.alpha = a_new
            self.log_lam[sites[acc]] += delta[acc][:, None]
            if out.size:
                self.log_lam[out] += total
            self._adapt("u", acc, index=sites)

    def update_v(self):
        st, d = self.state, self.data
        n = d.n
        sites = np.arange(n)
        delta = np.exp(self.log_scales["v"]) * self.rng.standard_normal(n)
        log_u = np.log(self.rng.random(n))
        local = np.zeros(n)
        if self.config.likelihood:
            local = self._lik_delta(sites, None, delta[:, None]).sum(axis=1)
        v0 = st.v.tolist()
        dl = delta.tolist()
        k2 = 2.0 * st.sigma_v**2
        shrink = 1.0 - 1.0 / n

        def prior_term(total, s, j):
            dj = dl[j]
            return -(2.0 * dj * (v0[j] - total) + dj * dj * shrink) / k2

        acc, a_new, total = self._sequential_alpha(local, delta, n, log_u, prior_term)
        st.v[acc] += delta[acc]
        st.v -= total
        st.alpha = a_new
        self.log_lam[acc] += delta[acc][:, None]
        self._adapt("v", acc, index=sites)

    def update_gamma(self):
        st, d = self.state, self.data
        T, L = d.T, d.L
        sig2 = st.sigma_gamma**2
        for ts in self.gamma_classes:
            if ts.size == 0:
                continue
            delta = np.exp(self.log_scales["gamma"][ts]) * self.rng.standard_normal(ts.size)
            log_u = np.log(self.rng.random(ts.size))
            d2 = np.diff(st.gamma, n=2)
            dq = np.zeros(ts.size)
            for off, coef in ((-2, 1.0), (-1, -2.0), (0, 1.0)):
                idx = ts + off
                ok = (idx >= 0) & (idx <= T - 3)
                dq[ok] += 2 * coef * delta[ok] * d2[idx[ok]] + coef * coef * delta[ok] ** 2
            local = -dq / (2 * sig2)
            obs = ts >= L
            if self.config.likelihood and obs.any():
                cols = ts[obs] - L
                local[obs] += self._lik_delta(slice(None), cols, delta[obs][None, :]).sum(axis=0)
            acc, a_new, total = self._sequential_alpha(local, delta, T, log_u)
            st.gamma[ts[acc]] += delta[acc]
            st.gamma -= total
            st.alpha = a_new
            hit = acc & obs
            if hit.any():
                self.log_lam[:, ts[hit] - L] += delta[hit][None, :]
            self._adapt("gamma", acc, index=ts)

    def _unpack(self, x):
        T = self.data.T
        return x[:T], float(x[T]), x[T + 1:].reshape(self.state.eta.shape)

    def _predictor_shift(self, x_new, x_old):
        d = self.data
        g1, a1, e1 = self._unpack(x_new)
        g0, a0, e0 = self._unpack(x_old)
        z = self.state.z
        return (g1 - g0)[None, d.L:] + (a1 - a0) + np.einsum("itp,ip->it", d.B, (e1 - e0)[z])

    def _newton(self, x, log_lam, sig2):
        """Gaussian approximation around ``x = (gamma, alpha, eta)``: one Fisher-scoring step."""
        d, st = self.data, self.state
        T, L = d.T, d.L
        C, p = st.eta.shape
        r = st.r
        lam = np.exp(log_lam)
        w = lam * r / (lam + r)
        g = r * (d.Y - lam) / (lam + r)
        k = T + 1 + C * p
        P = np.zeros((k, k))
        P[:T, :T] = self.rw2_precision / sig2
        P[T, T] = self.spec.priors.alpha_sd ** -2
        P[T + 1:, T + 1:] = np.eye(C * p) * self.spec.priors.eta_sd ** -2
        grad = -P @ x
        idx = np.arange(L, T)
        wt = w.sum(axis=0)
        P[idx, idx] += wt
        P[idx, T] += wt
        P[T, idx] += wt
        P[T, T] += wt.sum()
        grad[idx] += g.sum(axis=0)
        grad[T] += g.sum()
        for c in range(C):
            rows = st.z == c
            if not rows.any():
                continue
            Bc, wc = d.B[rows], w[rows]
            blk = slice(T + 1 + c * p, T + 1 + (c + 1) * p)
            wB = np.einsum("itp,it->tp", Bc, wc)
            P[L:T, blk] = wB
            P[blk, L:T] = wB.T
            P[T, blk] = P[blk, T] = wB.sum(axis=0)
            P[blk, blk] += np.einsum("itp,itq->pq", Bc * wc[..., None], Bc)
            grad[blk] += np.einsum("itp,it->p", Bc, g[rows])
        chol = np.linalg.cholesky(P)
        return x + _chol_solve(chol, grad), chol

    def _constrained_logq(self, x, mean, chol):
        """Log density of ``N(mean, P^-1)`` conditioned on ``sum(gamma) = 0``, up to a constant."""
        e = self.sum_vector
        s = float(e @ _chol_solve(chol, e))
        a = float(e @ mean)
        dx = chol.T @ (x - mean)
        return -0.5 * dx @ dx + np.log(np.diag(chol)).sum() + 0.5 * a * a / s + 0.5 * math.log(s)

    def update_joint_block(self):
        """Joint move of the temporal effect, alpha and all surfaces from a local Gaussian approximation.

        Single-site and random-walk moves are slow along the directions where
        a trend in ``gamma``, the overall level and the surface levels trade
        off against each other; this independence-type move follows them.
        """
        st, d = self.state, self.data
        if not self.config.likelihood or d.T < 3:
            return
        T = d.T
        sig2 = st.sigma_gamma**2
        x = np.r_[st.gamma, st.alpha, st.eta.ravel()]
        z = self.rng.standard_normal(x.size)
        log_u = math.log(self.rng.random())
        e = self.sum_vector
        try:
            mean, chol = self._newton(x, self.log_lam, sig2)
            prop = mean + _chol_solve_t(chol, z)
            Pe = _chol_solve(chol, e)
            prop = prop - Pe * (e @ prop) / (e @ Pe)
            new_lam = self.log_lam + self._predictor_shift(prop, x)
            mean_r, chol_r = self._newton(prop, new_lam, sig2)
        except np.linalg.LinAlgError:
            self._adapt_block("joint", False)
            return
        sd = self.spec.priors.eta_sd
        lr = (nb_kernel(d.Y, new_lam, st.log_r).sum() - nb_kernel(d.Y, self.log_lam, st.log_r).sum()
              - (rw2_quadratic(prop[:T]) - rw2_quadratic(x[:T])) / (2 * sig2)
              + self._alpha_prior_delta(x[T], prop[T] - x[T])
              - (prop[T + 1:] @ prop[T + 1:] - x[T + 1:] @ x[T + 1:]) / (2 * sd * sd)
              + self._constrained_logq(x, mean_r, chol_r) - self._constrained_logq(prop, mean, chol))
        ok = log_u < lr
        if ok:
            g, a, eta = self._unpack(prop)
            st.gamma, st.alpha, st.eta = g.copy(), a, eta.copy()
            self.log_lam = new_lam
        self._adapt_block("joint", ok)

    def _adapt_block(self, key, ok):
        # counted for diagnostics only; these proposals have no tunable scale
        self.accepts[key] = self.accepts[key] + float(ok)
        if not self.adapting:
            self.post_accepts[key] = self.post_accepts[key] + float(ok)

    # ------------------------------------------------------ mixture updates

    def update_z(self):
        st = self.state
        if st.C == 1:
            return
        st.z = gibbs_update_z(st, self.data, self.rng, self.config.likelihood)
        self._refresh()

    def update_q(self):
        self.state.q = gibbs_update_q_flat(self.state, self.rng)

    def update_assignment_fields(self):
        st, g = self.state, self.data.graph
        hs = self.spec.priors.assignment_sd_scale
        n = self.data.n
        z = st.z
        for c in range(self.k_fields):
            # structured field, compensated into v^c over the component
            sig2 = st.sigma_uc[c] ** 2
            sigv2 = st.sigma_vc[c] ** 2
            for k, sites in self.car_batches:
                comp = g.components[k]
                m = len(comp)
                uc, vc = st.assignment_u[c], st.assignment_v[c]
                delta = np.exp(self.log_scales["field_u"][c, sites]) * self.rng.standard_normal(sites.size)
                log_u = np.log(self.rng.random(sites.size))
                deg = g.n_neighbors[sites]
                diff = deg * uc[sites] - g.neighbor_sums(uc, sites)
                logits = st.assignment_logits()[:, sites]
                before = area_assignment_loglik(logits, z[sites])
                logits[c] += delta
                local = area_assignment_loglik(logits, z[sites]) - before
                local -= (deg * delta**2 + 2 * delta * diff) / (2 * sig2)
                acc = np.zeros(sites.size, dtype=bool)
                vsum = float(vc[comp].sum())
                total = 0.0
                for j in range(sites.size):
                    s = delta[j] / m
                    lr = local[j] - (2 * s * vsum + m * s * s) / (2 * sigv2)
                    if log_u[j] < lr:
                        acc[j] = True
                        vsum += m * s
                        total += s
                uc[sites[acc]] += delta[acc]
                uc[comp] -= total
                vc[comp] += total
                self._adapt("field_u", acc, index=(c, sites))
            # unstructured field, all sites independent
            vc = st.assignment_v[c]
            delta = np.exp(self.log_scales["field_v"][c]) * self.rng.standard_normal(n)
            log_u = np.log(self.rng.random(n))
            logits = st.assignment_logits()
            before = area_assignment_loglik(logits, z)
            logits[c] += delta
            local = area_assignment_loglik(logits, z) - before
            local -= ((vc + delta) ** 2 - vc**2) / (2 * sigv2)
            acc = log_u < local
            vc[acc] += delta[acc]
            self._adapt("field_v", acc, index=(c, slice(None)))

            def hn(rank, quad):
                def f(s):
                    if s <= 0:
                        return -math.inf
                    return -0.5 * (s / hs) ** 2 - rank * math.log(s) - quad / (2 * s * s)
                return f

            for key, arr, rank, quad in (
                ("sigma_uc", st.sigma_uc, g.car_rank, car_quadratic(st.assignment_u[c], g)),
                ("sigma_vc", st.sigma_vc, n, float(vc @ vc)),
            ):
                w = math.log(arr[c])
                w_new = w + math.exp(self.log_scales[key][c]) * self.rng.standard_normal()
                log_u1 = math.log(self.rng.random())
                f = hn(rank, quad)
                lr = f(math.exp(w_new)) + w_new - f(arr[c]) - w
                ok = log_u1 < lr
                if ok:
                    arr[c] = math.exp(w_new)
                self._adapt(key, ok, index=c)
        if self.k_fields:
            logits = st.assignment_logits()
            st.q = np.exp(logits - logsumexp(logits, axis=0)).T

    # --------------------------------------------------------------- sweep

    def _recentre(self):
        st, g = self.state, self.data.graph
        for comp in g.components:
            m = st.u[comp].mean()
            st.u[comp] -= m
            st.alpha += m
        m = st.v.mean()
        st.v -= m
        st.alpha += m
        m = st.gamma.mean()
        st.gamma -= m
        st.alpha += m
        for c in range(self.k_fields):
            for comp in g.components:
                m = st.assignment_u[c][comp].mean()
                st.assignment_u[c][comp] -= m
                st.assignment_v[c][comp] += m

    def step(self):
        self.sweep += 1
        self._refresh()
        self.update_r()
        self.update_alpha()
        self.update_eta()
        self.update_u()
        self.update_v()
        self.update_gamma()
        self.update_joint_block()
        self.update_sigmas()
        if self.spec.is_mixture:
            if self.sweep > min(self.config.assignment_warmup, self.config.burn_in // 2):
                self.update_z()
            if self.spec.variant is Variant.MIXTURE_FLAT:
                self.update_q()
            else:
                self.update_assignment_fields()
        self._recentre()
        cfg = self.config
        if not self.adapting:
            self.post_sweeps += 1
        elif self.sweep % cfg.adaptation_window == 0 and self.config.likelihood:
            self._refresh()
            self._update_eta_preconditioner()
        q0 = cfg.burn_in - cfg.burn_in // 4
        if q0 < self.sweep <= cfg.burn_in:
            self.eta_ref_sum += self.state.eta
            self.eta_ref_count += 1
        if cfg.retained(self.sweep):
            self._record()

    def _record(self):
        st = self.state
        k = self.k_fields
        C = self.spec.C
        n = self.data.n
        au = np.zeros((C, n))
        av = np.zeros((C, n))
        au[:k] = st.assignment_u
        av[:k] = st.assignment_v
        self.records.append({
            "alpha": st.alpha, "r": st.r, "log_r": st.log_r, "eta": st.eta.copy(), "u": st.u.copy(),
            "v": st.v.copy(), "gamma": st.gamma.copy(), "sigma_u": st.sigma_u, "sigma_v": st.sigma_v,
            "sigma_gamma": st.sigma_gamma, "z": st.z.copy(), "q": st.q.copy(),
            "assignment_u": au, "assignment_v": av,
            "sigma_uc": st.sigma_uc.copy(), "sigma_vc": st.sigma_vc.copy(),
        })
        self.loglik_rows.append(pointwise_loglik(st, self.data).ravel())
        if self.config.waic_mode == "marginal":
            self.loglik_marginal_rows.append(pointwise_loglik(st, self.data, marginal=True).ravel())

    def run(self, until: Optional[int] = None, checkpoint_path=None, checkpoint_every: int = 0):
        stop = self.config.n_iterations if until is None else min(until, self.config.n_iterations)
        while self.sweep < stop:
            self.step()
            if checkpoint_path and checkpoint_every and self.sweep % checkpoint_every == 0:
                self.save_checkpoint(checkpoint_path)
        return self

    @property
    def finished(self) -> bool:
        return self.sweep >= self.config.n_iterations

    # ---------------------------------------------------------- results

    def acceptance_rates(self) -> dict:
        out = {}
        for key, acc in self.post_accepts.items():
            acc = np.asarray(acc)
            if acc.size == 0:
                continue
            out[key] = float(acc.mean() / self.post_sweeps) if self.post_sweeps else float("nan")
        if self.spec.variant is not Variant.MIXTURE_SPATIAL:
            for key in ("field_u", "field_v", "sigma_uc", "sigma_vc"):
                out.pop(key, None)
        return out

    def draws(self) -> PosteriorDraws:
        if not self.records:
            raise RuntimeError("no retained draws")
        arrays = {key: np.array([rec[key] for rec in self.records]) for key in self.records[0]}
        loglik = np.array(self.loglik_rows)
        marg = np.array(self.loglik_marginal_rows) if self.loglik_marginal_rows else None
        draws = PosteriorDraws(arrays, loglik, self.acceptance_rates(), self.config, self.spec,
                               loglik_marginal=marg)
        ref = self.eta_ref_sum / self.eta_ref_count if self.eta_ref_count else arrays["eta"].mean(axis=0)
        # canonical label order, so summaries do not depend on how the chain was initialised
        ref = ref[np.lexsort((np.arange(len(ref)), ref.mean(axis=1)))]
        relabel(draws, ref)
        if self.spec.C > 1:
            empty = np.array([[np.all(z != c) for c in range(self.spec.C)] for z in arrays["z"]])
            for c in np.flatnonzero(empty.mean(axis=0) > 0.5):
                msg = f"cluster {c + 1} is empty in more than half of the retained draws"
                draws.warnings.append(msg)
                warnings.warn(msg, RuntimeWarning)
        return draws

    # ---------------------------------------------------------- checkpoint

    def save_checkpoint(self, path):
        st = self.state
        payload = {f"state_{f.name}": np.asarray(getattr(st, f.name)) for f in fields(st)}
        for k, v in self.log_scales.items():
            payload[f"scale_{k}"] = np.asarray(v)
        for k, v in self.accepts.items():
            payload[f"acc_{k}"] = np.asarray(v)
        for k, v in self.post_accepts.items():
            payload[f"post_{k}"] = np.asarray(v)
        payload["eta_chol"] = self.eta_chol
        payload["eta_ref_sum"] = self.eta_ref_sum
        payload["counters"] = np.array([self.sweep, self.post_sweeps, self.eta_ref_count])
        if self.records:
            for key in self.records[0]:
                payload[f"rec_{key}"] = np.array([rec[key] for rec in self.records])
            payload["loglik_rows"] = np.array(self.loglik_rows)
            if self.loglik_marginal_rows:
                payload["loglik_marginal_rows"] = np.array(self.loglik_marginal_rows)
        payload["meta"] = np.array(json.dumps({
            "rng": self.rng.bit_generator.state, "config": asdict(self.config)}, default=int))
        _write_npz(path, payload)

    @classmethod
    def from_checkpoint(cls, path, data: ModelData, spec: ModelSpec) -> "Chain":
        with np.load(path) as f:
            z = {k: f[k] for k in f.files}
        meta = json.loads(str(z["meta"]))
        config = SamplerConfig(**meta["config"])
        kw = {}
        for fld in fields(ParameterState):
            arr = z[f"state_{fld.name}"]
            kw[fld.name] = float(arr) if arr.ndim == 0 and fld.name not in ("z",) else arr.copy()
        state = ParameterState(**kw)
        chain = cls(data, spec, config, state=state)
        chain.rng.bit_generator.state = meta["rng"]
        for k in chain.log_scales:
            v = z[f"scale_{k}"]
            chain.log_scales[k] = float(v) if v.ndim == 0 else v.copy()
        for k in chain.accepts:
            a, b = z[f"acc_{k}"], z[f"post_{k}"]
            chain.accepts[k] = float(a) if a.ndim == 0 else a.copy()
            chain.post_accepts[k] = float(b) if b.ndim == 0 else b.copy()
        chain.eta_chol = z["eta_chol"].copy()
        chain.eta_ref_sum = z["eta_ref_sum"].copy()
        chain.sweep, chain.post_sweeps, chain.eta_ref_count = (int(x) for x in z["counters"])
        keys = [k[4:] for k in z if k.startswith("rec_")]
        if keys:
            S = len(z[f"rec_{keys[0]}"])
            chain.records = [{k: (z[f"rec_{k}"][s].copy() if z[f"rec_{k}"].ndim > 1 else z[f"rec_{k}"][s].item())
                              for k in keys} for s in range(S)]
            chain.loglik_rows = list(z["loglik_rows"])
            if "loglik_marginal_rows" in z:
                chain.loglik_marginal_rows = list(z["loglik_marginal_rows"])
        chain._refresh()
        return chain


# ----------------------------------------------------------- relabelling


def relabel(draws: PosteriorDraws, reference: np.ndarray) -> None:
    """Permute cluster labels of every draw to best match ``reference`` eta rows (in place)."""
    a = draws.arrays
    S, C = a["eta"].shape[:2]
    perms = np.tile(np.arange(C), (S, 1))
    if C > 1:
        for s in range(S):
            cost = np.linalg.norm(a["eta"][s][:, None, :] - reference[None, :, :], axis=2)
            _, cols = linear_sum_assignment(cost)
            perm = cols  # draw cluster c -> label perm[c]
            perms[s] = perm
            inv = np.argsort(perm)
            a["eta"][s] = a["eta"][s][inv]
            a["z"][s] = perm[a["z"][s]]
            a["q"][s] = a["q"][s][:, inv]
            a["assignment_u"][s] = a["assignment_u"][s][inv]
            a["assignment_v"][s] = a["assignment_v"][s][inv]
    draws.permutations = perms


def mh_update_continuous_block(chain: Chain, block: str) -> None:
    """Run one Metropolis update of ``block`` on ``chain`` in place."""
    dispatch = {
        "alpha": chain.update_alpha, "r": chain.update_r, "eta": chain.update_eta,
        "u": chain.update_u, "v": chain.update_v, "gamma": chain.update_gamma,
        "sigmas": chain.update_sigmas,
    }
    dispatch[block]()


def mh_update_assignment_fields(chain: Chain) -> None:
    chain.update_assignment_fields()


def run_chain(dataset, model_spec: ModelSpec, config: SamplerConfig, crossbasis=None,
              initial: Optional[ParameterState] = None) -> PosteriorDraws:
    """Run a full chain and return relabelled draws.

    ``dataset`` may be a :class:`ModelData` or a ``PanelDataset`` together
    with its ``crossbasis``.
    """
    data = dataset if isinstance(dataset, ModelData) else ModelData(dataset, crossbasis)
    chain = Chain(data, model_spec, config, state=initial)
    chain.run()
    return chain.draws()
