"""Parameters, priors and the negative binomial likelihood for the three model variants.

Conventions: areas and clusters are 0-based in memory (files use 1-based
labels); time ``t`` is 1-based wherever it appears as an argument. The first
``L`` time points of every area carry no cross-basis row and are excluded
from the likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.special import betaln, gammaln, logsumexp

from .graph import AdjacencyGraph, car_quadratic
from .splines import CrossBasis, CrossBasisSpec


class Variant(str, Enum):
    STANDARD = "standard"
    MIXTURE_FLAT = "mixture_flat"
    MIXTURE_SPATIAL = "mixture_spatial"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"flat": "mixture_flat", "spatial": "mixture_spatial", "dlnm": "standard"}
        return cls(aliases.get(key, key))


@dataclass
class PanelDataset:
    Y: np.ndarray
    X: np.ndarray
    offsets: np.ndarray
    graph: AdjacencyGraph
    area_ids: Optional[list] = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y)
        self.X = np.asarray(self.X, dtype=float)
        self.offsets = np.asarray(self.offsets, dtype=float)
        if self.Y.ndim != 2 or self.X.shape != self.Y.shape:
            raise ValueError("Y and X must be n x T arrays of equal shape")
        if self.offsets.shape != (self.Y.shape[0],):
            raise ValueError("need one offset per area")
        if self.graph.n != self.Y.shape[0]:
            raise ValueError("graph size does not match the number of areas")
        if not np.all(np.isfinite(self.Y)) or np.any(self.Y < 0) or np.any(self.Y != np.round(self.Y)):
            raise ValueError("counts must be finite non-negative integers")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("exposure must be finite")
        if not np.all(self.offsets > 0):
            raise ValueError("offsets must be positive")
        self.Y = self.Y.astype(np.int64)
        if self.area_ids is None:
            self.area_ids = [str(i + 1) for i in range(self.n)]

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class PriorSpec:
    r_shape: float = 0.001
    r_rate: float = 0.001
    alpha_sd: float = 10.0
    eta_sd: float = 100.0
    sigma_u_upper: float = 10.0
    sigma_v_upper: float = 10.0
    sigma_gamma_upper: float = 10.0
    assignment_sd_scale: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"prior hyperparameter {f.name} must be positive")


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant
    C: int
    crossbasis_spec: CrossBasisSpec
    priors: PriorSpec = PriorSpec()

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.variant is Variant.STANDARD and self.C != 1:
            raise ValueError("the standard model has exactly one cluster")
        # C = 1 is accepted for the flat mixture: it must collapse to the standard model
        if self.variant is Variant.MIXTURE_SPATIAL and self.C < 2:
            raise ValueError("the spatial mixture needs C >= 2")
        if self.C < 1:
            raise ValueError("C must be positive")

    @property
    def is_mixture(self) -> bool:
        return self.variant is not Variant.STANDARD


@dataclass
class ParameterState:
    """One point in parameter space.

    The dispersion is stored on the log scale (``log_r``) so that very small
    values seen under diffuse priors stay representable. Assignment fields of
    the spatial mixture are stored for clusters ``0..C-2`` only; the last
    cluster is the reference category with fields fixed at zero.
    """

    alpha: float
    log_r: float
    eta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    gamma: np.ndarray
    sigma_u: float
    sigma_v: float
    sigma_gamma: float
    z: np.ndarray
    q: np.ndarray
    assignment_u: np.ndarray
    assignment_v: np.ndarray
    sigma_uc: np.ndarray
    sigma_vc: np.ndarray

    @property
    def r(self) -> float:
        return math.exp(self.log_r)

    @property
    def C(self) -> int:
        return self.eta.shape[0]

    def copy(self) -> "ParameterState":
        return replace(self, **{f.name: np.array(getattr(self, f.name)) for f in fields(self)
                                if isinstance(getattr(self, f.name), np.ndarray)})

    def assignment_logits(self) -> np.ndarray:
        """``(C, n)`` log-weights ``u^c + v^c`` with the reference row appended."""
        n = self.u.shape[0]
        return np.vstack([self.assignment_u + self.assignment_v, np.zeros((1, n))])

    @classmethod
    def zeros(cls, n: int, T: int, n_coef: int, C: int = 1, variant=Variant.STANDARD) -> "ParameterState":
        spatial = Variant.parse(variant) is Variant.MIXTURE_SPATIAL
        k = C - 1 if spatial else 0
        return cls(
            alpha=0.0,
            log_r=0.0,
            eta=np.zeros((C, n_coef)),
            u=np.zeros(n),
            v=np.zeros(n),
            gamma=np.zeros(T),
            sigma_u=1.0,
            sigma_v=1.0,
            sigma_gamma=1.0,
            z=np.zeros(n, dtype=int),
            q=np.full((n, C), 1.0 / C),
            assignment_u=np.zeros((k, n)),
            assignment_v=np.zeros((k, n)),
            sigma_uc=np.ones(k),
            sigma_vc=np.ones(k),
        )


# ---------------------------------------------------------------- likelihood


def _log_coef(y, r):
    """``log Gamma(y+r) - log Gamma(r) - log y!`` accurate for very large ``r``."""
    y = np.asarray(y, dtype=float)
    pos = y > 0
    ys = np.where(pos, y, 1.0)
    return np.where(pos, -betaln(ys, r) - np.log(ys), 0.0)


def nb_log_pmf(y, lam, r):
    """Negative binomial log-pmf with mean ``lam`` and dispersion ``r``.

    Success probability is ``r / (r + lam)`` so that ``Var = lam (lam + r) / r``.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)) or not r > 0:
        raise ValueError("nb_log_pmf needs lam > 0 and r > 0")
    y = np.asarray(y, dtype=float)
    log_p = -np.log1p(lam / r)  # log(r / (r + lam))
    log_1mp = np.log(lam) - np.log(r + lam)
    out = _log_coef(y, r) + r * log_p + y * log_1mp
    return float(out) if out.ndim == 0 else out


def nb_kernel(y, log_lam, log_r: float):
    """NB log-pmf minus its ``y``/``r``-only normalising part, from ``log lam``.

    Only valid inside ratios where ``r`` is held fixed.
    """
    d = log_lam - log_r
    sp = np.log1p(np.exp(np.minimum(d, 700.0)))  # log(1 + lam / r)
    if np.max(d, initial=0.0) > 30.0:
        sp = np.where(d > 30.0, d + np.log1p(np.exp(-np.abs(d))), sp)
    return y * (d - sp) - math.exp(log_r) * sp


def nb_loglik_from_log_lam(y, log_lam, log_r: float):
    """Full pointwise NB log-likelihood given the log mean."""
    return nb_kernel(y, log_lam, log_r) + _log_coef(y, math.exp(log_r))


def total_log_coef(y_unique, y_counts, r: float) -> float:
    """Sum of :func:`_log_coef` over observations, from value counts."""
    return float(y_counts @ _log_coef(y_unique, r))


@dataclass
class ModelData:
    """Everything the likelihood needs, in the layout the sampler uses."""

    dataset: PanelDataset
    crossbasis: CrossBasis

    def __post_init__(self):
        L = self.crossbasis.spec.max_lag
        if self.crossbasis.values.shape[:2] != (self.dataset.n, self.dataset.T - L):
            raise ValueError("cross-basis does not match the dataset dimensions")
        self.L = L
        self.Y = self.dataset.Y[:, L:].astype(float)
        self.B = self.crossbasis.values
        self.log_offsets = np.log(self.dataset.offsets)
        self.y_unique, inverse, self.y_counts = np.unique(self.Y, return_inverse=True, return_counts=True)
        self.y_inverse = inverse.reshape(self.Y.shape)
        self.graph = self.dataset.graph

    @property
    def n(self):
        return self.dataset.n

    @property
    def T(self):
        return self.dataset.T

    @property
    def n_obs_time(self):
        return self.Y.shape[1]


def base_predictor(state: ParameterState, data: ModelData) -> np.ndarray:
    """``log N_i + alpha + u_i + v_i + gamma_t`` over the likelihood window, ``(n, T-L)``."""
    return ((data.log_offsets + state.alpha + state.u + state.v)[:, None]
            + state.gamma[None, data.L:])


def exposure_effects(state: ParameterState, data: ModelData) -> np.ndarray:
    """``s(x_it; eta_c)`` for every cluster, shape ``(C, n, T-L)``."""
    return np.einsum("itp,cp->cit", data.B, state.eta)


def log_lambda_at_z(state: ParameterState, data: ModelData) -> np.ndarray:
    s = exposure_effects(state, data)
    return base_predictor(state, data) + s[state.z, np.arange(data.n)]


def linear_predictor(state: ParameterState, dataset: PanelDataset, crossbasis: CrossBasis,
                     i: int, t: int, c: int) -> float:
    """``log N_i + alpha + b_it' eta_c + u_i + v_i + gamma_t`` for 1-based time ``t``."""
    lo, hi = crossbasis.valid_time_range
    if not lo <= t <= hi:
        raise ValueError(f"time {t} outside the cross-basis range {lo}..{hi}")
    b = crossbasis.values[i, t - lo]
    return (math.log(dataset.offsets[i]) + state.alpha + float(b @ state.eta[c])
            + state.u[i] + state.v[i] + state.gamma[t - 1])


def area_cluster_loglik(state: ParameterState, dataset: PanelDataset, crossbasis: CrossBasis,
                        i: int, c: int) -> float:
    L = crossbasis.spec.max_lag
    b = crossbasis.values[i]
    log_lam = (math.log(dataset.offsets[i]) + state.alpha + state.u[i] + state.v[i]
               + state.gamma[L:] + b @ state.eta[c])
    return float(np.sum(nb_log_pmf(dataset.Y[i, L:], np.exp(log_lam), state.r)))


def cluster_logliks(state: ParameterState, data: ModelData, full: bool = True) -> np.ndarray:
    """Area-by-cluster log-likelihood ``(n, C)``; ``full=False`` drops terms constant in ``c``."""
    log_lam = base_predictor(state, data)[None] + exposure_effects(state, data)
    ll = nb_kernel(data.Y[None], log_lam, state.log_r).sum(axis=2).T
    if full:
        ll = ll + _log_coef(data.Y, state.r).sum(axis=1)[:, None]
    return ll


def pointwise_loglik(state: ParameterState, data: ModelData, marginal: bool = False) -> np.ndarray:
    """Per-observation log-likelihood over the window, ``(n, T-L)``.

    ``marginal=False`` conditions on the drawn ``z``; ``marginal=True`` returns
    ``log sum_c q_ic NB(y_it | lambda_it(c), r)``.
    """
    if not marginal:
        return nb_loglik_from_log_lam(data.Y, log_lambda_at_z(state, data), state.log_r)
    log_lam = base_predictor(state, data)[None] + exposure_effects(state, data)
    ll = nb_loglik_from_log_lam(data.Y[None], log_lam, state.log_r)
    with np.errstate(divide="ignore"):
        logq = np.log(state.q.T)[:, :, None]
    return logsumexp(ll + logq, axis=0)


def log_likelihood(state: ParameterState, data: ModelData) -> float:
    return float(pointwise_loglik(state, data).sum())


# -------------------------------------------------------------------- priors

LOG_2PI = math.log(2 * math.pi)


def _normal_logpdf(x, sd):
    x = np.asarray(x, dtype=float)
    return float(np.sum(-0.5 * LOG_2PI - math.log(sd) - 0.5 * (x / sd) ** 2))


def _uniform_sd_logpdf(s, upper):
    return -math.log(upper) if 0 < s < upper else -math.inf


def _halfnormal_logpdf(s, scale):
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        return -math.inf
    return float(np.sum(0.5 * math.log(2 / math.pi) - math.log(scale) - 0.5 * (s / scale) ** 2))


def rw2_quadratic(gamma) -> float:
    d2 = np.diff(np.asarray(gamma, dtype=float), n=2)
    return float(d2 @ d2)


def car_field_log_prior(field, graph: AdjacencyGraph, sigma: float) -> float:
    """Intrinsic CAR on the sum-to-zero subspace, including the ``sigma``-dependent normaliser."""
    return -graph.car_rank * math.log(sigma) - car_quadratic(field, graph) / (2 * sigma**2)


def iid_field_log_prior(field, sigma: float, rank: int) -> float:
    f = np.asarray(field, dtype=float)
    return -rank * math.log(sigma) - float(f @ f) / (2 * sigma**2)


def rw2_log_prior(gamma, sigma: float) -> float:
    """Second-order random walk, ``gamma_t | . ~ N(2 gamma_{t-1} - gamma_{t-2}, sigma^2)``."""
    rank = max(len(gamma) - 2, 0)
    return -rank * math.log(sigma) - rw2_quadratic(gamma) / (2 * sigma**2)


def log_prior(state: ParameterState, spec: ModelSpec, graph: AdjacencyGraph) -> float:
    """Joint log prior, dropping constants that depend only on dimensions.

    Included: Gamma density of ``r``; Normal densities of ``alpha`` and every
    ``eta`` entry; the CAR / iid / RW2 field densities with their
    ``sigma``-dependent normalisers (ranks account for the sum-to-zero
    constraints); Uniform densities for the three standard deviations; for the
    mixtures ``sum_i log q_{i z_i}`` (the Dirichlet(1, ..., 1) density is
    constant); for the spatial mixture the per-cluster CAR and Normal field
    densities and HalfNormal densities of their standard deviations.
    """
    p = spec.priors
    lp = 0.0
    for s, upper in ((state.sigma_u, p.sigma_u_upper), (state.sigma_v, p.sigma_v_upper),
                     (state.sigma_gamma, p.sigma_gamma_upper)):
        lp += _uniform_sd_logpdf(s, upper)
    if lp == -math.inf:
        return lp
    a, b = p.r_shape, p.r_rate
    lp += a * math.log(b) - math.lgamma(a) + (a - 1) * state.log_r - b * state.r
    lp += _normal_logpdf(state.alpha, p.alpha_sd)
    lp += _normal_logpdf(state.eta, p.eta_sd)
    lp += car_field_log_prior(state.u, graph, state.sigma_u)
    lp += iid_field_log_prior(state.v, state.sigma_v, len(state.v) - 1)
    lp += rw2_log_prior(state.gamma, state.sigma_gamma)
    if spec.is_mixture and spec.C > 1:
        if spec.variant is Variant.MIXTURE_SPATIAL:
            logits = state.assignment_logits()
            lp += float((logits[state.z, np.arange(len(state.z))] - logsumexp(logits, axis=0)).sum())
        else:
            with np.errstate(divide="ignore"):
                lp += float(np.log(state.q[np.arange(len(state.z)), state.z]).sum())
    if spec.variant is Variant.MIXTURE_SPATIAL:
        lp += _halfnormal_logpdf(state.sigma_uc, p.assignment_sd_scale)
        lp += _halfnormal_logpdf(state.sigma_vc, p.assignment_sd_scale)
        if lp == -math.inf:
            return lp
        for c in range(spec.C - 1):
            lp += car_field_log_prior(state.assignment_u[c], graph, state.sigma_uc[c])
            lp += iid_field_log_prior(state.assignment_v[c], state.sigma_vc[c], len(state.v))
    return lp


def log_posterior(state: ParameterState, spec: ModelSpec, data: ModelData,
                  likelihood: bool = True) -> float:
    lp = log_prior(state, spec, data.graph)
    if likelihood and lp > -math.inf:
        lp += log_likelihood(state, data)
    return lp


def assignment_probabilities(assignment_u, assignment_v, i: Optional[int] = None) -> np.ndarray:
    """Softmax over clusters of ``u^c + v^c``; fields are ``(C, n)``.

    Returns the length-``C`` simplex row for area ``i``, or ``(n, C)`` when
    ``i`` is omitted.
    """
    logits = np.asarray(assignment_u, dtype=float) + np.asarray(assignment_v, dtype=float)
    if i is not None:
        logits = logits[:, i]
    logits = logits - logits.max(axis=0)
    w = np.exp(logits)
    return (w / w.sum(axis=0)).T
