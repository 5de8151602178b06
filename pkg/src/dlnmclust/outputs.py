"""Posterior summaries: relative-risk surfaces, WAIC, membership entropy, effect tables."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy.special import logsumexp

from .splines import CrossBasisSpec

QUANTILES = (0.025, 0.975)


def _quantiles(a, axis=0):
    # numpy's default "linear" method is the type-7 definition
    lo, hi = np.quantile(a, QUANTILES, axis=axis, method="linear")
    return lo, hi


def _eta_draws(draws, cluster: int) -> np.ndarray:
    eta = np.asarray(draws["eta"] if not isinstance(draws, np.ndarray) else draws, dtype=float)
    if eta.ndim == 2:
        eta = eta[:, None, :]
    if eta.shape[0] == 0:
        raise ValueError("no posterior draws")
    return eta[:, cluster, :]


@dataclass
class RRSurface:
    exposure_grid: np.ndarray
    lag_grid: np.ndarray
    rr: np.ndarray
    rr_low: np.ndarray
    rr_high: np.ndarray
    reference_value: float
    cluster: Union[int, str]
    plugin_rr: np.ndarray
    plugin_low: np.ndarray
    plugin_high: np.ndarray
    log_rr_draws: np.ndarray


def _log_rr(eta, spec: CrossBasisSpec, reference, exposure_grid, lag_grid):
    grid = np.asarray(exposure_grid, dtype=float)
    bx = spec.exposure_values(np.append(grid, reference))
    dx = bx[:-1] - bx[-1]
    bl = spec.lag_values(lag_grid)
    # column j * v_lag + k pairs exposure function j with lag function k
    basis = np.einsum("gj,lk->gljk", dx, bl).reshape(len(grid), len(bl), -1)
    return np.einsum("glp,sp->sgl", basis, eta), basis


def rr_surface(draws, crossbasis_spec: CrossBasisSpec, cluster: int, reference: float,
               exposure_grid, lag_grid=None) -> RRSurface:
    """Relative risk over ``exposure x lag`` for one cluster, relative to ``reference``.

    The main surface summarises ``exp(log RR)`` draw by draw; the plug-in
    surface uses the posterior mean of ``eta`` and a normal band from its
    posterior covariance.
    """
    eta = _eta_draws(draws, cluster)
    lag_grid = np.arange(crossbasis_spec.max_lag + 1) if lag_grid is None else np.asarray(lag_grid)
    log_rr, basis = _log_rr(eta, crossbasis_spec, reference, exposure_grid, lag_grid)
    rr = np.exp(log_rr)
    lo, hi = _quantiles(rr)
    mean = eta.mean(axis=0)
    cov = np.cov(eta, rowvar=False) if eta.shape[0] > 1 else np.zeros((eta.shape[1],) * 2)
    fit = basis @ mean
    se = np.sqrt(np.maximum(np.einsum("glp,pq,glq->gl", basis, np.atleast_2d(cov), basis), 0.0))
    return RRSurface(
        exposure_grid=np.asarray(exposure_grid, dtype=float), lag_grid=lag_grid, rr=rr.mean(axis=0),
        rr_low=lo, rr_high=hi, reference_value=float(reference), cluster=cluster,
        plugin_rr=np.exp(fit), plugin_low=np.exp(fit - 1.959964 * se), plugin_high=np.exp(fit + 1.959964 * se),
        log_rr_draws=log_rr,
    )


@dataclass
class CumulativeRR:
    exposure_grid: np.ndarray
    rr: np.ndarray
    rr_low: np.ndarray
    rr_high: np.ndarray
    reference_value: float
    cluster: Union[int, str]
    log_rr_draws: np.ndarray


def cumulative_rr(draws, crossbasis_spec: CrossBasisSpec, cluster: int, reference: float,
                  exposure_grid) -> CumulativeRR:
    """Relative risk accumulated over lags ``0..L``."""
    eta = _eta_draws(draws, cluster)
    lags = np.arange(crossbasis_spec.max_lag + 1)
    log_rr, _ = _log_rr(eta, crossbasis_spec, reference, exposure_grid, lags)
    cum = log_rr.sum(axis=2)
    rr = np.exp(cum)
    lo, hi = _quantiles(rr)
    return CumulativeRR(np.asarray(exposure_grid, dtype=float), rr.mean(axis=0), lo, hi,
                        float(reference), cluster, cum)


def default_exposure_grid(X, n_points: int = 50, upper_percentile: float = 99.0,
                          reference_percentile: float = 5.0):
    """Equally spaced grid from the observed minimum to an upper percentile, plus the reference value."""
    x = np.asarray(X, dtype=float).ravel()
    grid = np.linspace(x.min(), np.percentile(x, upper_percentile), n_points)
    return grid, float(np.percentile(x, reference_percentile))


# --------------------------------------------------------------------- WAIC


class WAIC(NamedTuple):
    waic: float
    lppd: float
    p_waic2: float
    pointwise: np.ndarray
    se: float


def waic(loglik) -> WAIC:
    """WAIC with the variance-based effective number of parameters.

    ``loglik`` is ``(S, N)``: draws by observations.
    """
    ll = np.asarray(loglik, dtype=float)
    S = ll.shape[0]
    if S < 2:
        raise ValueError("WAIC needs at least two draws")
    lpd = logsumexp(ll, axis=0) - math.log(S)
    pw = ll.var(axis=0, ddof=1)
    point = -2.0 * (lpd - pw)
    lppd = float(lpd.sum())
    p = float(pw.sum())
    se = float(math.sqrt(point.size * point.var())) if point.size > 1 else 0.0
    return WAIC(-2.0 * (lppd - p), lppd, p, point, se)


def waic_difference(loglik_a, loglik_b) -> tuple:
    """``WAIC(a) - WAIC(b)`` and its standard error over observations."""
    a, b = waic(loglik_a), waic(loglik_b)
    diff = a.pointwise - b.pointwise
    return float(diff.sum()), float(math.sqrt(diff.size * diff.var()))


# ------------------------------------------------------------------ entropy


def entropy(membership_row) -> float:
    """Shannon entropy in bits, with ``0 log 0 = 0``."""
    p = np.asarray(membership_row, dtype=float)
    if np.any(p < -1e-9) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("membership row is not on the simplex")
    p = p[p > 0]
    return float(max(-(p * np.log2(p)).sum(), 0.0)) + 0.0  # no negative zero


@dataclass
class ClusterSummary:
    membership_probs: np.ndarray
    map_assignment: np.ndarray
    entropy: np.ndarray


def cluster_summary(draws, C: Optional[int] = None) -> ClusterSummary:
    """Posterior membership frequencies, MAP clusters (ties to the lowest index) and entropies.

    Accepts relabelled draws or an ``(S, n)`` integer array of 0-based labels.
    """
    z = np.asarray(draws if isinstance(draws, np.ndarray) else draws["z"], dtype=int)
    if C is None:
        C = draws.spec.C if hasattr(draws, "spec") else int(z.max()) + 1
    S, n = z.shape
    counts = np.zeros((n, C))
    for c in range(C):
        counts[:, c] = (z == c).sum(axis=0)
    probs = counts / S
    ent = np.array([entropy(row) for row in probs])
    return ClusterSummary(probs, probs.argmax(axis=1), ent)


# ---------------------------------------------------------- effect summaries


@dataclass
class EffectSummaries:
    spatial_mean: np.ndarray
    spatial_low: np.ndarray
    spatial_high: np.ndarray
    u_mean: np.ndarray
    v_mean: np.ndarray
    temporal_mean: np.ndarray
    temporal_low: np.ndarray
    temporal_high: np.ndarray


def effect_summaries(draws) -> EffectSummaries:
    uv = np.asarray(draws["u"]) + np.asarray(draws["v"])
    g = np.asarray(draws["gamma"])
    if uv.shape[0] == 0:
        raise ValueError("no posterior draws")
    slo, shi = _quantiles(uv)
    tlo, thi = _quantiles(g)
    return EffectSummaries(uv.mean(axis=0), slo, shi, np.asarray(draws["u"]).mean(axis=0),
                           np.asarray(draws["v"]).mean(axis=0), g.mean(axis=0), tlo, thi)


# ---------------------------------------------------------------------- ESS


def effective_sample_size(x) -> float:
    """Single-chain ESS with Geyer's initial monotone positive sequence."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, n=2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    rho = acov / acov[0]
    pair_sums = []
    for k in range(0, n - 1, 2):
        s = rho[k] + rho[k + 1]
        if s <= 0:
            break
        pair_sums.append(s)
    pair_sums = np.minimum.accumulate(np.array(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pair_sums.sum()
    return float(n / max(tau, 1.0 / math.log10(max(n, 10))))
