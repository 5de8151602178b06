"""Natural cubic spline bases and the exposure x lag cross-basis.

The spline basis used throughout is the *cardinal* natural cubic spline basis:
basis function ``k`` is the natural cubic spline through the knots
(boundary + interior) that equals 1 at knot ``k`` and 0 at every other knot.
Outside the boundary knots each function continues linearly. Without an
intercept the function attached to the left boundary knot is dropped, so
the remaining columns span the natural splines that vanish there.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class SplineSpec:
    interior_knots: tuple = ()
    boundary_knots: tuple = (0.0, 1.0)
    include_intercept: bool = False

    def __post_init__(self):
        inner = tuple(float(k) for k in self.interior_knots)
        lo, hi = (float(b) for b in self.boundary_knots)
        object.__setattr__(self, "interior_knots", inner)
        object.__setattr__(self, "boundary_knots", (lo, hi))
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
            raise ValueError(f"boundary knots must be finite and increasing, got {(lo, hi)}")
        if any(b <= a for a, b in zip(inner, inner[1:])):
            raise ValueError("interior knots must be strictly increasing")
        if inner and (inner[0] <= lo or inner[-1] >= hi):
            raise ValueError("interior knots must lie strictly inside the boundary knots")

    @property
    def dim(self) -> int:
        return len(self.interior_knots) + 1 + int(self.include_intercept)

    @property
    def knots(self) -> np.ndarray:
        lo, hi = self.boundary_knots
        return np.array((lo, *self.interior_knots, hi))


class NaturalSpline:
    """Evaluator for a :class:`SplineSpec`; the knot system is solved once."""

    def __init__(self, spec: SplineSpec):
        self.spec = spec
        k = spec.knots
        m = len(k)
        h = np.diff(k)
        # second derivatives at the knots as a linear map of knot values;
        # rows 0 and m-1 stay zero (natural end conditions)
        curv = np.zeros((m, m))
        if m > 2:
            a = np.zeros((m - 2, m - 2))
            d = np.zeros((m - 2, m))
            for j in range(1, m - 1):
                r = j - 1
                a[r, r] = 2.0 * (h[j - 1] + h[j])
                if r > 0:
                    a[r, r - 1] = h[j - 1]
                if r < m - 3:
                    a[r, r + 1] = h[j]
                d[r, j + 1] += 6.0 / h[j]
                d[r, j] -= 6.0 / h[j] + 6.0 / h[j - 1]
                d[r, j - 1] += 6.0 / h[j - 1]
            curv[1:-1] = np.linalg.solve(a, d)
        self._knots = k
        self._h = h
        self._curv = curv
        eye = np.eye(m)
        self._slope_lo = (eye[1] - eye[0]) / h[0] - h[0] * curv[1] / 6.0
        self._slope_hi = (eye[-1] - eye[-2]) / h[-1] + h[-1] * curv[-2] / 6.0

    def cardinal(self, x) -> np.ndarray:
        """All ``len(knots)`` cardinal functions evaluated at ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ValueError("spline evaluation requires finite inputs")
        k, h, curv = self._knots, self._h, self._curv
        m = len(k)
        out = np.zeros((x.size, m))
        j = np.clip(np.searchsorted(k, x, side="right") - 1, 0, m - 2)
        hj = h[j]
        a = (k[j + 1] - x) / hj
        b = (x - k[j]) / hj
        rows = np.arange(x.size)
        out[rows, j] += a
        out[rows, j + 1] += b
        ca = ((a**3 - a) * hj**2 / 6.0)[:, None]
        cb = ((b**3 - b) * hj**2 / 6.0)[:, None]
        out += ca * curv[j] + cb * curv[j + 1]
        lo = x < k[0]
        if lo.any():
            out[lo] = np.eye(m)[0] + np.outer(x[lo] - k[0], self._slope_lo)
        hi = x > k[-1]
        if hi.any():
            out[hi] = np.eye(m)[-1] + np.outer(x[hi] - k[-1], self._slope_hi)
        return out

    def __call__(self, x) -> np.ndarray:
        full = self.cardinal(x)
        return full if self.spec.include_intercept else full[:, 1:]


def natural_spline_basis(x, spec: SplineSpec) -> np.ndarray:
    """Basis values at ``x``: a vector for scalar input, else ``(len(x), dim)``."""
    out = NaturalSpline(spec)(x)
    return out[0] if np.ndim(x) == 0 else out


@dataclass(frozen=True)
class CrossBasisSpec:
    """Exposure and lag bases; ``lag_basis=None`` means a single constant lag function."""

    max_lag: int
    exposure_basis: SplineSpec
    lag_basis: Optional[SplineSpec] = None

    def __post_init__(self):
        if int(self.max_lag) != self.max_lag or self.max_lag < 0:
            raise ValueError("max_lag must be a non-negative integer")
        object.__setattr__(self, "max_lag", int(self.max_lag))
        if self.lag_basis is not None and self.lag_basis.knots.max() > self.max_lag:
            raise ValueError("lag knots must not exceed max_lag")

    @property
    def v_x(self) -> int:
        return self.exposure_basis.dim

    @property
    def v_lag(self) -> int:
        return 1 if self.lag_basis is None else self.lag_basis.dim

    @property
    def n_coef(self) -> int:
        return self.v_x * self.v_lag

    def exposure_values(self, x) -> np.ndarray:
        return NaturalSpline(self.exposure_basis)(x)

    def lag_values(self, lags=None) -> np.ndarray:
        """Lag basis at ``lags`` (default ``0..L``), shape ``(len(lags), v_lag)``."""
        lags = np.arange(self.max_lag + 1, dtype=float) if lags is None else np.asarray(lags, float)
        if self.lag_basis is None:
            return np.ones((lags.size, 1))
        return NaturalSpline(self.lag_basis)(lags)

    def to_dict(self) -> dict:
        def sp(s):
            if s is None:
                return None
            return {
                "interior_knots": list(s.interior_knots),
                "boundary_knots": list(s.boundary_knots),
                "include_intercept": s.include_intercept,
            }

        return {"max_lag": self.max_lag, "exposure_basis": sp(self.exposure_basis), "lag_basis": sp(self.lag_basis)}

    @classmethod
    def from_dict(cls, d: dict) -> "CrossBasisSpec":
        lag = d.get("lag_basis")
        return cls(
            max_lag=d["max_lag"],
            exposure_basis=SplineSpec(**d["exposure_basis"]),
            lag_basis=None if lag is None else SplineSpec(**lag),
        )


def default_crossbasis_spec(
    exposure,
    max_lag: int = 8,
    n_exposure_knots: int = 2,
    n_lag_knots: int = 1,
    placement: str = "equal",
) -> CrossBasisSpec:
    """Knots for pooled exposure values.

    Exposure boundary knots sit at the observed min/max; interior knots are
    equally spaced on the value scale (``placement="equal"``) or at equally
    spaced percentiles (``placement="percentile"``). The lag basis carries an
    intercept with interior knots equally spaced on ``(0, max_lag)``.
    """
    x = np.asarray(exposure, dtype=float).ravel()
    lo, hi = float(x.min()), float(x.max())
    probs = np.arange(1, n_exposure_knots + 1) / (n_exposure_knots + 1)
    if placement == "equal":
        inner = lo + probs * (hi - lo)
    elif placement == "percentile":
        inner = np.percentile(x, 100 * probs)
    else:
        raise ValueError(f"unknown knot placement {placement!r}")
    exp_spec = SplineSpec(tuple(inner), (lo, hi), include_intercept=False)
    if max_lag == 0:
        lag_spec = None
    else:
        lag_inner = max_lag * np.arange(1, n_lag_knots + 1) / (n_lag_knots + 1)
        lag_spec = SplineSpec(tuple(lag_inner), (0.0, float(max_lag)), include_intercept=True)
    return CrossBasisSpec(max_lag, exp_spec, lag_spec)


def build_lag_matrix(series, max_lag: int) -> np.ndarray:
    """Rows ``(x_t, x_{t-1}, ..., x_{t-L})`` for ``t = L+1..T``; no wraparound."""
    x = np.asarray(series, dtype=float)
    T = x.shape[-1]
    if T <= max_lag:
        raise ValueError(f"series length {T} must exceed max lag {max_lag}")
    cols = [x[..., max_lag - l : T - l] for l in range(max_lag + 1)]
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class CrossBasis:
    """Cached cross-basis rows ``b_it``; ``values[i, t - L - 1]`` is the row for time ``t`` (1-based)."""

    values: np.ndarray
    spec: CrossBasisSpec = field(repr=False)

    @property
    def valid_time_range(self) -> tuple:
        return (self.spec.max_lag + 1, self.spec.max_lag + self.values.shape[1])

    @property
    def rows(self) -> np.ndarray:
        return self.values.reshape(-1, self.values.shape[-1])

    @property
    def n_coef(self) -> int:
        return self.values.shape[-1]


def build_crossbasis(exposure, spec: CrossBasisSpec) -> CrossBasis:
    """Cross-basis for an ``(n, T)`` exposure panel (or any object with ``.X``).

    ``b_it[j * v_lag + k] = sum_l Bx_j(x_{i,t-l}) * Bl_k(l)``.
    """
    X = np.asarray(getattr(exposure, "X", exposure), dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if not np.all(np.isfinite(X)):
        raise ValueError("exposure contains non-finite values")
    lagged = build_lag_matrix(X, spec.max_lag)  # (n, T-L, L+1)
    ex = spec.exposure_values(lagged.ravel()).reshape(*lagged.shape, spec.v_x)
    lb = spec.lag_values()
    values = np.einsum("itlj,lk->itjk", ex, lb).reshape(*lagged.shape[:2], spec.n_coef)
    values.setflags(write=False)
    return CrossBasis(values, spec)
