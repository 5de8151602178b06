"""Synthetic panels drawn from the generative model, and recovery scoring."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

from .graph import AdjacencyGraph, grid_graph, load_adjacency, path_graph
from .model import PanelDataset, ParameterState, Variant
from .splines import default_crossbasis_spec


def default_true_eta(C: int, strength: float = 1.0) -> np.ndarray:
    """Separable surfaces on the 3 x 3 default cross-basis.

    Coefficients of the cardinal bases are function values at the knots, so
    each row is ``outer(exposure profile at the exposure knots, lag profile at
    lags 0, L/2, L)``. Cluster 0 is null; the others get distinct lag shapes.
    """
    exposure = np.array([0.35, 0.7, 1.0])
    lags = [
        np.zeros(3),
        np.array([0.05, 0.30, 0.05]),
        np.array([0.25, 0.10, 0.0]),
        np.array([0.0, 0.10, 0.25]),
        np.array([-0.15, -0.15, -0.15]),
        np.array([0.15, 0.15, 0.15]),
        np.array([0.30, -0.10, 0.0]),
    ]
    if C > len(lags):
        raise ValueError(f"default surfaces exist for up to {len(lags)} clusters")
    return np.array([strength * np.outer(exposure, lags[c]).ravel() for c in range(C)])


@dataclass
class SimulationScenario:
    n_rows: int = 10
    n_cols: int = 10
    T: int = 80
    L: int = 8
    graph_kind: str = "grid"
    edges: Optional[list] = None
    n_areas: Optional[int] = None
    true_C: int = 2
    true_eta: Optional[np.ndarray] = None
    eta_strength: float = 2.5
    true_partition: str = "contiguous-blocks"
    alpha: float = -6.0
    sigma_u: float = 0.3
    sigma_v: float = 0.2
    sigma_gamma: float = 0.02
    r_true: float = 5.0
    exposure_process: str = "ar1"
    offsets: str = "constant"
    offset_value: float = 10000.0
    field_sd: float = 1.5
    n_exposure_knots: int = 2
    n_lag_knots: int = 1

    def __post_init__(self):
        if self.r_true <= 0:
            raise ValueError("r_true must be positive")
        if self.T <= self.L:
            raise ValueError("T must exceed L")
        if self.true_eta is not None:
            self.true_eta = np.atleast_2d(np.asarray(self.true_eta, dtype=float))
            if self.true_eta.shape[0] != self.true_C:
                raise ValueError("true_eta needs one row per cluster")

    def build_graph(self) -> AdjacencyGraph:
        if self.graph_kind == "grid":
            return grid_graph(self.n_rows, self.n_cols)
        if self.graph_kind == "path":
            return path_graph(self.n_areas or self.n_rows * self.n_cols)
        if self.graph_kind in ("edges", "loaded"):
            return load_adjacency(self.edges, self.n_areas)
        raise ValueError(f"unknown graph kind {self.graph_kind!r}")


def simulate_car(graph: AdjacencyGraph, sigma: float, rng: np.random.Generator, sweeps: int = 300) -> np.ndarray:
    """Intrinsic CAR draw by Gibbs sweeps over the conditionals, recentred per component."""
    u = np.zeros(graph.n)
    if sigma == 0:
        return u
    for _ in range(sweeps):
        for cls in graph.colors:
            cls = cls[~graph.isolated[cls]]
            mean = graph.neighbor_sums(u, cls) / graph.n_neighbors[cls]
            u[cls] = mean + sigma / np.sqrt(graph.n_neighbors[cls]) * rng.standard_normal(cls.size)
    for comp in graph.components:
        u[comp] -= u[comp].mean()
    return u


def simulate_rw2(T: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """RW2 path with level and slope (the prior's null space) removed."""
    g = np.zeros(T)
    if sigma == 0:
        return g
    eps = sigma * rng.standard_normal(T)
    for t in range(2, T):
        g[t] = 2 * g[t - 1] - g[t - 2] + eps[t]
    t = np.arange(T, dtype=float)
    coef = np.polyfit(t, g, 1)
    return g - np.polyval(coef, t)


def contiguous_blocks(graph: AdjacencyGraph, C: int) -> np.ndarray:
    """Connected partition by simultaneous BFS from farthest-point seeds."""
    n = graph.n

    def bfs(sources):
        dist = np.full(n, np.inf)
        lab = np.full(n, -1)
        queue = deque()
        for k, s in enumerate(sources):
            dist[s] = 0
            lab[s] = k
            queue.append(s)
        while queue:
            i = queue.popleft()
            for j in graph.neighbors[i]:
                if lab[j] < 0:
                    lab[j] = lab[i]
                    dist[j] = dist[i] + 1
                    queue.append(j)
        return dist, lab

    seeds = [0]
    while len(seeds) < C:
        dist, _ = bfs(seeds)
        dist[np.isinf(dist)] = -1
        seeds.append(int(np.argmax(dist)))
    _, lab = bfs(seeds)
    # areas unreachable from any seed (other components) go to cluster 0
    lab[lab < 0] = 0
    return lab


def _exposure(sc: SimulationScenario, n: int, rng: np.random.Generator) -> np.ndarray:
    T = sc.T
    if sc.exposure_process in ("iid-lognormal", "lognormal"):
        return np.exp(np.log(0.6) + 0.5 * rng.standard_normal((n, T)))
    if sc.exposure_process not in ("ar1", "AR(1)-positive"):
        raise ValueError(f"unknown exposure process {sc.exposure_process!r}")
    common = np.zeros(T)
    local = np.zeros((n, T))
    e_c = rng.standard_normal(T)
    e_l = rng.standard_normal((n, T))
    common[0] = 0.3 * e_c[0]
    local[:, 0] = 0.4 * e_l[:, 0]
    for t in range(1, T):
        common[t] = 0.8 * common[t - 1] + 0.3 * np.sqrt(1 - 0.64) * e_c[t]
        local[:, t] = 0.7 * local[:, t - 1] + 0.4 * np.sqrt(1 - 0.49) * e_l[:, t]
    # symmetric margins keep equally spaced knots inside the bulk of the data
    return np.maximum(1.0 + 0.6 * (common[None, :] + local), 0.01)


def simulate_panel(scenario: SimulationScenario, seed: int):
    """Forward-simulate a panel; returns ``(PanelDataset, ParameterState truth)``."""
    sc = scenario
    rng = np.random.default_rng(seed)
    graph = sc.build_graph()
    n, T, L, C = graph.n, sc.T, sc.L, sc.true_C
    X = _exposure(sc, n, rng)
    if sc.offsets == "constant":
        N = np.full(n, float(sc.offset_value))
    else:
        N = np.round(sc.offset_value * np.exp(0.5 * rng.standard_normal(n)))
    u = simulate_car(graph, sc.sigma_u, rng)
    v = sc.sigma_v * rng.standard_normal(n)
    v -= v.mean() if sc.sigma_v > 0 else 0.0
    gamma = simulate_rw2(T, sc.sigma_gamma, rng)

    cb_spec = default_crossbasis_spec(X, L, sc.n_exposure_knots, sc.n_lag_knots)
    eta = sc.true_eta if sc.true_eta is not None else default_true_eta(C, sc.eta_strength)
    if eta.shape[1] != cb_spec.n_coef:
        raise ValueError("true_eta width does not match the cross-basis")

    k = max(C - 1, 0)
    au = np.zeros((k, n))
    av = np.zeros((k, n))
    if C == 1:
        z = np.zeros(n, dtype=int)
        q = np.ones((n, 1))
    elif sc.true_partition == "contiguous-blocks":
        z = contiguous_blocks(graph, C)
        q = np.eye(C)[z]
    elif sc.true_partition == "random":
        z = rng.integers(C, size=n)
        q = np.full((n, C), 1.0 / C)
    elif sc.true_partition == "softmax-field":
        for c in range(k):
            au[c] = simulate_car(graph, sc.field_sd, rng)
            av[c] = 0.3 * sc.field_sd * rng.standard_normal(n)
        logits = np.vstack([au + av, np.zeros((1, n))])
        q = np.exp(logits - logits.max(axis=0))
        q = (q / q.sum(axis=0)).T
        z = (np.cumsum(q, axis=1) < rng.random(n)[:, None]).sum(axis=1)
    else:
        raise ValueError(f"unknown partition {sc.true_partition!r}")

    from .splines import build_crossbasis

    cb = build_crossbasis(X, cb_spec)
    s = np.einsum("itp,ip->it", cb.values, eta[z])
    log_lam = np.log(N)[:, None] + sc.alpha + (u + v)[:, None] + gamma[None, L:] + s
    lam = np.exp(log_lam)
    Y = np.zeros((n, T), dtype=np.int64)
    Y[:, L:] = rng.negative_binomial(sc.r_true, sc.r_true / (sc.r_true + lam))
    # the first L weeks never enter the likelihood; fill them from the
    # same process without an exposure effect so the file looks complete
    lam0 = np.exp(np.log(N)[:, None] + sc.alpha + (u + v)[:, None] + gamma[None, :L])
    Y[:, :L] = rng.negative_binomial(sc.r_true, sc.r_true / (sc.r_true + lam0))

    truth = ParameterState(
        alpha=sc.alpha, log_r=float(np.log(sc.r_true)), eta=np.array(eta, dtype=float),
        u=u, v=v, gamma=gamma, sigma_u=sc.sigma_u, sigma_v=sc.sigma_v, sigma_gamma=sc.sigma_gamma,
        z=z.astype(int), q=q, assignment_u=au, assignment_v=av,
        sigma_uc=np.full(k, sc.field_sd), sigma_vc=np.full(k, 0.3 * sc.field_sd),
    )
    dataset = PanelDataset(Y, X, N, graph, [f"A{i + 1:03d}" for i in range(n)])
    return dataset, truth


def adjusted_rand_index(a, b) -> float:
    return float(adjusted_rand_score(np.asarray(a), np.asarray(b)))


def match_clusters(est_eta: np.ndarray, true_eta: np.ndarray) -> np.ndarray:
    """``perm[c_true]`` = estimated cluster matched to true cluster ``c_true``."""
    cost = np.linalg.norm(true_eta[:, None, :] - est_eta[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.full(true_eta.shape[0], -1)
    perm[rows] = cols
    return perm


def match_partitions(true_z, est_z, C_true: int, C_est: int) -> np.ndarray:
    """``perm[c_true]`` = estimated cluster sharing the most areas with true cluster ``c_true``."""
    overlap = np.zeros((C_true, C_est))
    np.add.at(overlap, (np.asarray(true_z), np.asarray(est_z)), 1.0)
    rows, cols = linear_sum_assignment(-overlap)
    perm = np.full(C_true, -1)
    perm[rows] = cols
    return perm


def score_recovery(truth: ParameterState, summary, draws=None) -> dict:
    """ARI of the MAP partition, matched eta RMSE, and 95% interval coverage of eta.

    Clusters are matched by partition overlap; when the fit has fewer
    clusters than the truth, each true surface goes to its nearest estimate.
    """
    est_map = np.asarray(getattr(summary, "map_assignment", summary))
    report = {"ari": adjusted_rand_index(truth.z, est_map)}
    if draws is None:
        return report
    eta = np.asarray(draws["eta"])
    mean = eta.mean(axis=0)
    Ct = truth.eta.shape[0]
    if mean.shape[0] >= Ct:
        perm = match_partitions(truth.z, est_map, Ct, mean.shape[0])
    else:
        perm = np.array([int(np.argmin(np.linalg.norm(mean - t, axis=1))) for t in truth.eta])
    matched = mean[perm]
    lo = np.quantile(eta, 0.025, axis=0)[perm]
    hi = np.quantile(eta, 0.975, axis=0)[perm]
    report["eta_rmse"] = [float(np.sqrt(np.mean((matched[c] - truth.eta[c]) ** 2))) for c in range(Ct)]
    inside = (lo <= truth.eta) & (truth.eta <= hi)
    report["eta_coverage"] = float(inside.mean())
    report["cluster_match"] = perm.tolist()
    for name in ("alpha",):
        d = np.asarray(draws[name])
        lo_, hi_ = np.quantile(d, [0.025, 0.975])
        report[f"{name}_covered"] = bool(lo_ <= getattr(truth, name) <= hi_)
    return report
