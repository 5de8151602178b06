"""Text formats: panel CSV, edge lists, run configuration, draws and result tables.

Every writer formats floats with ``repr`` (shortest round-tripping form) and
uses ``\\n`` line endings, so identical inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import AdjacencyGraph, load_adjacency
from .model import ModelSpec, PanelDataset, PriorSpec, Variant
from .sampler import PosteriorDraws, SamplerConfig
from .splines import CrossBasisSpec

PANEL_HEADER = ["area", "time", "y", "x", "offset"]


class DataError(ValueError):
    """Malformed input file."""


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


# -------------------------------------------------------------------- panel


def load_panel(path, graph: Optional[AdjacencyGraph] = None) -> PanelDataset:
    """Read a long-format ``area,time,y,x,offset`` file into a rectangular panel.

    Area ids are kept as strings and numbered by first appearance. Without a
    ``graph`` every area is isolated.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != PANEL_HEADER:
            raise DataError(f"{path}: header must be {','.join(PANEL_HEADER)}, got {','.join(header)}")
        ids, index, cells = [], {}, {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            area = row[0].strip()
            try:
                t = int(row[1])
                y = float(row[2])
                x = float(row[3])
                off = float(row[4])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            if t < 1:
                raise DataError(f"{path}:{lineno}: time must be a positive integer")
            if not (y >= 0) or y != round(y):
                raise DataError(f"{path}:{lineno}: y must be a non-negative integer, got {row[2].strip()}")
            if not (off > 0) or not math.isfinite(off):
                raise DataError(f"{path}:{lineno}: offset must be positive, got {row[4].strip()}")
            if not math.isfinite(x):
                raise DataError(f"{path}:{lineno}: x must be finite")
            if area not in index:
                index[area] = len(ids)
                ids.append(area)
            key = (index[area], t)
            if key in cells:
                raise DataError(f"{path}:{lineno}: duplicate row for area {area}, time {t}")
            cells[key] = (int(y), x, off)
    if not cells:
        raise DataError(f"{path}: no data rows")
    n, T = len(ids), max(t for _, t in cells)
    missing = [(ids[i], t) for i in range(n) for t in range(1, T + 1) if (i, t) not in cells]
    if missing:
        shown = ", ".join(f"({a}, {t})" for a, t in missing[:10])
        raise DataError(f"{path}: {len(missing)} missing (area, time) cells, first: {shown}")
    Y = np.zeros((n, T), dtype=np.int64)
    X = np.zeros((n, T))
    O = np.zeros((n, T))
    for (i, t), (y, x, off) in cells.items():
        Y[i, t - 1], X[i, t - 1], O[i, t - 1] = y, x, off
    varying = np.flatnonzero(np.any(O != O[:, :1], axis=1))
    if varying.size:
        raise DataError(f"{path}: offset varies over time for area {ids[varying[0]]}")
    if graph is None:
        graph = AdjacencyGraph(n, [[] for _ in range(n)])
    elif graph.n != n:
        raise DataError(f"adjacency has {graph.n} areas but the panel has {n}")
    return PanelDataset(Y, X, O[:, 0], graph, ids)


def write_panel(dataset: PanelDataset, path):
    rows = ((a, t + 1, int(dataset.Y[i, t]), dataset.X[i, t], dataset.offsets[i])
            for i, a in enumerate(dataset.area_ids) for t in range(dataset.T))
    _write_rows(path, PANEL_HEADER, rows)


def load_edge_list(path, n: int) -> AdjacencyGraph:
    """Whitespace- or comma-separated 1-based ``i j`` pairs; ``#`` starts a comment."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].replace(",", " ").strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two area indices")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: area indices must be integers") from None
    try:
        return load_adjacency(pairs, n)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


def write_edge_list(graph: AdjacencyGraph, path):
    with open(path, "w") as fh:
        fh.write("# i j (1-based area indices)\n")
        for i, j in graph.edges():
            fh.write(f"{i + 1} {j + 1}\n")


# ------------------------------------------------------------------- config

_PRIOR_KEYS = {f.name for f in fields(PriorSpec)}


@dataclass
class RunConfig:
    """Flat ``key = value`` run configuration; relative paths resolve against the file."""

    panel: Optional[str] = None
    adjacency: Optional[str] = None
    output_dir: str = "out"
    variant: str = "mixture_spatial"
    C: Optional[int] = None
    max_lag: int = 8
    n_exposure_knots: int = 2
    n_lag_knots: int = 1
    knot_placement: str = "equal"
    n_iterations: int = 80000
    burn_in: int = 40000
    thinning: int = 10
    adaptation_window: int = 50
    assignment_warmup: int = 200
    waic_mode: str = "conditional"
    seed: int = 0
    checkpoint_every: int = 0
    reference_percentile: float = 5.0
    upper_percentile: float = 99.0
    grid_points: int = 50
    compare_C: tuple = (2, 3)
    compare_variant: str = "mixture_spatial"
    priors: dict = field(default_factory=dict)
    # simulate subcommand
    sim_rows: int = 10
    sim_cols: int = 10
    sim_T: int = 80
    sim_true_C: int = 2
    sim_partition: str = "contiguous-blocks"
    sim_eta_strength: float = 2.5
    sim_r: float = 5.0
    sim_exposure: str = "ar1"

    def __post_init__(self):
        self.variant = Variant.parse(self.variant).value
        if self.C is None:
            self.C = 1 if self.variant == Variant.STANDARD.value else 2
        if self.variant == Variant.STANDARD.value:
            if self.C != 1:
                raise DataError("the standard variant has C = 1")
        elif self.C < 2:
            raise DataError("mixture variants need C >= 2")
        bad = set(self.priors) - _PRIOR_KEYS
        if bad:
            raise DataError(f"unknown prior keys: {', '.join(sorted(bad))}")

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(**self.priors)

    def sampler_config(self, seed: Optional[int] = None) -> SamplerConfig:
        return SamplerConfig(
            n_iterations=self.n_iterations, burn_in=self.burn_in, thinning=self.thinning,
            seed=self.seed if seed is None else seed, adaptation_window=self.adaptation_window,
            assignment_warmup=self.assignment_warmup, waic_mode=self.waic_mode,
        )

    def check_files(self):
        for key in ("panel", "adjacency"):
            p = getattr(self, key)
            if p is None:
                raise DataError(f"config key '{key}' is required")
            if not Path(p).is_file():
                raise DataError(f"{key} file not found: {p}")


def _convert(name, raw: str):
    f = {f.name: f for f in fields(RunConfig)}[name]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if name == "compare_C":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if kind in ("int", "Optional[int]"):
        return int(raw)
    if kind == "float":
        return float(raw)
    if raw.lower() in ("none", ""):
        return None
    return raw


def parse_config(text: str, base_dir=None) -> RunConfig:
    """Parse ``key = value`` lines. Prior overrides use a ``prior.`` prefix."""
    names = {f.name for f in fields(RunConfig)} - {"priors"}
    kw, priors = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("prior."):
            priors[key[6:]] = float(value)
            continue
        if key not in names:
            raise DataError(f"config line {lineno}: unknown key '{key}'")
        try:
            kw[key] = _convert(key, value)
        except ValueError:
            raise DataError(f"config line {lineno}: bad value for '{key}': {value}") from None
    if base_dir is not None:
        for key in ("panel", "adjacency", "output_dir"):
            if kw.get(key) and not os.path.isabs(kw[key]):
                kw[key] = str(Path(base_dir) / kw[key])
    return RunConfig(priors=priors, **kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)


# -------------------------------------------------------------------- draws

_SCALARS = ("alpha", "r", "log_r", "sigma_u", "sigma_v", "sigma_gamma")


def write_draws(draws: PosteriorDraws, area_ids, out_dir, crossbasis_spec: CrossBasisSpec):
    """One CSV per parameter group plus the log-likelihood matrix and run metadata."""
    out = Path(out_dir)
    d = out / "draws"
    d.mkdir(parents=True, exist_ok=True)
    a = draws.arrays
    S = draws.n_draws
    C, p = a["eta"].shape[1:]
    n, T = a["u"].shape[1], a["gamma"].shape[1]
    _write_rows(d / "scalars.csv", ("draw",) + _SCALARS,
                ([s + 1] + [a[k][s] for k in _SCALARS] for s in range(S)))
    _write_rows(d / "eta.csv", ["draw", "cluster"] + [f"eta_{j + 1}" for j in range(p)],
                ([s + 1, c + 1, *a["eta"][s, c]] for s in range(S) for c in range(C)))
    for key, label, width in (("u", "area", n), ("v", "area", n), ("gamma", "time", T)):
        _write_rows(d / f"{key}.csv", ["draw"] + [f"{label}_{j + 1}" for j in range(width)],
                    ([s + 1, *a[key][s]] for s in range(S)))
    if draws.spec.is_mixture:
        _write_rows(d / "z.csv", ["draw"] + [f"area_{j + 1}" for j in range(n)],
                    ([s + 1, *(a["z"][s] + 1)] for s in range(S)))
    if draws.spec.variant is Variant.MIXTURE_FLAT:
        _write_rows(d / "q.csv", ["draw", "area"] + [f"q_{c + 1}" for c in range(C)],
                    ([s + 1, i + 1, *a["q"][s, i]] for s in range(S) for i in range(n)))
    if draws.spec.variant is Variant.MIXTURE_SPATIAL:
        for key in ("assignment_u", "assignment_v"):
            _write_rows(d / f"{key}.csv", ["draw", "cluster"] + [f"area_{j + 1}" for j in range(n)],
                        ([s + 1, c + 1, *a[key][s, c]] for s in range(S) for c in range(C)))
        k = C - 1
        _write_rows(d / "sigma_c.csv", ["draw"] + [f"sigma_uc_{c + 1}" for c in range(k)]
                    + [f"sigma_vc_{c + 1}" for c in range(k)],
                    ([s + 1, *a["sigma_uc"][s], *a["sigma_vc"][s]] for s in range(S)))
    write_loglik(draws.loglik, n, out / "loglik.csv")
    if draws.loglik_marginal is not None:
        write_loglik(draws.loglik_marginal, n, out / "loglik_marginal.csv")
    _write_rows(out / "area_index.csv", ["index", "area"], ((i + 1, aid) for i, aid in enumerate(area_ids)))
    _write_json(out / "acceptance.json", {k: v for k, v in draws.acceptance_rates.items()})
    _write_json(out / "model.json", {
        "variant": draws.spec.variant.value, "C": draws.spec.C,
        "priors": asdict(draws.spec.priors), "crossbasis": crossbasis_spec.to_dict(),
        "sampler": asdict(draws.config), "n_areas": n, "T": T,
        "permutations_first_draw": None if draws.permutations is None else draws.permutations[0].tolist(),
        "warnings": list(draws.warnings),
    })


def write_loglik(ll: np.ndarray, n: int, path):
    """Draws by observations; column ``a{i}_w{k}`` is area ``i`` at likelihood week ``k`` (time ``L + k``)."""
    ll = np.asarray(ll)
    S, N = ll.shape
    Tw = N // n
    with open(path, "w") as fh:
        fh.write(",".join(f"a{i + 1}_w{t + 1}" for i in range(n) for t in range(Tw)) + "\n")
        for row in ll:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_loglik(path) -> np.ndarray:
    with open(path) as fh:
        next(fh)
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def _read_table(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, np.array(rows).reshape(len(rows), len(header))


def read_draws(out_dir) -> tuple:
    """Load ``(PosteriorDraws, CrossBasisSpec)`` written by :func:`write_draws`."""
    out = Path(out_dir)
    d = out / "draws"
    if not (out / "model.json").is_file():
        raise DataError(f"no fitted model in {out}")
    meta = json.loads((out / "model.json").read_text())
    cb = CrossBasisSpec.from_dict(meta["crossbasis"])
    spec = ModelSpec(meta["variant"], meta["C"], cb, PriorSpec(**meta["priors"]))
    config = SamplerConfig(**meta["sampler"])
    C, n, T = meta["C"], meta["n_areas"], meta["T"]
    h, sc = _read_table(d / "scalars.csv")
    S = sc.shape[0]
    a = {k: sc[:, h.index(k)] for k in _SCALARS}
    _, e = _read_table(d / "eta.csv")
    a["eta"] = e[:, 2:].reshape(S, C, -1)
    for key in ("u", "v", "gamma"):
        a[key] = _read_table(d / f"{key}.csv")[1][:, 1:]
    if spec.is_mixture:
        a["z"] = _read_table(d / "z.csv")[1][:, 1:].astype(int) - 1
    else:
        a["z"] = np.zeros((S, n), dtype=int)
    if spec.variant is Variant.MIXTURE_FLAT:
        a["q"] = _read_table(d / "q.csv")[1][:, 2:].reshape(S, n, C)
    else:
        a["q"] = np.full((S, n, C), 1.0 / C)
    k = C - 1 if spec.variant is Variant.MIXTURE_SPATIAL else 0
    if k:
        for key in ("assignment_u", "assignment_v"):
            a[key] = _read_table(d / f"{key}.csv")[1][:, 2:].reshape(S, C, n)
        sig = _read_table(d / "sigma_c.csv")[1][:, 1:]
        a["sigma_uc"], a["sigma_vc"] = sig[:, :k], sig[:, k:]
    else:
        a["assignment_u"] = a["assignment_v"] = np.zeros((S, C, n))
        a["sigma_uc"] = a["sigma_vc"] = np.zeros((S, 0))
    loglik = read_loglik(out / "loglik.csv")
    marg = read_loglik(out / "loglik_marginal.csv") if (out / "loglik_marginal.csv").is_file() else None
    acc = json.loads((out / "acceptance.json").read_text()) if (out / "acceptance.json").is_file() else {}
    return PosteriorDraws(a, loglik, acc, config, spec, loglik_marginal=marg), cb


def read_area_index(out_dir) -> list:
    with open(Path(out_dir) / "area_index.csv", newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [row[1] for row in r]


# ------------------------------------------------------------ result tables


def write_rr_surface(surfaces, path, plugin_path=None):
    rows, prow = [], []
    for s in surfaces:
        for gi, x in enumerate(s.exposure_grid):
            for li, lag in enumerate(s.lag_grid):
                rows.append((x, int(lag), s.rr[gi, li], s.rr_low[gi, li], s.rr_high[gi, li], str(s.cluster)))
                prow.append((x, int(lag), s.plugin_rr[gi, li], s.plugin_low[gi, li], s.plugin_high[gi, li],
                             str(s.cluster)))
    header = ["exposure", "lag", "rr", "lo", "hi", "cluster"]
    _write_rows(path, header, rows)
    if plugin_path is not None:
        _write_rows(plugin_path, header, prow)


def write_cum_rr(curves, path):
    rows = [(x, c.rr[g], c.rr_low[g], c.rr_high[g], str(c.cluster))
            for c in curves for g, x in enumerate(c.exposure_grid)]
    _write_rows(path, ["exposure", "rr", "lo", "hi", "cluster"], rows)


def write_waic(w, path, extra=None):
    obj = {"waic": w.waic, "lppd": w.lppd, "p_waic2": w.p_waic2, "se": w.se, "n_obs": int(w.pointwise.size)}
    obj.update(extra or {})
    _write_json(path, obj)


def write_cluster_summary(summary, area_ids, path):
    C = summary.membership_probs.shape[1]
    rows = ((aid, *summary.membership_probs[i], int(summary.map_assignment[i]) + 1, summary.entropy[i])
            for i, aid in enumerate(area_ids))
    _write_rows(path, ["area"] + [f"prob_{c + 1}" for c in range(C)] + ["map", "entropy"], rows)


def write_effects(eff, area_ids, spatial_path, temporal_path):
    _write_rows(spatial_path, ["area", "mean", "lo", "hi", "u_mean", "v_mean"],
                ((aid, eff.spatial_mean[i], eff.spatial_low[i], eff.spatial_high[i], eff.u_mean[i], eff.v_mean[i])
                 for i, aid in enumerate(area_ids)))
    _write_rows(temporal_path, ["time", "mean", "lo", "hi"],
                ((t + 1, eff.temporal_mean[t], eff.temporal_low[t], eff.temporal_high[t])
                 for t in range(eff.temporal_mean.size)))


def write_table(path, header, rows):
    _write_rows(path, header, rows)


def write_json(path, obj):
    _write_json(path, obj)
