"""``dlnmclust`` command line: simulate, fit, predict, diagnose, compare.

All subcommands take ``--config FILE``; ``--seed`` overrides the config seed.
Failures exit non-zero with one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from .model import ModelData, ModelSpec, PanelDataset, Variant
from .outputs import (
    cluster_summary,
    cumulative_rr,
    default_exposure_grid,
    effect_summaries,
    effective_sample_size,
    rr_surface,
    waic,
    waic_difference,
)
from .sampler import Chain
from .simulate import SimulationScenario, simulate_panel
from .splines import build_crossbasis, default_crossbasis_spec

log = logging.getLogger("dlnmclust")

CHECKPOINT = "checkpoint.npz"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------- commands


def cmd_simulate(cfg: dio.RunConfig, args):
    seed = cfg.seed if args.seed is None else args.seed
    sc = SimulationScenario(
        n_rows=cfg.sim_rows, n_cols=cfg.sim_cols, T=cfg.sim_T, L=cfg.max_lag, true_C=cfg.sim_true_C,
        true_partition=cfg.sim_partition, eta_strength=cfg.sim_eta_strength, r_true=cfg.sim_r,
        exposure_process=cfg.sim_exposure, n_exposure_knots=cfg.n_exposure_knots, n_lag_knots=cfg.n_lag_knots,
    )
    ds, truth = simulate_panel(sc, seed)
    # --out puts everything in one directory; otherwise the config's data paths are written
    out = Path(args.out or cfg.output_dir)
    panel = out / "panel.csv" if args.out or not cfg.panel else Path(cfg.panel)
    adj = out / "adjacency.txt" if args.out or not cfg.adjacency else Path(cfg.adjacency)
    for d in (out, panel.parent, adj.parent):
        d.mkdir(parents=True, exist_ok=True)
    dio.write_panel(ds, panel)
    dio.write_edge_list(ds.graph, adj)
    dio.write_json(out / "truth.json", {
        "seed": seed, "alpha": truth.alpha, "r": truth.r, "sigma_u": truth.sigma_u, "sigma_v": truth.sigma_v,
        "sigma_gamma": truth.sigma_gamma, "eta": truth.eta.tolist(), "z": (truth.z + 1).tolist(),
        "u": truth.u.tolist(), "v": truth.v.tolist(), "gamma": truth.gamma.tolist(),
    })
    return {"panel": str(panel), "adjacency": str(adj), "n": ds.n, "T": ds.T}


def _load_data(cfg: dio.RunConfig):
    cfg.check_files()
    ds = dio.load_panel(cfg.panel)
    graph = dio.load_edge_list(cfg.adjacency, ds.n)
    return PanelDataset(ds.Y, ds.X, ds.offsets, graph, ds.area_ids)


def fit_one(cfg: dio.RunConfig, ds, out_dir, variant, C, seed, resume=False, stop_after=None):
    """Fit one model into ``out_dir``; returns the draws, or ``None`` when stopped early."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cb_spec = default_crossbasis_spec(ds.X, cfg.max_lag, cfg.n_exposure_knots, cfg.n_lag_knots,
                                      placement=cfg.knot_placement)
    spec = ModelSpec(variant, C, cb_spec, cfg.prior_spec())
    data = ModelData(ds, build_crossbasis(ds, cb_spec))
    ckpt = out / CHECKPOINT
    if resume:
        if not ckpt.is_file():
            raise dio.DataError(f"no checkpoint to resume from in {out}")
        chain = Chain.from_checkpoint(ckpt, data, spec)
        log.info("resumed at sweep %d", chain.sweep)
    else:
        chain = Chain(data, spec, cfg.sampler_config(seed))
    every = cfg.checkpoint_every
    chain.run(until=stop_after, checkpoint_path=ckpt if every else None, checkpoint_every=every)
    if not chain.finished:
        chain.save_checkpoint(ckpt)
        return None
    draws = chain.draws()
    dio.write_draws(draws, ds.area_ids, out, cb_spec)
    return draws


def cmd_fit(cfg, args):
    ds = _load_data(cfg)
    seed = cfg.seed if args.seed is None else args.seed
    draws = fit_one(cfg, ds, cfg.output_dir, cfg.variant, cfg.C, seed, args.resume, args.stop_after)
    if draws is None:
        return {"status": "checkpointed", "checkpoint": str(Path(cfg.output_dir) / CHECKPOINT)}
    return {"status": "done", "draws": draws.n_draws, "output_dir": cfg.output_dir}


def _clusters(spec):
    return range(spec.C)


def cmd_predict(cfg, args):
    draws, cb = dio.read_draws(cfg.output_dir)
    ds = _load_data(cfg)
    grid, ref = default_exposure_grid(ds.X, cfg.grid_points, cfg.upper_percentile, cfg.reference_percentile)
    # the reference itself is part of the grid so its RR = 1 row is explicit
    grid = np.unique(np.append(grid, ref))
    out = Path(cfg.output_dir)
    surfaces = [rr_surface(draws, cb, c, ref, grid) for c in _clusters(draws.spec)]
    curves = [cumulative_rr(draws, cb, c, ref, grid) for c in _clusters(draws.spec)]
    for s in surfaces + curves:
        s.cluster = s.cluster + 1
    dio.write_rr_surface(surfaces, out / "rr_surface.csv", out / "rr_surface_plugin.csv")
    dio.write_cum_rr(curves, out / "cum_rr.csv")
    return {"reference": ref, "grid_points": int(grid.size)}


def _ess_rows(draws):
    a = draws.arrays
    rows = [(k, effective_sample_size(a[k])) for k in ("alpha", "r", "sigma_u", "sigma_v", "sigma_gamma")]
    C, p = a["eta"].shape[1:]
    rows += [(f"eta_{c + 1}_{j + 1}", effective_sample_size(a["eta"][:, c, j])) for c in range(C) for j in range(p)]
    for key in ("sigma_uc", "sigma_vc"):
        rows += [(f"{key}_{c + 1}", effective_sample_size(a[key][:, c])) for c in range(a[key].shape[1])]
    return rows


def diagnose_dir(out_dir):
    draws, _ = dio.read_draws(out_dir)
    ids = dio.read_area_index(out_dir)
    out = Path(out_dir)
    w = waic(draws.loglik)
    extra = {"mode": "conditional"}
    if draws.loglik_marginal is not None:
        wm = waic(draws.loglik_marginal)
        extra["marginal"] = {"waic": wm.waic, "lppd": wm.lppd, "p_waic2": wm.p_waic2, "se": wm.se}
    dio.write_waic(w, out / "waic.json", extra)
    summary = None
    if draws.spec.is_mixture:
        summary = cluster_summary(draws, draws.spec.C)
        dio.write_cluster_summary(summary, ids, out / "cluster_summary.csv")
    dio.write_effects(effect_summaries(draws), ids, out / "effects_spatial.csv", out / "effects_temporal.csv")
    dio.write_table(out / "ess.csv", ["parameter", "ess"], _ess_rows(draws))
    return draws, w, summary


def cmd_diagnose(cfg, args):
    _, w, summary = diagnose_dir(cfg.output_dir)
    res = {"waic": w.waic, "p_waic2": w.p_waic2}
    if summary is not None:
        res["median_entropy"] = float(np.median(summary.entropy))
    return res


def cmd_compare(cfg, args):
    ds = _load_data(cfg)
    seed = cfg.seed if args.seed is None else args.seed
    Cs = tuple(int(c) for c in args.C.split(",")) if args.C else cfg.compare_C
    root = Path(cfg.output_dir) / "compare"
    fit_one(cfg, ds, root / "standard", Variant.STANDARD, 1, seed)
    base, base_w, _ = diagnose_dir(root / "standard")
    rows, ent_rows = [], []
    for C in Cs:
        d = root / f"C{C}"
        fit_one(cfg, ds, d, cfg.compare_variant, C, seed)
        draws, w, summary = diagnose_dir(d)
        diff, se = waic_difference(draws.loglik, base.loglik)
        rows.append((C, Variant.parse(cfg.compare_variant).value, w.waic, w.se, w.p_waic2, w.lppd, diff, se))
        ids = dio.read_area_index(d)
        ent_rows += [(C, aid, summary.entropy[i]) for i, aid in enumerate(ids)]
    dio.write_table(Path(cfg.output_dir) / "waic_by_C.csv",
                    ["C", "variant", "waic", "se", "p_waic2", "lppd", "diff_vs_standard", "se_diff"], rows)
    dio.write_table(Path(cfg.output_dir) / "entropy_by_C.csv", ["C", "area", "entropy"], ent_rows)
    dio.write_json(Path(cfg.output_dir) / "waic_standard.json",
                   {"waic": base_w.waic, "se": base_w.se, "p_waic2": base_w.p_waic2, "lppd": base_w.lppd})
    return {"C": list(Cs), "waic": [r[2] for r in rows], "waic_standard": base_w.waic}


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
    "diagnose": cmd_diagnose, "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dlnmclust", description="Spatially clustered distributed lag non-linear models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="flat key = value run configuration")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        if name == "fit":
            sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in output_dir")
            sp.add_argument("--stop-after", type=int, default=None, metavar="SWEEPS",
                            help="checkpoint and stop once this many sweeps are done")
        if name == "simulate":
            sp.add_argument("--out", default=None, help="directory for panel.csv, adjacency.txt, truth.json")
        if name == "compare":
            sp.add_argument("--C", default=None, help="comma-separated cluster counts (overrides compare_C)")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = dio.load_config(args.config)
        result = COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(json.dumps({"error": "usage", "message": str(e)}), file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
