"""Command-line experiment runner.

    dotct simulate     --config exp.yaml [--out DIR] [--seed N]
    dotct reconstruct  --config exp.yaml [--out DIR] [--seed N]
    dotct baseline-tv  --config exp.yaml [--out DIR] [--seed N]
    dotct compare      RUN_DIR [RUN_DIR ...] [--out FILE]
    dotct metrics      REC.raw GT.raw

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from . import config as config_mod
from .bench import (Dataset, GeometryPlan, heart_spec, make_phantom_sequence, metrics, simulate,
                    stars_spec)
from .fields import Grid, ScalarField, TimeGrid
from .io import read_field, write_field, write_png, write_raw
from .rkhs import make_kernel_op
from .solver import (NumericalError, Problem, SolverConfig, WarmStart, alternate, per_gate_tv,
                     tv_baseline, write_objective_csv)

log = logging.getLogger("dotct")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
METRIC_FIELDS = ["method", "gate", "ssim", "psnr", "nrmse", "mass_rec", "mass_gt"]


# ---------------------------------------------------------------------------
# pipeline pieces (also used by the tests)


def phantom_spec(cfg: config_mod.ExperimentConfig):
    p = cfg.phantom
    grid = Grid(p.nx, p.ny, tuple(p.extent))
    factory = stars_spec if p.kind == "stars" else heart_spec
    return factory(grid, seed=p.seed, shift=p.shift, rotation_deg=p.rotation_deg, scale=p.scale)


def geometry_plan(cfg: config_mod.ExperimentConfig) -> GeometryPlan | None:
    if cfg.model.forward_mode == "identity":
        return None
    g = cfg.geometry
    return GeometryPlan(g.views_per_gate, g.num_bins, tuple(g.det_extent), g.offset_step,
                        g.include_endpoint)


def run_simulate(cfg: config_mod.ExperimentConfig) -> Dataset:
    spec = phantom_spec(cfg)
    seq = make_phantom_sequence(spec, cfg.time.N)
    return simulate(seq, geometry_plan(cfg), cfg.snr, cfg.noise.seed,
                    provenance={"phantom": spec.to_dict()})


def build_problem(cfg: config_mod.ExperimentConfig, ds: Dataset) -> Problem:
    if ds.N != cfg.time.N:
        raise ValueError(f"dataset has {ds.N} gates, config expects N={cfg.time.N}")
    m = cfg.model
    kernel = make_kernel_op(ds.grid, m.sigma, m.kernel_mode)
    return Problem(ds.grid, TimeGrid(cfg.time.N, cfg.time.M), ds.gates(), m.mu1, m.mu2, m.eps_tv,
                   kernel, m.forward_mode, m.scheme)


def solver_config(cfg: config_mod.ExperimentConfig) -> SolverConfig:
    s = cfg.solver
    return SolverConfig(s.alpha, s.beta, s.K, s.K_theta, s.K_v, s.tol_theta, s.tol_v, s.order)


def run_reconstruct(cfg: config_mod.ExperimentConfig, ds: Dataset):
    P = build_problem(cfg, ds)
    w = cfg.warm_start
    return alternate(P, solver_config(cfg), ws=WarmStart(w.strategy, w.k0, w.k1))


def run_baselines(cfg: config_mod.ExperimentConfig, ds: Dataset) -> tuple[list[ScalarField], ScalarField]:
    mu1 = cfg.model.mu1 if cfg.baseline.mu1 is None else cfg.baseline.mu1
    iters = cfg.baseline_iterations()
    P = build_problem(cfg, ds)
    gates = per_gate_tv(P, cfg.solver.alpha, iters, mu1)
    pooled = tv_baseline(ds.grid, P.gates, mu1, cfg.model.eps_tv, cfg.solver.alpha, iters,
                         cfg.model.forward_mode)
    return gates, pooled


# ---------------------------------------------------------------------------
# artifacts


def _metric_rows(method: str, recs, truths) -> list[dict]:
    rows = []
    for i, (r, t) in enumerate(zip(recs, truths), start=1):
        m = metrics(r, t)
        rows.append({"method": method, "gate": i, **m.as_dict()})
    return rows


def _write_metrics(path: Path, rows: list[dict]):
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _write_images(out: Path, stem: str, recs, truths):
    for i, (r, t) in enumerate(zip(recs, truths), start=1):
        write_field(out / f"{stem}_gate{i:02d}.raw", r)
        hi = max(float(t.values.max()), float(r.values.max()))
        write_png(out / f"{stem}_gate{i:02d}.png", r.values, (0.0, hi))


def _dataset_dir(cfg) -> Path:
    return Path(cfg.output) / "dataset"


def _load_or_simulate(cfg) -> Dataset:
    d = _dataset_dir(cfg)
    if (d / "manifest.json").exists():
        return Dataset.load(d)
    ds = run_simulate(cfg)
    ds.save(d)
    return ds


def cmd_simulate(cfg) -> int:
    ds = run_simulate(cfg)
    d = ds.save(_dataset_dir(cfg))
    config_mod.save(cfg, Path(cfg.output) / "config.yaml")
    for i, t in enumerate(ds.ground_truth, start=1):
        write_png(d / f"truth_gate{i:02d}.png", t.values, (0.0, float(t.values.max())))
    log.info("wrote %d gates to %s", ds.N, d)
    return EXIT_OK


def cmd_reconstruct(cfg) -> int:
    ds = _load_or_simulate(cfg)
    sol = run_reconstruct(cfg, ds)
    method = "proposed" if cfg.model.kernel_mode == "gaussian" else "l2"
    out = Path(cfg.output) / method
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save(cfg, out / "config.yaml")
    _write_images(out, "recon", sol.gate_images, ds.ground_truth)
    write_field(out / "template.raw", sol.template)
    v = sol.velocity
    steps = v.time_grid.steps
    # v at tau_0 never moves a density, so the first active frame is dumped
    for name, j in (("velocity_first", 1), ("velocity_last", steps)):
        write_raw(out / f"{name}.raw", v.data[j], kind="vector_field", tau=float(v.time_grid.tau[j]),
                  nx=v.grid.nx, ny=v.grid.ny, extent=list(v.grid.extent))
    write_objective_csv(out / "objective.csv", sol)
    rows = _metric_rows(method, sol.gate_images, ds.ground_truth)
    _write_metrics(out / "metrics.csv", rows)
    diag = {k: v for k, v in sol.diagnostics.items()}
    diag["objective_initial"] = sol.objective_history[0]
    diag["objective_final"] = sol.objective_history[-1]
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True))
    for r in rows:
        log.info("%s gate %d: ssim %.4f psnr %.2f nrmse %.4f", method, r["gate"], r["ssim"],
                 r["psnr"], r["nrmse"])
    return EXIT_OK


def cmd_baseline_tv(cfg) -> int:
    ds = _load_or_simulate(cfg)
    gates, pooled = run_baselines(cfg, ds)
    out = Path(cfg.output) / "baseline"
    out.mkdir(parents=True, exist_ok=True)
    _write_images(out, "tv", gates, ds.ground_truth)
    write_field(out / "static.raw", pooled)
    write_png(out / "static.png", pooled.values, (0.0, float(max(t.values.max() for t in ds.ground_truth))))
    rows = _metric_rows("tv", gates, ds.ground_truth)
    rows += _metric_rows("static", [pooled] * ds.N, ds.ground_truth)
    _write_metrics(out / "metrics.csv", rows)
    for r in rows:
        log.info("%s gate %d: ssim %.4f", r["method"], r["gate"], r["ssim"])
    return EXIT_OK


def _read_metrics(path: Path) -> list[dict]:
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["gate"] = int(r["gate"])
        for k in METRIC_FIELDS[2:]:
            r[k] = float(r[k])
    return rows


def compare_runs(run_dirs) -> list[dict]:
    """Collect metric rows from run directories (or their method subdirectories)."""
    rows = []
    missing = []
    for d in map(Path, run_dirs):
        files = [d / "metrics.csv"] if (d / "metrics.csv").exists() else sorted(d.glob("*/metrics.csv"))
        if not files:
            missing.append(str(d))
            continue
        for f in files:
            for r in _read_metrics(f):
                rows.append({"run": str(d), **r})
    if missing:
        raise FileNotFoundError(f"no metrics found in: {', '.join(missing)}")
    return rows


def cmd_compare(run_dirs, out: str | None) -> int:
    rows = compare_runs(run_dirs)
    header = ["run"] + METRIC_FIELDS
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=header)
            w.writeheader()
            w.writerows(rows)
    print(f"{'run':<28} {'method':<9} {'gate':>4} {'ssim':>8} {'psnr':>8} {'nrmse':>8} {'mass':>10}")
    for r in rows:
        print(f"{r['run'][-28:]:<28} {r['method']:<9} {r['gate']:>4d} {r['ssim']:8.4f} "
              f"{r['psnr']:8.2f} {r['nrmse']:8.4f} {r['mass_rec']:10.4f}")
    return EXIT_OK


def cmd_metrics(rec_path, gt_path) -> int:
    m = metrics(read_field(rec_path), read_field(gt_path))
    print(json.dumps({k: (None if isinstance(v, float) and math.isinf(v) else v)
                      for k, v in m.as_dict().items()}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dotct", description="Gated CT reconstruction with a mass-preserving flow")
    ap.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "reconstruct", "baseline-tv"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="seed override for phantom and noise")
        p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    p = sub.add_parser("compare")
    p.add_argument("runs", nargs="+", help="run directories holding metrics.csv")
    p.add_argument("--out", help="write the table as CSV")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    p = sub.add_parser("metrics")
    p.add_argument("rec", help="reconstruction (.raw with sidecar)")
    p.add_argument("gt", help="ground truth (.raw with sidecar)")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            return cmd_compare(args.runs, args.out)
        if args.command == "metrics":
            return cmd_metrics(args.rec, args.gt)
        cfg = config_mod.load(args.config).with_overrides(args.out, args.seed)
        config_mod.validate(cfg)
        handler = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
                   "baseline-tv": cmd_baseline_tv}[args.command]
        return handler(cfg)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (config_mod.ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
