"""Command-line runner: train, sweep, oracle, landscape, version."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (FILTER_NORM, GLOBAL_NORM, landscape_grid, make_evaluator, meaningful_check,
                       network_field, relative_l2)
from .config import ConfigError, RunConfig, load_config, parse_config
from .model import ParameterVector, init_glorot
from .oracle import OracleError, analytic_infty, evaluation_grid, gf_convolve, modal_solve, reference_field
from .sampling import sample
from .training import (PretrainConfig, TrainingDiverged, pretrain_supervised, split_indices,
                       train_pinn)

log = logging.getLogger("helmpinn")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ORACLE = 4

LOSS_COLUMNS = ["iteration", "pde_r", "pde_i", "bc_r", "bc_i", "total", "e_rel"]
SUMMARY_COLUMNS = ["axis", "value", "seed", "status", "e_rel_ref", "e_rel_gf", "onset", "final_loss", "error"]
SWEEP_AXES = ("ppw", "activation_scale", "freeze", "repeat")


@dataclass
class RunResult:
    mode: str
    e_rel_ref: float | None
    e_rel_gf: float | None
    meaningful: bool | None
    onset: int | None
    final_loss: float | None
    pretrain_e_rel_ref: float | None
    pretrain_e_rel_gf: float | None
    wall_time_s: float


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def reference_oracle(cfg: RunConfig, problem):
    modes = cfg.evaluation.modes
    if cfg.evaluation.reference == "analytic":
        return analytic_infty(problem)
    if cfg.evaluation.reference == "modal":
        return modal_solve(problem, modes)
    return reference_field(problem, modes)


def write_manifest(cfg: RunConfig, problem, spec, samples, outdir: Path) -> None:
    derived = dict(problem.medium.derived())
    derived.update({
        "resolved_cosine_wavenumber": problem.source.cosine_wavenumber,
        "points_per_axis": list(samples.counts.per_axis),
        "n_interior": samples.counts.n_interior,
        "n_boundary": samples.counts.n_boundary,
        "spec_hash": spec.spec_hash(),
        "n_params": spec.n_params,
    })
    manifest = {"tool": "helmpinn", "version": __version__, "config_hash": cfg.config_hash(),
                "config": cfg.resolved(), "derived": derived}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _pretrain_data(cfg: RunConfig, problem, oracle):
    """Seeded subset of a uniform grid labelled by the chosen data source."""
    pre = cfg.pretrain
    grid = evaluation_grid(problem, pre.data_grid_n)
    tr, te = split_indices(len(grid), pre.train_fraction, pre.test_fraction, pre.seed)
    idx = np.concatenate([tr, te])
    pts = grid[idx]
    if pre.data == "gf":
        field = gf_convolve(problem, pre.gf_grid_n, pts)
    elif pre.data == "analytic":
        field = analytic_infty(problem)(pts)
    elif pre.data == "modal":
        field = modal_solve(problem, cfg.evaluation.modes)(pts)
    else:
        field = oracle(pts)
    n = len(idx)
    return PretrainConfig(pre.iterations, pre.learning_rate, field, len(tr) / n, len(te) / n, pre.seed,
                          pre.log_every)


def execute_run(cfg: RunConfig, outdir) -> RunResult:
    """Run one configured experiment and write its artifacts to ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    problem = cfg.problem_obj()
    spec = cfg.network_obj()
    samples = sample(problem, cfg.sampling.ppw, cfg.sampling.seed)
    write_manifest(cfg, problem, spec, samples, outdir)
    t0 = time.perf_counter()

    grid = evaluation_grid(problem, cfg.evaluation.grid_n)
    oracle = reference_oracle(cfg, problem)
    ref = oracle(grid)
    gf = None
    if cfg.evaluation.gf:
        gf = gf_convolve(problem, cfg.evaluation.gf_grid_n, grid)
    evaluator = make_evaluator(spec, ref, gf)

    ckdir = outdir / "checkpoints"
    params = init_glorot(spec)
    error_rows = []
    pre_e = (None, None)
    mode = cfg.training.mode
    if mode in ("supervised", "discrepancy"):
        pre_cfg = _pretrain_data(cfg, problem, oracle)
        pre = pretrain_supervised(spec, pre_cfg, params, evaluator)
        _write_csv(outdir / "pretrain.csv", ["iteration", "train_mse", "test_mse"], pre.mse_history)
        error_rows += [("pretrain", e.iteration, e.e_rel_ref, e.e_rel_gf) for e in pre.error_history]
        ckdir.mkdir(exist_ok=True)
        pre.params.save(ckdir / "pretrained.npz", spec, {"phase": "pretrain"})
        params = pre.params.with_mask(np.ones(len(pre.params), dtype=bool))
        pre_e = (pre.error_history[-1].e_rel_ref, pre.error_history[-1].e_rel_gf)

    onset = final_loss = None
    final = params
    if mode in ("pinn", "discrepancy"):
        tcfg = cfg.training.build(problem, cfg.network.init_seed)
        every = cfg.outputs.checkpoint_every
        if every > 0:
            ckdir.mkdir(exist_ok=True)

        def save_ck(it, p):
            p.save(ckdir / f"iter_{it:07d}.npz", spec, {"phase": "pinn", "iteration": it})

        rec = train_pinn(spec, problem, samples, tcfg, params, evaluator, checkpoint=save_ck,
                         checkpoint_every=every)
        err = {e.iteration: e for e in rec.error_history}
        _write_csv(outdir / "loss.csv", LOSS_COLUMNS,
                   [[it, b.pde_r, b.pde_i, b.bc_r, b.bc_i, b.total, err[it].e_rel_ref]
                    for it, b in rec.loss_history])
        error_rows += [("pinn", e.iteration, e.e_rel_ref, e.e_rel_gf) for e in rec.error_history]
        onset, final_loss, final = rec.onset_iteration, rec.final_loss.total, rec.final_params

    _write_csv(outdir / "errors.csv", ["phase", "iteration", "e_rel_ref", "e_rel_gf"], error_rows)
    ckdir.mkdir(exist_ok=True)
    final.save(ckdir / "final.npz", spec, {"phase": mode})
    pred = network_field(final, spec, grid)
    if gf is not None:
        report = meaningful_check(pred, ref, gf)
        e_ref, e_gf, meaningful = report.e_rel_ref, report.e_rel_gf, report.meaningful
    else:
        e_ref, e_gf, meaningful = relative_l2(pred, ref), None, None
    wall = time.perf_counter() - t0
    result = RunResult(mode, e_ref, e_gf, meaningful, onset, final_loss, pre_e[0], pre_e[1], wall)
    summary = {k: v for k, v in asdict(result).items() if k != "wall_time_s"}
    (outdir / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (outdir / "timings.json").write_text(json.dumps({"wall_time_s": wall}) + "\n")
    return result


# -- sweeps -----------------------------------------------------------------

def parse_freeze(value: str) -> dict:
    """'none', 'all_but_last:2' or 'all_but_first:1'."""
    if value == "none":
        return {"kind": "none", "k": 0}
    kind, _, k = value.partition(":")
    if kind not in ("all_but_first", "all_but_last") or not k.isdigit():
        raise ConfigError(f"freeze value {value!r} must look like all_but_last:2")
    return {"kind": kind, "k": int(k)}


def cell_config(base: dict, axis: str, value: str, seed: int) -> dict:
    d = copy.deepcopy(base)
    if axis == "ppw":
        d.setdefault("sampling", {})["ppw"] = float(value)
    elif axis == "activation_scale":
        net = d.setdefault("network", {})
        net.setdefault("activation", {})["scale"] = float(value)
        for act in net.get("hidden_activations") or []:
            act["scale"] = float(value)
    elif axis == "freeze":
        d.setdefault("training", {})["freeze"] = parse_freeze(value)
    elif axis != "repeat":
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    d.setdefault("network", {})["init_seed"] = seed
    d.setdefault("sampling", {})["seed"] = seed
    if d.get("pretrain") is not None:
        d["pretrain"]["seed"] = seed
    return d


def _run_cell(args):
    cfg_dict, outdir = args
    try:
        res = execute_run(parse_config(cfg_dict), outdir)
        return "ok", res, ""
    except TrainingDiverged as exc:
        return "diverged", None, str(exc)
    except Exception as exc:  # recorded in the summary, the sweep continues
        return "failed", None, f"{type(exc).__name__}: {exc}"


def run_sweep(base: RunConfig, axis: str, values, seeds, outdir, workers: int = 1) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    base_dict = base.resolved()
    seeds = list(seeds) if seeds else [base.network.init_seed]
    cells = []
    for i, v in enumerate(values):
        for s in seeds:
            name = f"{axis}={v}_seed={s}" if axis != "repeat" else f"repeat={i}_{v}_seed={s}"
            d = cell_config(base_dict, axis, str(v), int(s))
            d["outputs"]["directory"] = str(outdir / name)
            parse_config(d)  # fail fast on bad sweep values
            cells.append((str(v), int(s), d, outdir / name))

    summary_path, timing_path = outdir / "summary.csv", outdir / "timings.csv"
    with summary_path.open("w", newline="") as sf, timing_path.open("w", newline="") as tf:
        sw, tw = csv.writer(sf), csv.writer(tf)
        sw.writerow(SUMMARY_COLUMNS)
        tw.writerow(["axis", "value", "seed", "wall_time_s"])
        jobs = [(d, str(p)) for _, _, d, p in cells]
        if workers > 1:
            pool = ProcessPoolExecutor(workers)
            results = pool.map(_run_cell, jobs)
        else:
            pool = None
            results = map(_run_cell, jobs)
        try:
            for (v, s, _, _), (status, res, err) in zip(cells, results):
                if res is not None:
                    row = [axis, v, s, status, res.e_rel_ref, res.e_rel_gf, res.onset, res.final_loss, ""]
                    tw.writerow([axis, v, s, _fmt(res.wall_time_s)])
                else:
                    row = [axis, v, s, status, None, None, None, None, err]
                    tw.writerow([axis, v, s, ""])
                sw.writerow([_fmt(x) for x in row])
                sf.flush()
                tf.flush()
        finally:
            if pool is not None:
                pool.shutdown()
    return summary_path


# -- commands ---------------------------------------------------------------

def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    outdir = Path(args.out) if args.out else Path(cfg.outputs.directory)
    res = execute_run(cfg, outdir)
    print(json.dumps({k: v for k, v in asdict(res).items()}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    outdir = Path(args.out) if args.out else Path(cfg.outputs.directory)
    path = run_sweep(cfg, args.axis, args.values, args.seeds, outdir, args.workers)
    print(path)
    return 0


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    problem = cfg.problem_obj()
    grid = evaluation_grid(problem, args.grid_n or cfg.evaluation.grid_n)
    if args.which == "analytic":
        field = analytic_infty(problem)(grid)
    elif args.which == "modal":
        field = modal_solve(problem, cfg.evaluation.modes)(grid)
    else:
        field = gf_convolve(problem, args.gf_grid_n or cfg.evaluation.gf_grid_n, grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    field.to_csv(out)
    print(out)
    return 0


def cmd_landscape(args) -> int:
    cfg = load_config(args.config)
    problem = cfg.problem_obj()
    spec = cfg.network_obj()
    try:
        params, _ = ParameterVector.load(args.checkpoint, spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    samples = sample(problem, cfg.sampling.ppw, cfg.sampling.seed)
    weights = cfg.training.loss_weights.build(problem)
    grid = landscape_grid(params, spec, problem, samples, weights, args.half_range, args.resolution,
                          tuple(args.seeds), args.normalization)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid.save(out / "landscape.csv", out / "landscape.json")
    print(out / "landscape.csv")
    return 0


def cmd_version(args) -> int:
    print(f"helmpinn {__version__}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="helmpinn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one configured experiment")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (default: outputs.directory)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="cross product of axis values and seeds")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--seeds", nargs="+", type=int)
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    o = sub.add_parser("oracle", help="write a reference field on the evaluation grid")
    o.add_argument("config")
    o.add_argument("--which", required=True, choices=("analytic", "modal", "gf"))
    o.add_argument("--out", required=True)
    o.add_argument("--grid-n", type=int)
    o.add_argument("--gf-grid-n", type=int)
    o.set_defaults(func=cmd_oracle)

    ls = sub.add_parser("landscape", help="2D loss slice around a checkpoint")
    ls.add_argument("config")
    ls.add_argument("--checkpoint", required=True)
    ls.add_argument("--resolution", type=int, default=21)
    ls.add_argument("--half-range", type=float, default=1.0)
    ls.add_argument("--seeds", nargs=2, type=int, default=[0, 1])
    ls.add_argument("--normalization", choices=(FILTER_NORM, GLOBAL_NORM), default=FILTER_NORM)
    ls.add_argument("--out", required=True)
    ls.set_defaults(func=cmd_landscape)

    v = sub.add_parser("version", help="print the tool version")
    v.set_defaults(func=cmd_version)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except TrainingDiverged as exc:
        return _fail("diverged", str(exc), EXIT_DIVERGED, iteration=exc.iteration, term=exc.term,
                     phase=exc.phase)
    except OracleError as exc:
        return _fail("oracle", str(exc), EXIT_ORACLE)


if __name__ == "__main__":
    sys.exit(main())
