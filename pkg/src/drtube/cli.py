"""Command-line entry point: ``gen-data``, ``run``, ``sweep``, ``report``.

Exit codes: 0 success, 1 report threshold failure or other error,
2 configuration error, 3 data error, 4 solver error (including runs with
infeasible steps or input violations).
"""

import argparse
import json
import os
import sys

import numpy as np

from . import harness
from .config import config_hash, load_config
from .disturbance_data import load_dataset, save_dataset
from .errors import DataError, DrTubeError, InsufficientTrajectories, MissingArtifacts, SolverError, WindowOverrun
from .experiment import build_dataset, build_setup

DATASET_NAME = "disturbances.csv"
HELD_OUT_SEED_OFFSET = 1_000_003


def _apply_flags(cfg, args, seed_section):
    sim = {}
    if getattr(args, "no_timing", False):
        sim["record_timing"] = False
    if getattr(args, "runs", None) is not None:
        sim["runs"] = args.runs
    if getattr(args, "threads", None) is not None:
        sim["parallelism"] = args.threads
    updates = {"sim": sim} if sim else {}
    if args.seed is not None:
        if seed_section == "disturbance":
            updates["disturbance"] = {"seed": args.seed}
        else:
            sim["seed"] = args.seed
            updates["sim"] = sim
    return cfg.with_overrides(**updates) if updates else cfg


def _threads(cfg):
    return cfg["sim"]["parallelism"] or os.cpu_count() or 1


def _load_scenarios(cfg, args):
    path = args.dataset or os.path.join(args.out, DATASET_NAME)
    if not os.path.exists(path):
        raise MissingArtifacts(f"dataset {path} not found (run gen-data first)")
    ds = load_dataset(path)
    need = cfg["sim"]["N_T"] + cfg["mpc"]["N"]
    if ds.horizon < need:
        raise WindowOverrun(f"dataset horizon {ds.horizon} < N_T + N = {need}")
    if ds.n_dims != cfg["disturbance"]["n_dims"]:
        raise DataError(f"dataset has {ds.n_dims} dims, config expects {cfg['disturbance']['n_dims']}")
    return ds


def _held_out(cfg):
    if cfg["sim"]["true_noise"] != "trajectory":
        return None
    seed = cfg["disturbance"]["seed"] + HELD_OUT_SEED_OFFSET
    d = dict(cfg["disturbance"])
    d["seed"] = seed
    return build_dataset(cfg.with_overrides(disturbance=d))


def _write_config(cfg, out):
    os.makedirs(out, exist_ok=True)
    d = cfg.to_dict()
    d["sim"]["parallelism"] = None
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(cfg, args):
    ds = build_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, DATASET_NAME)
    meta = dict(ds.meta)
    meta["config_hash"] = config_hash(cfg)
    ds = type(ds)(ds.data, meta)
    save_dataset(ds, path)
    print(f"wrote {ds.n_traj} trajectories x {ds.horizon} steps x {ds.n_dims} dims to {path} "
          f"(seed {meta['seed']}, jitter {meta['jitter']:.1e}, config {meta['config_hash']})")
    return 0


def _check_cell_sizes(setup, sizes):
    for n in sizes:
        if n > setup.dataset.n_traj:
            raise InsufficientTrajectories(f"N_s={n} > {setup.dataset.n_traj} stored trajectories")


def _exit_for(summaries):
    bad = [s for s in summaries if s.infeasible_steps or s.violations]
    for s in bad:
        print(f"FAIL eps={s.epsilon:g} N_s={s.n_samples}: infeasible_steps={s.infeasible_steps} "
              f"input_violations={s.violations}", file=sys.stderr)
    return SolverError.exit_code if bad else 0


def cmd_run(cfg, args):
    ds = _load_scenarios(cfg, args)
    setup = build_setup(cfg, ds, _held_out(cfg))
    _check_cell_sizes(setup, [setup.n_samples])
    _write_config(cfg, args.out)
    dump_dir = os.path.join(args.out, "qp") if args.dump_qp else None
    summary, traces = harness.monte_carlo(setup, cfg["sim"]["runs"], cfg["sim"]["seed"], _threads(cfg),
                                          dump_qp_dir=dump_dir, return_traces=True)
    tdir = os.path.join(args.out, "traces")
    os.makedirs(tdir, exist_ok=True)
    keep = cfg["sim"]["trace_runs"]
    for tr in traces[: len(traces) if keep is None else keep]:
        harness.write_trace_csv(tr, os.path.join(tdir, f"run_{tr.run_index:04d}.csv"))
    harness.write_summary_json(summary, os.path.join(args.out, "summary.json"))
    cid = cfg["report"]["constraint"]
    print(f"runs={summary.runs} eps={summary.epsilon:g} N_s={summary.n_samples} "
          f"satisfaction[{cid}]={summary.satisfaction[cid]:.4f} worst={summary.worst_satisfaction:.4f} "
          f"infeasible_steps={summary.infeasible_steps} input_violations={summary.violations} "
          f"solve_ms_mean={summary.solve_ms_mean:.2f} config={summary.config_hash}")
    return _exit_for([summary])


def _float_list(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_sweep(cfg, args):
    upd = {}
    if args.epsilons:
        upd["epsilons"] = _float_list(args.epsilons)
    if args.sample_sizes:
        upd["sample_sizes"] = _int_list(args.sample_sizes)
    if upd:
        cfg = cfg.with_overrides(sweep=upd)
    ds = _load_scenarios(cfg, args)
    setup = build_setup(cfg, ds, _held_out(cfg))
    eps, sizes = cfg["sweep"]["epsilons"], cfg["sweep"]["sample_sizes"]
    _check_cell_sizes(setup, sizes)
    _write_config(cfg, args.out)
    cells = harness.sweep(setup, eps, sizes, cfg["sim"]["runs"], cfg["sim"]["seed"], _threads(cfg))
    h = setup.config_hash
    harness.write_sweep_csv(cells, os.path.join(args.out, "sweep.csv"), h, cfg["report"]["constraint"])
    harness.write_runtime_csv(cells, os.path.join(args.out, "runtime.csv"), h)
    harness.write_json(
        {"config_hash": h, "report_constraint": cfg["report"]["constraint"],
         "cells": [s.to_dict() for _, s in sorted(cells.items())]},
        os.path.join(args.out, "sweep.json"),
    )
    print(_format_grid(cfg["report"]["constraint"], [s.to_dict() for s in cells.values()]))
    return _exit_for(list(cells.values()))


def _format_grid(cid, cells):
    eps = sorted({c["epsilon"] for c in cells})
    ns = sorted({c["n_samples"] for c in cells})
    lut = {(c["epsilon"], c["n_samples"]): c for c in cells}
    lines = [f"worst-case in-time satisfaction of {cid}", "epsilon".ljust(10) + "".join(f"N_s={n}".rjust(12) for n in ns)]
    for e in eps:
        row = f"{e:<10g}"
        for n in ns:
            c = lut.get((e, n))
            row += (f"{100 * c['satisfaction'][cid]:11.1f}%" if c else " " * 12)
        lines.append(row)
    lines.append("mean solve ms".ljust(10) + "".join(
        f"{np.mean([lut[(e, n)]['solve_ms']['mean'] for e in eps if (e, n) in lut]):12.2f}" for n in ns))
    return "\n".join(lines)


def cmd_report(cfg, args):
    out = args.out
    files = [f for f in ("summary.json", "sweep.json") if os.path.exists(os.path.join(out, f))]
    if not files:
        raise MissingArtifacts(f"no summary.json or sweep.json in {out}")
    if args.config is None and os.path.exists(os.path.join(out, "config.json")):
        cfg = load_config(os.path.join(out, "config.json"))
    hashes = set()
    cells = []
    for f in files:
        with open(os.path.join(out, f)) as fh:
            d = json.load(fh)
        hashes.add(d["config_hash"])
        if f == "sweep.json":
            cells.extend(d["cells"])
            hashes.update(c["config_hash"] for c in d["cells"])
        else:
            cells.append(d)
    if len(hashes) > 1:
        raise MissingArtifacts(f"artifacts in {out} come from different configs: {sorted(hashes)}")
    cid = cfg["report"]["constraint"]
    print(f"config {hashes.pop()}")
    print(_format_grid(cid, cells))
    print("runtime (per N_s)")
    for n in sorted({c["n_samples"] for c in cells}):
        sel = [c for c in cells if c["n_samples"] == n]
        print(f"  N_s={n}: mean {np.mean([c['solve_ms']['mean'] for c in sel]):.2f} ms, "
              f"p95 {max(c['solve_ms']['p95'] for c in sel):.2f} ms")
    failures = []
    thr = cfg["report"]
    for c in sorted(cells, key=lambda c: (c["epsilon"], c["n_samples"])):
        name = f"eps={c['epsilon']:g},N_s={c['n_samples']}"
        if c["infeasible_steps"] or c["violations"]:
            failures.append(f"{name}: infeasible_steps={c['infeasible_steps']} input_violations={c['violations']}")
        if thr["min_satisfaction"] is not None and c["satisfaction"][cid] < thr["min_satisfaction"]:
            failures.append(f"{name}: satisfaction {c['satisfaction'][cid]:.4f} < {thr['min_satisfaction']}")
        if thr["max_solve_ms"] is not None and c["solve_ms"]["mean"] > thr["max_solve_ms"]:
            failures.append(f"{name}: mean solve {c['solve_ms']['mean']:.2f} ms > {thr['max_solve_ms']}")
    for f in failures:
        print(f"FAIL {f}")
    print("PASS" if not failures else f"{len(failures)} threshold failure(s)")
    return 1 if failures else 0


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON config file (defaults apply to missing fields)")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else "out", help="output directory")
    p.add_argument("--seed", type=int, default=d, help="master seed (gen-data: dataset seed)")
    p.add_argument("--threads", type=int, default=d, help="worker processes (default: all cores)")
    p.add_argument("--dump-qp", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="write the step-0 QP of run 0 to OUT/qp/ as JSON")
    p.add_argument("--no-timing", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="record solve times as 0 so outputs are bit-reproducible")


def build_parser():
    parser = argparse.ArgumentParser(prog="drtube", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp_ = sub.add_parser(name)
        _global_flags(sp_, suppress=True)
        if name in ("run", "sweep"):
            sp_.add_argument("--dataset", default=None, help=f"dataset CSV (default OUT/{DATASET_NAME})")
            sp_.add_argument("--runs", type=int, default=None, help="override sim.runs")
        if name == "sweep":
            sp_.add_argument("--epsilons", default=None, help="comma-separated radii")
            sp_.add_argument("--sample-sizes", default=None, help="comma-separated N_s values")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = _apply_flags(cfg, args, "disturbance" if args.command == "gen-data" else "sim")
        return COMMANDS[args.command](cfg, args)
    except DrTubeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
