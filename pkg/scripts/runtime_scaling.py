"""Mean per-step solve time as a function of the number of scenarios.

Runs a few closed loops per sample size at one radius and writes a
runtime CSV (one row per N_s). Usage::

    python3 scripts/runtime_scaling.py --out out/runtime [--runs 3] [--sample-sizes 10,20,50]
"""

import argparse
import os
import sys

from drtube.config import load_config
from drtube.experiment import build_dataset, build_setup
from drtube.harness import sweep, write_runtime_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="out/runtime")
    p.add_argument("--config", default=None)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--sample-sizes", default="10,20,50")
    a = p.parse_args()
    cfg = load_config(a.config)
    setup = build_setup(cfg, build_dataset(cfg))
    sizes = [int(s) for s in a.sample_sizes.split(",")]
    cells = sweep(setup, [a.epsilon], sizes, a.runs, cfg["sim"]["seed"])
    os.makedirs(a.out, exist_ok=True)
    path = os.path.join(a.out, "runtime.csv")
    write_runtime_csv(cells, path, setup.config_hash)
    base = cells[(a.epsilon, sizes[0])].solve_ms_mean
    for n in sizes:
        ms = cells[(a.epsilon, n)].solve_ms_mean
        print(f"N_s={n:3d}: mean solve {ms:8.2f} ms  ({ms / base:.2f}x N_s={sizes[0]})")
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
