"""Satisfaction-versus-radius table on the four-room model.

Generates the scenario dataset (if missing) and runs the default sweep
grid, then prints the report. Usage::

    python3 scripts/satisfaction_table.py --out out/table [--runs 200] [--threads 4]
"""

import argparse
import os
import sys

from drtube.cli import main as drtube


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="out/table")
    p.add_argument("--config", default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--epsilons", default="0,1e-5,1e-4,1e-3")
    p.add_argument("--sample-sizes", default="10,20,50")
    a = p.parse_args()
    common = ["--out", a.out] + (["--config", a.config] if a.config else [])
    if a.threads is not None:
        common += ["--threads", str(a.threads)]
    if not os.path.exists(os.path.join(a.out, "disturbances.csv")):
        code = drtube(common + ["gen-data"])
        if code:
            return code
    sweep = common + ["sweep", "--epsilons", a.epsilons, "--sample-sizes", a.sample_sizes]
    if a.runs is not None:
        sweep += ["--runs", str(a.runs)]
    code = drtube(sweep)
    drtube(common + ["report"])
    return code


if __name__ == "__main__":
    sys.exit(main())
