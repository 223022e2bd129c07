"""Run a multi-method comparison from a config file and print the AE(k) table.

    python3 scripts/run_comparison.py configs/gridworld_desk.cfg --out runs/desk
"""

import argparse
import csv
import sys
from pathlib import Path

from tensorpsr.cli import run_cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", default=None)
    ap.add_argument("--steps", type=int, default=5, help="columns k = 1..steps to print")
    args = ap.parse_args()
    out = Path(args.out or Path("runs") / Path(args.config).stem)
    code = run_cli(["compare", "--config", args.config, "--out", str(out)])
    if code:
        sys.exit(code)
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    print(f"{'method':>8} " + " ".join(f"{'AE(' + str(k) + ')':>16}" for k in range(1, args.steps + 1))
          + f" {'model s':>9}")
    for m in methods:
        mr = [r for r in rows if r["method"] == m][:args.steps]
        cells = " ".join(f"{float(r['ae_mean']):.4f}±{float(r['ae_std']):.4f}".rjust(16) for r in mr)
        print(f"{m:>8} {cells} {float(mr[0]['t_model_s']):9.2f}")


if __name__ == "__main__":
    main()
