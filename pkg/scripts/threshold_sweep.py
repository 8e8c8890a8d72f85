"""Static-threshold sweep of a trained toy diffmoe model, with the dynamic-threshold point alongside.

Trains a toy model first when ``--ckpt`` is not given.  Writes ``sweep.csv`` under
``$DIFFMOE_OUT/threshold_sweep`` (or ``--out``).
"""
import argparse
import csv
import os
import sys
from pathlib import Path

from diffmoe.analysis import DEFAULT_GRID
from diffmoe.cli import main as cli


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", type=str, default=None, help="diffmoe checkpoint; trained from configs/toy.cfg if absent")
    p.add_argument("--steps", type=int, default=2000, help="training steps when no checkpoint is given")
    p.add_argument("--sample-steps", type=int, default=20, help="sampler steps per sweep point")
    p.add_argument("--n", type=int, default=64, help="samples per sweep point")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep threads")
    p.add_argument("--out", type=str, default=None)
    args = p.parse_args()
    out = Path(args.out or Path(os.environ.get("DIFFMOE_OUT", "out")) / "threshold_sweep")
    ckpt = args.ckpt
    if ckpt is None:
        config = Path(__file__).resolve().parent.parent / "configs" / "toy.cfg"
        rc = cli(["train", "--config", str(config), "--steps", str(args.steps), "--out", str(out / "train")])
        if rc:
            return rc
        ckpt = str(out / "train" / "ckpt.bin")
    grid = ",".join(f"{g:g}" for g in DEFAULT_GRID)
    rc = cli(["sweep", "--ckpt", ckpt, "--n", str(args.n), "--steps", str(args.sample_steps), "--grid", grid,
              "--workers", str(args.workers), "--out", str(out)])
    if rc:
        return rc
    with open(out / "sweep.csv", newline="") as f:
        for row in csv.DictReader(f):
            print(f"{row['mode']:8s} gamma={row['gamma']:>6s} C={float(row['capacity']):.3f} "
                  f"quality={float(row['quality']):.4f}{'  <- selected' if row['selected'] == '1' else ''}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
