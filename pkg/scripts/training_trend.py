"""DiffMoE vs token-choice training loss on the toy dataset, median over seeds.

Writes ``trend.csv`` under ``$DIFFMOE_OUT/trend`` (or ``--out``).
"""
import argparse
import os
from pathlib import Path

import numpy as np

from diffmoe.analysis import write_csv
from diffmoe.experiments import TOY_TRAIN, trend_run


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--steps", type=int, default=TOY_TRAIN.steps)
    p.add_argument("--out", type=str, default=None)
    args = p.parse_args()
    out = Path(args.out or Path(os.environ.get("DIFFMOE_OUT", "out")) / "trend")
    seeds = [int(s) for s in args.seeds.split(",")]
    runs = []
    for seed in seeds:
        for routing in ("diffmoe", "tc"):
            r = trend_run(routing, seed, args.steps, out / f"{routing}_seed{seed}")
            print(f"{routing:8s} seed={seed} eval={r.eval_loss:.5f} trailing={r.trailing_loss:.5f} "
                  f"final={r.final_loss:.5f} cap={r.capacity_avg}", flush=True)
            runs.append(r)
    write_csv(out / "trend.csv", ["routing", "seed", "eval_loss", "trailing_loss", "final_loss", "capacity_avg"],
              [(r.routing, r.seed, r.eval_loss, r.trailing_loss, r.final_loss,
                float("nan") if r.capacity_avg is None else r.capacity_avg) for r in runs])
    for routing in ("diffmoe", "tc"):
        sel = [r for r in runs if r.routing == routing]
        print(f"median {routing}: eval={np.median([r.eval_loss for r in sel]):.5f} "
              f"trailing={np.median([r.trailing_loss for r in sel]):.5f}")


if __name__ == "__main__":
    main()
