"""Global adapter norm per round, dimension-wise vs zero-pad aggregation.

Reproduces the shape of the norm-dilution plot: after the first aggregation the
zero-pad baseline's global adapter is visibly smaller.

    python3 scripts/norm_trace.py --seeds 0,1,2,3,4 --out results/norm_trace.csv
"""

import argparse

import numpy as np

from _common import base_config, with_seed, write_rows
from fedlora.fedsim import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--strategies", default="fedilora,hetlora,fedavg")
    ap.add_argument("--out", default="results/norm_trace.csv")
    args = ap.parse_args()
    base = base_config(args.config)
    rows = []
    for name in args.strategies.split(","):
        for seed in (int(s) for s in args.seeds.split(",")):
            res = run_experiment(with_seed(base, seed).replace(strategy=name))
            for t, norm in enumerate([res.initial_norm] + res.trace("global_norm")):
                rows.append({"strategy": name, "seed": seed, "round": t, "global_adapter_norm": norm})
    write_rows(args.out, rows)
    for name in args.strategies.split(","):
        first = [r["global_adapter_norm"] for r in rows if r["strategy"] == name and r["round"] == 1]
        print(f"{name:9s} norm after first aggregation: {np.mean(first):.3f}")


if __name__ == "__main__":
    main()
