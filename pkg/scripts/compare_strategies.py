"""Final global and personalized loss for every aggregation strategy.

    python3 scripts/compare_strategies.py --missing 0.6 --out results/strategies.csv
"""

import argparse

import numpy as np

from _common import base_config, with_seed, write_rows
from fedlora.aggregation import STRATEGIES
from fedlora.fedsim import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--missing", default="0,0.4,0.6")
    ap.add_argument("--out", default="results/strategies.csv")
    args = ap.parse_args()
    base = base_config(args.config)
    rows = []
    for ratio in (float(m) for m in args.missing.split(",")):
        for name in STRATEGIES:
            g, p = [], []
            for seed in (int(s) for s in args.seeds.split(",")):
                res = run_experiment(with_seed(base, seed).replace(strategy=name, missing_ratio=ratio))
                g.append(res.records[-1].global_loss)
                p.append(res.records[-1].personalized_loss)
            rows.append({"missing_ratio": ratio, "strategy": name,
                         "mean_final_global_loss": float(np.mean(g)), "std_final_global_loss": float(np.std(g)),
                         "mean_final_personalized_loss": float(np.mean(p))})
            print(f"missing {ratio:.1f} {name:9s} global {np.mean(g):.4f}  personalized {np.mean(p):.4f}")
    write_rows(args.out, rows)


if __name__ == "__main__":
    main()
