"""Per-layer local/global A similarity over rounds and how often each layer is edited.

    python3 scripts/layer_similarity.py --out results/similarity.csv
"""

import argparse
from collections import Counter

from _common import base_config, with_seed, write_rows
from fedlora.fedsim import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--missing", type=float, default=0.6)
    ap.add_argument("--out", default="results/similarity.csv")
    args = ap.parse_args()
    config = with_seed(base_config(args.config), args.seed).replace(strategy="fedilora", missing_ratio=args.missing)
    res = run_experiment(config)
    rows, picks = [], Counter()
    for r in res.records:
        for e in r.edits:
            for y, s in enumerate(e.similarities):
                rows.append({"round": r.round, "client": e.client_id, "layer": y, "similarity": s,
                             "edited": int(y in e.selected)})
            picks.update(e.selected)
    write_rows(args.out, rows)
    sims = [row["similarity"] for row in rows]
    print(f"similarity range {min(sims):.4f} .. {max(sims):.4f}")
    print("edits per layer:", dict(sorted(picks.items())))


if __name__ == "__main__":
    main()
