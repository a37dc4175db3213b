"""Shared helpers for the experiment scripts."""

import csv
import json
from pathlib import Path

from fedlora.config import ExperimentConfig, SeedBundle, load_config


def base_config(path):
    return load_config(path) if path else ExperimentConfig()


def with_seed(config, seed):
    return config.replace(seeds=SeedBundle.from_single(seed))


def write_rows(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    print(f"wrote {len(rows)} rows to {path}")


def write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
