"""Per-round metrics persistence.

``metrics.csv`` starts with a version line, then a header, then one row per
round. Nested values (per-layer norms, per-client edits, seeds) are JSON encoded
inside their cell. ``metrics.json`` carries the same rows plus full edit
reports. Both files are rewritten or appended and flushed after every round, so
an interrupted run leaves a readable prefix.

Floats are written with ``repr`` (shortest round-trip form), so reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import os
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import numpy as np

from .config import ExperimentConfig
from .fedsim import ExperimentResult, RoundRecord, ServerState

SCHEMA_VERSION = 1
VERSION_LINE = f"# fedlora-metrics schema_version={SCHEMA_VERSION}"

COLUMNS = (
    "round",
    "strategy",
    "missing_ratio",
    "global_loss",
    "personalized_loss",
    "global_adapter_norm",
    "global_adapter_norm_per_layer",
    "edited_layer_per_client",
    "similarity_per_client",
    "sampled_clients",
    "seed_bundle",
)
_JSON_COLUMNS = {
    "global_adapter_norm_per_layer",
    "edited_layer_per_client",
    "similarity_per_client",
    "sampled_clients",
    "seed_bundle",
}
_FLOAT_COLUMNS = {"missing_ratio", "global_loss", "personalized_loss", "global_adapter_norm"}


class SchemaError(ValueError):
    pass


def record_row(record: RoundRecord, config: ExperimentConfig) -> dict[str, Any]:
    """Typed row for one round (no wall time: rows must be reproducible)."""
    edit_on = config.strategy == "fedilora" and config.edit.enabled
    return {
        "round": record.round,
        "strategy": record.strategy,
        "missing_ratio": float(record.missing_ratio),
        "global_loss": record.global_loss,
        "personalized_loss": record.personalized_loss,
        "global_adapter_norm": record.global_norm,
        "global_adapter_norm_per_layer": list(record.layer_norms),
        "edited_layer_per_client": (
            {str(k): v for k, v in record.edited_layers().items()} if edit_on else {}
        ),
        "similarity_per_client": {str(k): v for k, v in record.edit_similarities().items()},
        "sampled_clients": list(record.sampled),
        "seed_bundle": dict(vars(config.seeds)),
    }


def _cell(name: str, value: Any) -> str:
    if name in _JSON_COLUMNS:
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    if name in _FLOAT_COLUMNS:
        return repr(float(value))
    return str(value)


def _parse_cell(name: str, text: str) -> Any:
    if name in _JSON_COLUMNS:
        return json.loads(text)
    if name in _FLOAT_COLUMNS:
        return float(text)
    if name == "round":
        return int(text)
    return text


def format_csv_row(row: dict[str, Any]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([_cell(c, row[c]) for c in COLUMNS])
    return buf.getvalue()


def csv_header() -> str:
    buf = io.StringIO()
    buf.write(VERSION_LINE + "\n")
    csv.writer(buf, lineterminator="\n").writerow(COLUMNS)
    return buf.getvalue()


def read_metrics_csv(path: str | Path) -> list[dict[str, Any]]:
    """Parse a metrics CSV, dropping a trailing partial line if the writer was killed mid-row."""
    text = Path(path).read_text(encoding="utf-8")
    if text and not text.endswith("\n"):
        text = text[: text.rfind("\n") + 1]
    lines = text.splitlines(keepends=True)
    if not lines or lines[0].rstrip("\n") != VERSION_LINE:
        raise SchemaError(f"{path}: missing or unsupported version line")
    reader = csv.reader(lines[1:])
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{path}: missing header") from None
    unknown = [c for c in header if c not in COLUMNS]
    if unknown:
        raise SchemaError(f"{path}: unknown columns {unknown}")
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    rows = []
    for cells in reader:
        if len(cells) != len(header):
            raise SchemaError(f"{path}: row {len(rows) + 1} has {len(cells)} cells, expected {len(header)}")
        rows.append({name: _parse_cell(name, cell) for name, cell in zip(header, cells)})
    # a joined comparison file interleaves runs, so order is checked per strategy
    last: dict[str, int] = {}
    for row in rows:
        prev = last.get(row["strategy"])
        if prev is not None and row["round"] <= prev:
            raise SchemaError(f"{path}: rounds are not strictly increasing for {row['strategy']!r}")
        last[row["strategy"]] = row["round"]
    return rows


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class MetricsWriter:
    """Streams rounds to ``metrics.csv`` and ``metrics.json`` in ``out_dir``."""

    def __init__(self, out_dir: str | Path, config: ExperimentConfig, initial_norms: Iterable[float] = ()) -> None:
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.csv_path = self.out_dir / "metrics.csv"
        self.json_path = self.out_dir / "metrics.json"
        self._doc: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "config": config.to_dict(),
            "initial_adapter_norm_per_layer": list(initial_norms),
            "rounds": [],
        }
        self._csv = open(self.csv_path, "w", encoding="utf-8", newline="")
        self._csv.write(csv_header())
        self._flush()
        atomic_write(self.json_path, self._dump())

    def set_initial_norms(self, norms: Iterable[float]) -> None:
        self._doc["initial_adapter_norm_per_layer"] = list(norms)
        atomic_write(self.json_path, self._dump())

    def _dump(self) -> str:
        return json.dumps(self._doc, indent=1, sort_keys=True) + "\n"

    def _flush(self) -> None:
        self._csv.flush()
        os.fsync(self._csv.fileno())

    def write(self, record: RoundRecord) -> None:
        row = record_row(record, self.config)
        self._csv.write(format_csv_row(row))
        self._flush()
        entry = dict(row)
        entry["edits"] = [r.to_dict() for r in record.edits]
        self._doc["rounds"].append(entry)
        atomic_write(self.json_path, self._dump())

    def close(self) -> None:
        if not self._csv.closed:
            self._csv.close()

    def __enter__(self) -> MetricsWriter:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def read_metrics_json(path: str | Path) -> dict[str, Any]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return doc


def save_snapshot(state: ServerState, path: str | Path) -> None:
    """Final adapters: global A/B per layer, merged base deltas and each client's kept adapter."""
    arrays: dict[str, np.ndarray] = {"round": np.array(state.round)}
    for y, pair in enumerate(state.global_adapters.stack):
        arrays[f"global/layer{y}/a"] = pair.a
        arrays[f"global/layer{y}/b"] = pair.b
    for y, d in enumerate(state.base_deltas):
        arrays[f"base/layer{y}/delta"] = d
    for k, model in sorted(state.client_models.items()):
        for y, pair in enumerate(model.stack):
            arrays[f"client{k}/layer{y}/a"] = pair.a
            arrays[f"client{k}/layer{y}/b"] = pair.b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def summarize(result: ExperimentResult) -> dict[str, Any]:
    last = result.records[-1] if result.records else None
    return {
        "strategy": result.config.strategy,
        "final_global_loss": last.global_loss if last else None,
        "final_personalized_loss": last.personalized_loss if last else None,
        "norm_trace": [result.initial_norm] + result.trace("global_norm"),
        "global_loss_trace": result.trace("global_loss"),
        "personalized_loss_trace": result.trace("personalized_loss"),
    }
