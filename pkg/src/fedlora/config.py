"""Experiment configuration: dataclasses, validation and YAML/JSON loading.

A config file is a flat mapping of the top-level keys below, plus two nested
mappings, ``seeds`` and ``task``. Unknown keys are rejected with the line they
appear on.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .aggregation import STRATEGIES
from .editing import EditConfig
from .toytask import OPTIMIZERS, TaskConfig

DEFAULT_RANKS = (4, 4, 8, 8, 12, 16, 16, 24, 32, 32)


class ConfigError(ValueError):
    """Invalid experiment configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None) -> None:
        self.message = message
        self.line = line
        self.source = source
        super().__init__(str(self))

    def __str__(self) -> str:
        where = self.source or "<config>"
        if self.line is not None:
            return f"{where}:{self.line}: {self.message}"
        return f"{where}: {self.message}"


@dataclass(frozen=True)
class SeedBundle:
    data: int = 0
    init: int = 1
    sampling: int = 2
    training: int = 3

    @classmethod
    def from_single(cls, seed: int) -> SeedBundle:
        return cls(data=seed, init=seed, sampling=seed, training=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 10
    sample_rate: float = 0.4
    rounds: int = 15
    ranks: tuple[int, ...] = DEFAULT_RANKS
    strategy: str = "fedilora"
    missing_ratio: float = 0.0
    edit_mode: str = "a_only"
    edit_k: int = 1
    gamma_override: float | None = None
    local_steps: int = 20
    lr: float = 0.03
    batch_size: int = 16
    optimizer: str = "sgd"
    seeds: SeedBundle = field(default_factory=SeedBundle)
    task: TaskConfig = field(default_factory=TaskConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ranks", tuple(self.ranks))
        _positive_int("n_clients", self.n_clients)
        _nonneg_int("rounds", self.rounds)
        _positive_int("local_steps", self.local_steps)
        _positive_int("batch_size", self.batch_size)
        if not (isinstance(self.sample_rate, (int, float)) and 0.0 < self.sample_rate <= 1.0):
            raise ValueError(f"sample_rate must be in (0, 1], got {self.sample_rate!r}")
        if not (isinstance(self.missing_ratio, (int, float)) and 0.0 <= self.missing_ratio <= 1.0):
            raise ValueError(f"missing_ratio must be in [0, 1], got {self.missing_ratio!r}")
        if not (isinstance(self.lr, (int, float)) and self.lr >= 0):
            raise ValueError(f"lr must be >= 0, got {self.lr!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if len(self.ranks) != self.n_clients:
            raise ValueError(f"ranks lists {len(self.ranks)} clients but n_clients is {self.n_clients}")
        for r in self.ranks:
            _positive_int("ranks entry", r)
        edit = self.edit  # validates mode/k/gamma_override
        if edit.k > self.task.n_layers:
            raise ValueError(f"edit_k={edit.k} exceeds the number of layers ({self.task.n_layers})")

    @property
    def edit(self) -> EditConfig:
        return EditConfig(self.edit_mode, self.edit_k, self.gamma_override)

    @property
    def global_rank(self) -> int:
        return max(self.ranks)

    @property
    def clients_per_round(self) -> int:
        return max(1, int(math.ceil(round(self.sample_rate * self.n_clients, 9))))

    def replace(self, **changes: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["ranks"] = list(self.ranks)
        return out


def _positive_int(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


def _nonneg_int(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ValueError(f"{name} must be a nonnegative integer, got {value!r}")


_TOP_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_SEED_KEYS = {f.name for f in dataclasses.fields(SeedBundle)}
_TASK_KEYS = {f.name for f in dataclasses.fields(TaskConfig)}


def _key_lines(text: str) -> dict[str, int]:
    """Map ``key`` and ``section.key`` to the 1-based line where they appear."""
    lines: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for key_node, value_node in root.value:
        key = str(key_node.value)
        lines[key] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for sub_key, _ in value_node.value:
                lines[f"{key}.{sub_key.value}"] = sub_key.start_mark.line + 1
    return lines


def _guess_key(message: str, lines: dict[str, int]) -> int | None:
    # longest match first so "task.n_layers" wins over "n_layers"
    for key in sorted(lines, key=len, reverse=True):
        if key in message:
            return lines[key]
    return None


def config_from_dict(raw: Any, lines: dict[str, int] | None = None, source: str | None = None) -> ExperimentConfig:
    lines = lines or {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown key {key!r}", lines.get(key), source)
    values = dict(raw)
    for section, allowed, cls in (("seeds", _SEED_KEYS, SeedBundle), ("task", _TASK_KEYS, TaskConfig)):
        if section not in values:
            continue
        sub = values[section]
        if not isinstance(sub, dict):
            raise ConfigError(f"{section} must be a mapping", lines.get(section), source)
        extra = set(sub) - allowed
        if extra:
            key = sorted(extra)[0]
            raise ConfigError(f"unknown key {section}.{key!r}", lines.get(f"{section}.{key}"), source)
        try:
            values[section] = cls(**sub)
        except (TypeError, ValueError) as exc:
            msg = str(exc)
            line = _guess_key(f"{section}.{msg}", {k: v for k, v in lines.items() if k.startswith(section + ".")})
            raise ConfigError(msg, line or lines.get(section), source) from None
    if "ranks" in values and not isinstance(values["ranks"], (list, tuple)):
        raise ConfigError("ranks must be a list of integers", lines.get("ranks"), source)
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        raise ConfigError(msg, _guess_key(msg, lines), source) from None


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML (or JSON) config file.

    Raises ``FileNotFoundError`` for a missing file and ``ConfigError`` for
    anything malformed.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"parse error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, str(path)) from None
    if raw is None:
        raw = {}
    return config_from_dict(raw, _key_lines(text), str(path))


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
