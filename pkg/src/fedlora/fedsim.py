"""Round orchestration for federated LoRA fine-tuning on the toy task.

One round: sample clients, hand each its starting adapter, train locally,
optionally edit, aggregate the uploads, and record telemetry. Every random
draw comes from a generator keyed by (seed, stream tag, round, client), so
changing the strategy never changes partitions, sampling or initialization.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import aggregation as agg
from .config import ExperimentConfig
from .editing import EditReport, edit_client, layer_similarities
from .lora import AdapterStack, GlobalAdapterState, Matrix, frobenius_norm, init_stack, layer_norms, truncate_stack
from .toytask import Federation, evaluate, generate_federation, local_train

log = logging.getLogger(__name__)

_INIT_STREAM = 0x1417
_FRESH_STREAM = 0xF4E5
_SAMPLE_STREAM = 0x5A39
_TRAIN_STREAM = 0x7EA1


@dataclass(frozen=True, eq=False)
class ClientModel:
    """The model a client keeps: its adapter on top of optional merged deltas."""

    stack: AdapterStack
    base: tuple[Matrix, ...] | None = None


@dataclass(frozen=True, eq=False)
class ServerState:
    global_adapters: GlobalAdapterState
    base_deltas: tuple[Matrix, ...]
    client_models: dict[int, ClientModel]
    round: int = 0


@dataclass
class RoundRecord:
    round: int
    strategy: str
    missing_ratio: float
    sampled: list[int]
    layer_norms: list[float]
    global_norm: float
    global_loss: float
    personalized_loss: float
    edits: list[EditReport] = field(default_factory=list)
    wall_time: float = 0.0

    def edited_layers(self) -> dict[int, int | None]:
        return {r.client_id: r.edited_layer for r in self.edits}

    def edit_similarities(self) -> dict[int, float]:
        """Minimum layer similarity per reporting client."""
        return {r.client_id: min(r.similarities) for r in self.edits}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    initial_layer_norms: list[float]
    initial_norm: float
    records: list[RoundRecord]
    state: ServerState

    def trace(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def initial_state(config: ExperimentConfig, federation: Federation) -> ServerState:
    shapes = federation.network.layer_shapes
    stack = init_stack(_rng(config.seeds.init, _INIT_STREAM), shapes, config.global_rank)
    global_adapters = GlobalAdapterState(stack, 0)
    clients = {
        k: ClientModel(truncate_stack(stack, r))
        for k, r in enumerate(config.ranks)
    }
    zeros = tuple(np.zeros(s) for s in shapes)
    return ServerState(global_adapters, zeros, clients, 0)


def sample_clients(config: ExperimentConfig, t: int) -> list[int]:
    """Clients drawn without replacement for round ``t``, ascending by id."""
    rng = _rng(config.seeds.sampling, _SAMPLE_STREAM, t)
    chosen = rng.choice(config.n_clients, size=config.clients_per_round, replace=False)
    return sorted(int(c) for c in chosen)


def distribute(state: ServerState, config: ExperimentConfig, client_id: int, t: int) -> ClientModel:
    """Starting model for a sampled client.

    Adapter strategies truncate the global adapter to the client's rank;
    ``flora`` hands out merged deltas plus a freshly initialized adapter.
    """
    rank = config.ranks[client_id]
    if config.strategy in agg.ADAPTER_STRATEGIES:
        return ClientModel(truncate_stack(state.global_adapters.stack, rank))
    shapes = state.global_adapters.stack.layer_shapes
    fresh = init_stack(_rng(config.seeds.init, _FRESH_STREAM, t, client_id), shapes, rank)
    return ClientModel(fresh, state.base_deltas)


def evaluate_global(state: ServerState, data, federation: Federation, strategy: str) -> float:
    if strategy in agg.ADAPTER_STRATEGIES:
        return evaluate(federation.network, state.global_adapters.stack, data, base=state.base_deltas)
    return evaluate(federation.network, None, data, base=state.base_deltas)


def weighted_mean(values: Sequence[float], sizes: Sequence[int]) -> float:
    total = float(sum(sizes))
    return float(sum(v * s / total for v, s in zip(values, sizes)))


def evaluate_personalized(state: ServerState, federation: Federation) -> float:
    """Data-size-weighted mean of each client's test loss under the model it keeps."""
    losses = []
    for c in federation.clients:
        kept = state.client_models[c.client_id]
        losses.append(evaluate(federation.network, kept.stack, c.test, base=kept.base))
    return weighted_mean(losses, federation.data_sizes)


def run_round(
    state: ServerState, config: ExperimentConfig, federation: Federation, t: int
) -> tuple[ServerState, RoundRecord]:
    started = time.perf_counter()
    net = federation.network
    sampled = sample_clients(config, t)
    uploads: list[agg.ClientUpdate] = []
    reports: list[EditReport] = []
    models = dict(state.client_models)
    has_adapters = config.strategy in agg.ADAPTER_STRATEGIES

    for k in sampled:
        start = distribute(state, config, k, t)
        data = federation.clients[k]
        trained, trace = local_train(
            net, start.stack, data.train, config.local_steps, config.lr, config.batch_size,
            seed=[config.seeds.training, _TRAIN_STREAM, t, k], base=start.base,
            optimizer=config.optimizer,
        )
        log.debug("round %d client %d loss %.5f -> %.5f", t, k, trace[0], trace[-1])
        kept = trained
        if has_adapters and t >= 1:
            if config.strategy == "fedilora":
                kept, report = edit_client(trained, state.global_adapters, config.edit, k, t)
            else:
                sims = layer_similarities(trained, state.global_adapters)
                report = EditReport(k, t, sims)
            reports.append(report)
        models[k] = ClientModel(kept, start.base)
        uploads.append(agg.ClientUpdate(k, data.data_size, kept))

    global_adapters = state.global_adapters
    base_deltas = state.base_deltas
    if config.strategy == "fedilora":
        global_adapters = agg.aggregate_dimension_wise(uploads, global_adapters, config.global_rank)
    elif config.strategy == "hetlora":
        global_adapters = agg.aggregate_hetlora(uploads, config.global_rank, t + 1)
    elif config.strategy == "fedavg":
        global_adapters = agg.aggregate_fedavg(uploads, config.global_rank, t + 1)
    else:
        merged = agg.aggregate_flora(uploads)
        base_deltas = tuple(b + d for b, d in zip(base_deltas, merged))
        global_adapters = replace(global_adapters, round=t + 1)

    new_state = ServerState(global_adapters, base_deltas, models, t + 1)
    if has_adapters:
        norms = layer_norms(global_adapters.stack)
    else:
        norms = [frobenius_norm(d) for d in merged]
    record = RoundRecord(
        round=t,
        strategy=config.strategy,
        missing_ratio=config.missing_ratio,
        sampled=sampled,
        layer_norms=norms,
        global_norm=math.sqrt(sum(n * n for n in norms)),
        global_loss=evaluate_global(new_state, federation.global_test, federation, config.strategy),
        personalized_loss=evaluate_personalized(new_state, federation),
        edits=reports,
        wall_time=time.perf_counter() - started,
    )
    log.info("round %d %s global=%.5f personalized=%.5f norm=%.4f",
             t, config.strategy, record.global_loss, record.personalized_loss, record.global_norm)
    return new_state, record


def build_federation(config: ExperimentConfig) -> Federation:
    return generate_federation(config.seeds.data, config.n_clients, config.task, config.missing_ratio)


def run_experiment(
    config: ExperimentConfig,
    federation: Federation | None = None,
    on_record: Callable[[RoundRecord], None] | None = None,
    on_start: Callable[[list[float]], None] | None = None,
) -> ExperimentResult:
    """Run ``config.rounds`` rounds; callbacks see the initial norms and every record as produced."""
    federation = federation or build_federation(config)
    if len(federation.clients) != config.n_clients:
        raise ValueError(f"federation has {len(federation.clients)} clients, config expects {config.n_clients}")
    state = initial_state(config, federation)
    if config.strategy in agg.ADAPTER_STRATEGIES:
        init_norms = layer_norms(state.global_adapters.stack)
    else:
        init_norms = [0.0] * len(state.base_deltas)
    if on_start is not None:
        on_start(init_norms)
    records = []
    for t in range(config.rounds):
        state, record = run_round(state, config, federation, t)
        records.append(record)
        if on_record is not None:
            on_record(record)
    return ExperimentResult(config, init_norms, math.sqrt(sum(n * n for n in init_norms)), records, state)
