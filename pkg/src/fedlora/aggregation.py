"""Server-side aggregation of heterogeneous-rank LoRA uploads.

Four strategies are exposed by name:

``fedilora``
    Dimension-wise reweighting. Each rank dimension ``d`` is averaged only over
    the clients whose rank covers it, with data-size weights renormalized over
    those clients. Rows of A and columns of B use the same weights.
``hetlora``
    Zero-pad every upload to the global rank and take one weighted average,
    weights proportional to each client's per-layer ``|B A|_F``. Padded zeros
    dilute the high dimensions.
``flora``
    Stack the (scaled) factors so that the product is the data-size-weighted
    sum of the dense updates. Only that dense sum is kept.
``fedavg``
    Data-size-weighted average of the uploaded factors (zero-padded when ranks
    differ).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .lora import AdapterStack, GlobalAdapterState, LoraPair, Matrix, delta, frobenius_norm, zero_pad

STRATEGIES = ("fedilora", "hetlora", "flora", "fedavg")

# strategies whose global state is a LoRA pair that gets truncated back to clients
ADAPTER_STRATEGIES = ("fedilora", "hetlora", "fedavg")
# strategies that fold a dense update into the base weights instead
DELTA_STRATEGIES = ("flora",)


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: int
    data_size: int
    stack: AdapterStack

    def __post_init__(self) -> None:
        if self.data_size < 1:
            raise ValueError(f"client {self.client_id}: data_size must be >= 1, got {self.data_size}")

    @property
    def rank(self) -> int:
        return self.stack.rank


@dataclass(frozen=True)
class DimensionWeightPlan:
    """Per-dimension contributor weights; index 0 is rank dimension 1.

    An empty entry marks a dimension that no sampled client covers.
    """

    weights: tuple[tuple[tuple[int, float], ...], ...]

    @property
    def global_rank(self) -> int:
        return len(self.weights)

    def contributors(self, d: int) -> list[int]:
        return [cid for cid, _ in self.weights[d]]

    def has_contributor(self, d: int) -> bool:
        return bool(self.weights[d])


def _require(updates: Sequence[ClientUpdate]) -> None:
    if not updates:
        raise ValueError("no clients sampled")


def fedavg_weights(updates: Sequence[ClientUpdate]) -> list[float]:
    _require(updates)
    total = float(sum(u.data_size for u in updates))
    return [u.data_size / total for u in updates]


def build_dimension_plan(
    updates: Sequence[ClientUpdate],
    global_rank: int,
    weights: Sequence[float] | None = None,
) -> DimensionWeightPlan:
    """Mask-and-renormalize weights for each of the ``global_rank`` dimensions."""
    _require(updates)
    max_rank = max(u.rank for u in updates)
    if global_rank < max_rank:
        raise ValueError(f"global rank {global_rank} is below the largest client rank {max_rank}")
    p = list(fedavg_weights(updates) if weights is None else weights)
    plan = []
    for d in range(global_rank):
        live = [(u.client_id, pk) for u, pk in zip(updates, p) if u.rank > d]
        mass = sum(pk for _, pk in live)
        plan.append(tuple((cid, pk / mass) for cid, pk in live) if mass > 0 else ())
    return DimensionWeightPlan(tuple(plan))


def aggregate_dimension_wise(
    updates: Sequence[ClientUpdate],
    previous_global: GlobalAdapterState,
    global_rank: int,
) -> GlobalAdapterState:
    _require(updates)
    if previous_global.rank != global_rank:
        raise ValueError(f"previous global has rank {previous_global.rank}, expected {global_rank}")
    plan = build_dimension_plan(updates, global_rank)
    by_id = {u.client_id: u for u in updates}
    if len(by_id) != len(updates):
        raise ValueError("duplicate client ids in one round")

    layers = []
    for y, prev in enumerate(previous_global.stack):
        a = prev.a.copy()
        b = prev.b.copy()
        for d in range(global_rank):
            if not plan.has_contributor(d):
                continue
            row = np.zeros(prev.in_dim)
            col = np.zeros(prev.out_dim)
            # fixed summation order: plan order == upload order
            for cid, w in plan.weights[d]:
                pair = by_id[cid].stack[y]
                row += w * pair.a[d]
                col += w * pair.b[:, d]
            a[d] = row
            b[:, d] = col
        layers.append(LoraPair(a, b))
    return GlobalAdapterState(AdapterStack(tuple(layers)), previous_global.round + 1)


def aggregate_zero_pad(
    updates: Sequence[ClientUpdate],
    global_rank: int,
    layer_weights: Sequence[Sequence[float]],
    round_index: int = 0,
) -> GlobalAdapterState:
    """Weighted average of zero-padded factors, one weight vector per layer."""
    _require(updates)
    n_layers = len(updates[0].stack)
    layers = []
    for y in range(n_layers):
        padded = [zero_pad(u.stack[y], global_rank) for u in updates]
        w = layer_weights[y]
        a = sum(wk * p.a for wk, p in zip(w, padded))
        b = sum(wk * p.b for wk, p in zip(w, padded))
        layers.append(LoraPair(a, b))
    return GlobalAdapterState(AdapterStack(tuple(layers)), round_index)


def sparsity_weights(updates: Sequence[ClientUpdate]) -> list[list[float]]:
    """Per-layer weights proportional to ``|B_k A_k|_F``; uniform when every norm is zero."""
    _require(updates)
    out = []
    for y in range(len(updates[0].stack)):
        norms = [frobenius_norm(delta(u.stack[y])) for u in updates]
        total = sum(norms)
        if total == 0.0:
            out.append([1.0 / len(updates)] * len(updates))
        else:
            out.append([n / total for n in norms])
    return out


def aggregate_hetlora(
    updates: Sequence[ClientUpdate],
    global_rank: int,
    round_index: int = 0,
    weighting: str = "sparsity",
) -> GlobalAdapterState:
    """Zero-pad baseline.

    ``weighting="sparsity"`` is the norm-weighted baseline; ``"data_size"``
    uses the FedAvg weights for every layer (the plain zero-pad FedAvg).
    """
    if weighting == "sparsity":
        w = sparsity_weights(updates)
    elif weighting == "data_size":
        p = fedavg_weights(updates)
        w = [p] * len(updates[0].stack)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return aggregate_zero_pad(updates, global_rank, w, round_index)


def aggregate_fedavg(
    updates: Sequence[ClientUpdate], global_rank: int, round_index: int = 0
) -> GlobalAdapterState:
    return aggregate_hetlora(updates, global_rank, round_index, weighting="data_size")


def aggregate_fedavg_delta(updates: Sequence[ClientUpdate]) -> list[Matrix]:
    """``sum_k p_k B_k A_k`` per layer."""
    p = fedavg_weights(updates)
    n_layers = len(updates[0].stack)
    return [sum(pk * delta(u.stack[y]) for pk, u in zip(p, updates)) for y in range(n_layers)]


def stack_factors(updates: Sequence[ClientUpdate], layer: int) -> LoraPair:
    """Concatenate ``sqrt(p_k)``-scaled factors of one layer into a rank ``sum r_k`` pair."""
    p = fedavg_weights(updates)
    scale = [np.sqrt(pk) for pk in p]
    a = np.vstack([s * u.stack[layer].a for s, u in zip(scale, updates)])
    b = np.hstack([s * u.stack[layer].b for s, u in zip(scale, updates)])
    return LoraPair(a, b)


def aggregate_flora(updates: Sequence[ClientUpdate]) -> list[Matrix]:
    _require(updates)
    return [delta(stack_factors(updates, y)) for y in range(len(updates[0].stack))]
