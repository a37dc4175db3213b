"""Client-side layer-wise LoRA editing.

After local training a client compares each layer's A matrix with the global A
it received, picks the least similar layer(s) and pulls them toward the global
counterpart with blend ``gamma * local + (1 - gamma) * global``, where gamma is
that layer's cosine similarity clamped to ``[0, 1]``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

from .lora import AdapterStack, GlobalAdapterState, LoraPair, cosine_similarity, truncate_stack

EDIT_MODES = ("a_only", "b_only", "both", "none")
GAMMA_OVERRIDES = (None, 0.0, 0.5)


@dataclass(frozen=True)
class EditConfig:
    mode: str = "a_only"
    k: int = 1
    gamma_override: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in EDIT_MODES:
            raise ValueError(f"edit_mode must be one of {EDIT_MODES}, got {self.mode!r}")
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 0:
            raise ValueError(f"edit_k must be a nonnegative integer, got {self.k!r}")
        if self.gamma_override not in GAMMA_OVERRIDES:
            raise ValueError(f"gamma_override must be one of {GAMMA_OVERRIDES}, got {self.gamma_override!r}")

    @property
    def enabled(self) -> bool:
        return self.mode != "none" and self.k > 0


@dataclass
class EditReport:
    client_id: int
    round: int
    similarities: list[float]
    selected: list[int] = field(default_factory=list)
    gammas: list[float] = field(default_factory=list)
    mode: str = "none"

    @property
    def edited_layer(self) -> int | None:
        return self.selected[0] if self.selected else None

    @property
    def gamma(self) -> float | None:
        return self.gammas[0] if self.gammas else None

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "round": self.round,
            "similarities": list(self.similarities),
            "selected": list(self.selected),
            "gammas": list(self.gammas),
            "mode": self.mode,
        }


def _aligned(global_prev: GlobalAdapterState | AdapterStack, rank: int) -> AdapterStack:
    stack = global_prev.stack if isinstance(global_prev, GlobalAdapterState) else global_prev
    return stack if stack.rank == rank else truncate_stack(stack, rank)


def layer_similarities(
    local: AdapterStack, global_prev: GlobalAdapterState | AdapterStack, client_rank: int | None = None
) -> list[float]:
    """Cosine similarity of each layer's local A with the (rank-aligned) global A.

    A layer where either A is all zeros scores 1.0 so it is never chosen.
    """
    ref = _aligned(global_prev, local.rank if client_rank is None else client_rank)
    if len(ref) != len(local):
        raise ValueError(f"layer count mismatch: local {len(local)} vs global {len(ref)}")
    sims = []
    for mine, theirs in zip(local, ref):
        try:
            sims.append(cosine_similarity(mine.a, theirs.a))
        except ValueError as exc:
            if "zero matrix" not in str(exc):
                raise
            sims.append(1.0)
    return sims


def select_layers(similarities: Sequence[float], k: int = 1) -> list[int]:
    if not 0 <= k <= len(similarities):
        raise ValueError(f"k={k} outside [0, {len(similarities)}]")
    # stable sort: equal similarities keep ascending layer order
    order = sorted(range(len(similarities)), key=lambda i: similarities[i])
    return order[:k]


def apply_edit(
    local: AdapterStack,
    global_prev: GlobalAdapterState | AdapterStack,
    layer: int,
    gamma: float,
    mode: str = "a_only",
) -> AdapterStack:
    if not 0 <= layer < len(local):
        raise IndexError(f"layer index {layer} out of range for {len(local)} layers")
    if mode not in EDIT_MODES:
        raise ValueError(f"unknown edit mode {mode!r}")
    if mode == "none":
        return local
    gamma = min(1.0, max(0.0, float(gamma)))
    if gamma == 1.0:
        return local
    ref = _aligned(global_prev, local.rank)[layer]
    pair = local[layer]
    a, b = pair.a, pair.b
    if mode in ("a_only", "both"):
        a = gamma * pair.a + (1.0 - gamma) * ref.a
    if mode in ("b_only", "both"):
        b = gamma * pair.b + (1.0 - gamma) * ref.b
    return local.replace(layer, LoraPair(a, b))


def edit_client(
    local: AdapterStack,
    global_prev: GlobalAdapterState | AdapterStack,
    config: EditConfig,
    client_id: int = 0,
    round_index: int = 1,
) -> tuple[AdapterStack, EditReport]:
    """Similarity scan, Min-k selection and blending for one client.

    Similarities are always computed from A; mode "both" reuses A's gamma for B.
    """
    sims = layer_similarities(local, global_prev)
    report = EditReport(client_id=client_id, round=round_index, similarities=sims, mode=config.mode)
    if not config.enabled:
        report.mode = "none"
        return local, report
    edited = local
    for y in select_layers(sims, min(config.k, len(sims))):
        gamma = config.gamma_override if config.gamma_override is not None else sims[y]
        gamma = min(1.0, max(0.0, float(gamma)))
        edited = apply_edit(edited, global_prev, y, gamma, config.mode)
        report.selected.append(y)
        report.gammas.append(gamma)
    return edited, report
