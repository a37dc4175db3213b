"""Heterogeneous-rank LoRA adapters and the linear algebra shared by every module.

A layer update is stored as a factor pair ``(a, b)`` with ``a`` of shape
``(rank, in_dim)`` and ``b`` of shape ``(out_dim, rank)``; the dense update is
``b @ a``. Padding and truncation act on the tail of the rank axis so a
dimension index means the same thing at every rank.
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

Matrix = np.ndarray


@dataclass(frozen=True, eq=False)
class LoraPair:
    a: Matrix
    b: Matrix

    def __post_init__(self) -> None:
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"a and b must be 2-D, got {a.shape} and {b.shape}")
        if a.shape[0] != b.shape[1]:
            raise ValueError(f"rank mismatch: a has {a.shape[0]} rows, b has {b.shape[1]} columns")
        if a.shape[0] < 1 or a.shape[1] < 1 or b.shape[0] < 1:
            raise ValueError(f"degenerate LoRA shapes a={a.shape} b={b.shape}")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError("LoRA factors contain non-finite entries")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def in_dim(self) -> int:
        return self.a.shape[1]

    @property
    def out_dim(self) -> int:
        return self.b.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """Shape ``(out_dim, in_dim)`` of the dense update."""
        return (self.out_dim, self.in_dim)

    def copy(self) -> LoraPair:
        return LoraPair(self.a.copy(), self.b.copy())

    def equals(self, other: LoraPair) -> bool:
        """Exact (bitwise-value) equality of both factors."""
        return (
            self.a.shape == other.a.shape
            and self.b.shape == other.b.shape
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
        )


@dataclass(frozen=True, eq=False)
class AdapterStack:
    """One client's adapters: a LoRA pair per adapted layer, all at one rank."""

    layers: tuple[LoraPair, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("an adapter stack needs at least one layer")
        ranks = {pair.rank for pair in layers}
        if len(ranks) != 1:
            raise ValueError(f"all layers of a stack must share one rank, got {sorted(ranks)}")
        object.__setattr__(self, "layers", layers)

    @property
    def rank(self) -> int:
        return self.layers[0].rank

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(pair.shape for pair in self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[LoraPair]:
        return iter(self.layers)

    def __getitem__(self, index: int) -> LoraPair:
        return self.layers[index]

    def replace(self, index: int, pair: LoraPair) -> AdapterStack:
        if not 0 <= index < len(self.layers):
            raise IndexError(f"layer index {index} out of range for {len(self.layers)} layers")
        layers = list(self.layers)
        layers[index] = pair
        return AdapterStack(tuple(layers))

    def deltas(self) -> list[Matrix]:
        return [delta(pair) for pair in self.layers]

    def equals(self, other: AdapterStack) -> bool:
        return len(self) == len(other) and all(p.equals(q) for p, q in zip(self, other))


@dataclass(frozen=True, eq=False)
class GlobalAdapterState:
    """Server-side adapters at the global rank, tagged with the round that produced them."""

    stack: AdapterStack
    round: int = 0

    @property
    def rank(self) -> int:
        return self.stack.rank


def delta(pair: LoraPair) -> Matrix:
    """Dense update ``b @ a``.

    Accumulated one rank-1 term at a time in rank order, so trailing zero
    dimensions add exactly nothing (a BLAS matmul may regroup the sum).
    """
    out = np.zeros(pair.shape)
    for r in range(pair.rank):
        out += np.outer(pair.b[:, r], pair.a[r])
    return out


def zero_pad(pair: LoraPair, target_rank: int) -> LoraPair:
    if target_rank < pair.rank:
        raise ValueError(f"cannot pad to smaller rank ({target_rank} < {pair.rank})")
    extra = target_rank - pair.rank
    if extra == 0:
        return pair
    a = np.vstack([pair.a, np.zeros((extra, pair.in_dim))])
    b = np.hstack([pair.b, np.zeros((pair.out_dim, extra))])
    return LoraPair(a, b)


def truncate(pair: LoraPair, target_rank: int) -> LoraPair:
    if target_rank < 1:
        raise ValueError(f"target rank must be >= 1, got {target_rank}")
    if target_rank > pair.rank:
        raise ValueError(f"cannot truncate to larger rank ({target_rank} > {pair.rank})")
    if target_rank == pair.rank:
        return pair
    return LoraPair(pair.a[:target_rank].copy(), pair.b[:, :target_rank].copy())


def pad_stack(stack: AdapterStack, target_rank: int) -> AdapterStack:
    return AdapterStack(tuple(zero_pad(p, target_rank) for p in stack))


def truncate_stack(stack: AdapterStack, target_rank: int) -> AdapterStack:
    return AdapterStack(tuple(truncate(p, target_rank) for p in stack))


def frobenius_norm(x: Matrix) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.sum(x * x)))


def cosine_similarity(x: Matrix, y: Matrix) -> float:
    """Frobenius cosine ``<x, y>_F / (|x|_F |y|_F)`` of two same-shape matrices.

    Raises ``ValueError`` when either input is all zeros; callers pick the
    fallback.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    nx, ny = frobenius_norm(x), frobenius_norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("undefined similarity for zero matrix")
    if np.array_equal(x, y):
        return 1.0  # exact, so a blend at full similarity is the identity
    value = float(np.sum(x * y)) / (nx * ny)
    return min(1.0, max(-1.0, value))


def stack_norm(stack: AdapterStack) -> float:
    """L2 norm of every A and B entry of the stack taken together."""
    total = sum(frobenius_norm(p.a) ** 2 + frobenius_norm(p.b) ** 2 for p in stack)
    return float(np.sqrt(total))


def layer_norms(stack: AdapterStack) -> list[float]:
    return [float(np.sqrt(frobenius_norm(p.a) ** 2 + frobenius_norm(p.b) ** 2)) for p in stack]


def init_stack(
    rng: np.random.Generator, layer_shapes: Sequence[tuple[int, int]], rank: int
) -> AdapterStack:
    """Standard LoRA start: Gaussian ``a`` scaled by ``1/sqrt(in_dim)``, zero ``b``."""
    layers = []
    for out_dim, in_dim in layer_shapes:
        a = rng.standard_normal((rank, in_dim)) / np.sqrt(in_dim)
        layers.append(LoraPair(a, np.zeros((out_dim, rank))))
    return AdapterStack(tuple(layers))
