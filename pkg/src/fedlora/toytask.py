"""Desk-scale multimodal task: a frozen tanh MLP with LoRA on every layer.

Each sample has two modality vectors (slot "a" ~ image, slot "b" ~ text). The
regression target mixes linear read-outs of both slots with a masked
elementwise cross term, so neither slot alone determines it. Missing
modalities are simulated on training splits by zeroing one slot and clearing
its presence flag.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lora import AdapterStack, LoraPair, Matrix

TRAIN_FRACTION = 0.8

# stream tags keep the per-purpose RNGs independent of each other
_DATA_STREAM = 0xD47A
_MISSING_STREAM = 0x5EED


class DivergenceError(RuntimeError):
    """Local training produced a non-finite loss."""


@dataclass(frozen=True)
class TaskConfig:
    modality_dim: int = 8
    hidden_width: int = 16
    n_layers: int = 6
    target_dim: int = 4
    total_samples: int = 2200
    min_subset_size: int = 20
    size_concentration: float = 2.0
    weight_gain: float = 1.0
    head_gain: float = 2.0
    cross_scale: float = 0.5
    label_noise: float = 0.0

    def __post_init__(self) -> None:
        for name in ("modality_dim", "hidden_width", "n_layers", "target_dim", "min_subset_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"task.{name} must be a positive integer, got {value!r}")
        if self.size_concentration <= 0:
            raise ValueError("task.size_concentration must be > 0")
        if self.label_noise < 0:
            raise ValueError("task.label_noise must be >= 0")

    @property
    def input_dim(self) -> int:
        return 2 * self.modality_dim

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = [(self.hidden_width, self.input_dim)]
        shapes += [(self.hidden_width, self.hidden_width)] * (self.n_layers - 1)
        return shapes


def _frozen(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    x.flags.writeable = False
    return x


@dataclass(frozen=True, eq=False)
class FrozenNetwork:
    weights: tuple[Matrix, ...]
    biases: tuple[np.ndarray, ...]
    head: Matrix

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for y in range(1, len(self.weights)):
            if self.weights[y].shape[1] != self.weights[y - 1].shape[0]:
                raise ValueError(f"layer {y} input width does not match layer {y - 1} output")
        for w, bias in zip(self.weights, self.biases):
            if bias.shape != (w.shape[0],):
                raise ValueError(f"bias shape {bias.shape} does not match weight {w.shape}")
        if self.head.shape[1] != self.weights[-1].shape[0]:
            raise ValueError("head does not match last layer width")
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        object.__setattr__(self, "head", _frozen(self.head))

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def build_network(rng: np.random.Generator, task: TaskConfig) -> FrozenNetwork:
    weights, biases = [], []
    for out_dim, in_dim in task.layer_shapes:
        weights.append(task.weight_gain * rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim))
        biases.append(0.1 * rng.standard_normal(out_dim))
    head = task.head_gain * rng.standard_normal((task.target_dim, task.hidden_width)) / np.sqrt(task.hidden_width)
    return FrozenNetwork(tuple(weights), tuple(biases), head)


@dataclass(frozen=True)
class MultimodalSample:
    modality_a: np.ndarray
    modality_b: np.ndarray
    present_a: bool
    present_b: bool
    target: np.ndarray


@dataclass(frozen=True, eq=False)
class MultimodalData:
    """Batch of samples, one row each; ``index`` holds global sample ids."""

    a: np.ndarray
    b: np.ndarray
    present_a: np.ndarray
    present_b: np.ndarray
    target: np.ndarray
    index: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.index)
        for name in ("a", "b", "present_a", "present_b", "target"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} has {len(getattr(self, name))} rows, expected {n}")
        if n and not np.all(self.present_a | self.present_b):
            raise ValueError("every sample needs at least one modality")

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> MultimodalSample:
        return MultimodalSample(
            self.a[i], self.b[i], bool(self.present_a[i]), bool(self.present_b[i]), self.target[i]
        )

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.a, self.b])

    def subset(self, rows: np.ndarray) -> MultimodalData:
        return MultimodalData(
            self.a[rows], self.b[rows], self.present_a[rows], self.present_b[rows],
            self.target[rows], self.index[rows],
        )

    @property
    def n_missing(self) -> int:
        return int(np.sum(~(self.present_a & self.present_b)))

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}/{name}": getattr(self, name)
            for name in ("a", "b", "present_a", "present_b", "target", "index")
        }

    @classmethod
    def from_arrays(cls, arrays, prefix: str) -> MultimodalData:
        return cls(**{
            name: np.asarray(arrays[f"{prefix}/{name}"])
            for name in ("a", "b", "present_a", "present_b", "target", "index")
        })


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    train: MultimodalData
    test: MultimodalData
    missing_ratio: float = 0.0
    seed: int = 0

    @property
    def data_size(self) -> int:
        return len(self.train)


@dataclass(frozen=True, eq=False)
class LabelRule:
    map_a: Matrix
    map_b: Matrix
    cross: Matrix
    cross_mask: np.ndarray
    cross_scale: float

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        mixed = (a * self.cross_mask) * (b * self.cross_mask)
        return a @ self.map_a.T + b @ self.map_b.T + self.cross_scale * (mixed @ self.cross.T)


def make_label_rule(rng: np.random.Generator, task: TaskConfig) -> LabelRule:
    d, o = task.modality_dim, task.target_dim
    mask = rng.random(d) < 0.5
    if not mask.any():
        mask[rng.integers(d)] = True
    return LabelRule(
        map_a=rng.standard_normal((o, d)) / np.sqrt(d),
        map_b=rng.standard_normal((o, d)) / np.sqrt(d),
        cross=rng.standard_normal((o, d)) / np.sqrt(d),
        cross_mask=mask.astype(np.float64),
        cross_scale=task.cross_scale,
    )


@dataclass(frozen=True, eq=False)
class Federation:
    clients: tuple[ClientDataset, ...]
    global_test: MultimodalData
    network: FrozenNetwork
    seed: int
    missing_ratio: float = 0.0

    @property
    def data_sizes(self) -> list[int]:
        return [c.data_size for c in self.clients]


def _subset_sizes(rng: np.random.Generator, n_subsets: int, task: TaskConfig) -> list[int]:
    spare = task.total_samples - n_subsets * task.min_subset_size
    if spare < 0:
        raise ValueError(
            f"total_samples={task.total_samples} cannot give {n_subsets} subsets of at least {task.min_subset_size}"
        )
    shares = rng.dirichlet(np.full(n_subsets, task.size_concentration))
    extra = np.floor(shares * spare).astype(int)
    # leftover from flooring goes to the largest shares, deterministically
    for i in np.argsort(-shares, kind="stable")[: spare - int(extra.sum())]:
        extra[i] += 1
    return [task.min_subset_size + int(e) for e in extra]


def missing_count(ratio: float, n: int) -> int:
    # rounding guard so e.g. 0.7 * 10 is 7, not 8
    return int(math.ceil(round(ratio * n, 9)))


def inject_missing(dataset: ClientDataset, ratio: float, seed: int) -> ClientDataset:
    """Drop one modality (uniform choice) from ``ceil(ratio * n)`` training samples.

    Selection is the prefix of ``default_rng(seed).permutation(n)``; the
    modality choices are the next ``m`` draws of ``integers(0, 2)`` from the
    same generator (0 drops slot a, 1 drops slot b). Test splits are untouched.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"missing ratio must be in [0, 1], got {ratio}")
    train = dataset.train
    if train.n_missing:
        raise ValueError("inject_missing expects a fully-modal training split")
    n = len(train)
    m = missing_count(ratio, n)
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(n)[:m]
    drop_b = rng.integers(0, 2, size=m).astype(bool)
    a, b = train.a.copy(), train.b.copy()
    pa, pb = train.present_a.copy(), train.present_b.copy()
    rows_a = chosen[~drop_b]
    rows_b = chosen[drop_b]
    a[rows_a], pa[rows_a] = 0.0, False
    b[rows_b], pb[rows_b] = 0.0, False
    corrupted = MultimodalData(a, b, pa, pb, train.target, train.index)
    return ClientDataset(dataset.client_id, corrupted, dataset.test, ratio, seed)


def _make_data(rng: np.random.Generator, index: np.ndarray, rule: LabelRule, task: TaskConfig) -> MultimodalData:
    n = len(index)
    a = rng.standard_normal((n, task.modality_dim))
    b = rng.standard_normal((n, task.modality_dim))
    target = rule(a, b)
    if task.label_noise > 0:
        target = target + task.label_noise * rng.standard_normal(target.shape)
    ones = np.ones(n, dtype=bool)
    return MultimodalData(a, b, ones, ones.copy(), target, index)


def generate_federation(
    seed: int,
    n_clients: int = 10,
    task: TaskConfig | None = None,
    missing_ratio: float = 0.0,
) -> Federation:
    """Build the frozen network, the label rule and ``n_clients + 1`` disjoint subsets.

    The last subset is the global test set. Client subsets are split 8:2 into
    train/test, and ``missing_ratio`` is injected into each train split.
    """
    task = task or TaskConfig()
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    rng = np.random.default_rng([seed, _DATA_STREAM])
    network = build_network(rng, task)
    rule = make_label_rule(rng, task)
    sizes = _subset_sizes(rng, n_clients + 1, task)
    pool = _make_data(rng, np.arange(sum(sizes)), rule, task)
    offsets = np.cumsum([0] + sizes)

    clients = []
    for k in range(n_clients):
        rows = np.arange(offsets[k], offsets[k + 1])
        rows = rows[rng.permutation(len(rows))]
        n_train = int(round(TRAIN_FRACTION * len(rows)))
        base = ClientDataset(k, pool.subset(rows[:n_train]), pool.subset(rows[n_train:]), 0.0, seed)
        missing_seed = int(np.random.default_rng([seed, _MISSING_STREAM, k]).integers(2**63))
        clients.append(inject_missing(base, missing_ratio, missing_seed))
    global_test = pool.subset(np.arange(offsets[n_clients], offsets[n_clients + 1]))
    return Federation(tuple(clients), global_test, network, seed, missing_ratio)


def save_federation(federation: Federation, path: str | Path) -> None:
    """Write a federation snapshot as a single ``.npz`` archive (see README for keys)."""
    arrays: dict[str, np.ndarray] = {
        "meta/seed": np.array(federation.seed),
        "meta/missing_ratio": np.array(federation.missing_ratio),
        "meta/n_clients": np.array(len(federation.clients)),
        "head": np.asarray(federation.network.head),
    }
    for y, (w, bias) in enumerate(zip(federation.network.weights, federation.network.biases)):
        arrays[f"layer{y}/weight"] = np.asarray(w)
        arrays[f"layer{y}/bias"] = np.asarray(bias)
    arrays["meta/n_layers"] = np.array(federation.network.n_layers)
    for c in federation.clients:
        arrays.update(c.train.arrays(f"client{c.client_id}/train"))
        arrays.update(c.test.arrays(f"client{c.client_id}/test"))
        arrays[f"client{c.client_id}/missing_seed"] = np.array(c.seed)
    arrays.update(federation.global_test.arrays("global_test"))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_federation(path: str | Path) -> Federation:
    with np.load(path) as z:
        n_layers = int(z["meta/n_layers"])
        network = FrozenNetwork(
            tuple(z[f"layer{y}/weight"] for y in range(n_layers)),
            tuple(z[f"layer{y}/bias"] for y in range(n_layers)),
            z["head"],
        )
        ratio = float(z["meta/missing_ratio"])
        clients = tuple(
            ClientDataset(
                k,
                MultimodalData.from_arrays(z, f"client{k}/train"),
                MultimodalData.from_arrays(z, f"client{k}/test"),
                ratio,
                int(z[f"client{k}/missing_seed"]),
            )
            for k in range(int(z["meta/n_clients"]))
        )
        return Federation(clients, MultimodalData.from_arrays(z, "global_test"), network, int(z["meta/seed"]), ratio)


# --- model -----------------------------------------------------------------

def _as_inputs(x) -> np.ndarray:
    if isinstance(x, MultimodalData):
        return x.inputs
    if isinstance(x, MultimodalSample):
        return np.concatenate([x.modality_a, x.modality_b])[None, :]
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def effective_weights(
    net: FrozenNetwork, stack: AdapterStack | None = None, base: Sequence[Matrix] | None = None
) -> list[Matrix]:
    """``W_y + base_y + B_y A_y`` for every layer; either addend may be omitted."""
    mats = [np.array(w) for w in net.weights]
    if base is not None:
        if len(base) != len(mats):
            raise ValueError(f"expected {len(mats)} base deltas, got {len(base)}")
        for y, d in enumerate(base):
            if d.shape != mats[y].shape:
                raise ValueError(f"layer {y}: delta shape {d.shape} vs weight {mats[y].shape}")
            mats[y] = mats[y] + d
    if stack is not None:
        if stack.layer_shapes != tuple(w.shape for w in net.weights):
            raise ValueError(f"adapter shapes {stack.layer_shapes} do not match network {net.layer_shapes}")
        for y, pair in enumerate(stack):
            mats[y] = mats[y] + pair.b @ pair.a
    return mats


def _activations(net: FrozenNetwork, weights: Sequence[Matrix], x: np.ndarray) -> list[np.ndarray]:
    if x.shape[1] != net.input_dim:
        raise ValueError(f"input width {x.shape[1]} does not match network input {net.input_dim}")
    hs = [x]
    for w, bias in zip(weights, net.biases):
        hs.append(np.tanh(hs[-1] @ w.T + bias))
    return hs


def forward(net: FrozenNetwork, stack: AdapterStack | None, x, base: Sequence[Matrix] | None = None) -> np.ndarray:
    """Predictions for a sample, a ``MultimodalData`` batch or a raw ``(n, in)`` array."""
    inputs = _as_inputs(x)
    hs = _activations(net, effective_weights(net, stack, base), inputs)
    out = hs[-1] @ net.head.T
    return out[0] if isinstance(x, MultimodalSample) else out


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def loss_and_grads(
    net: FrozenNetwork,
    stack: AdapterStack,
    x: np.ndarray,
    target: np.ndarray,
    base: Sequence[Matrix] | None = None,
) -> tuple[float, list[Matrix], list[Matrix]]:
    """Mean squared error and its exact gradients w.r.t. every A and B."""
    weights = effective_weights(net, stack, base)
    hs = _activations(net, weights, x)
    resid = hs[-1] @ net.head.T - target
    loss = float(np.mean(resid**2))
    grad_h = (2.0 / resid.size) * resid @ net.head
    grads_a: list[Matrix] = [None] * len(weights)  # type: ignore[list-item]
    grads_b: list[Matrix] = [None] * len(weights)  # type: ignore[list-item]
    for y in range(len(weights) - 1, -1, -1):
        grad_z = grad_h * (1.0 - hs[y + 1] ** 2)
        grad_w = grad_z.T @ hs[y]
        pair = stack[y]
        grads_a[y] = pair.b.T @ grad_w
        grads_b[y] = grad_w @ pair.a.T
        grad_h = grad_z @ weights[y]
    return loss, grads_a, grads_b


OPTIMIZERS = ("sgd", "adam")


class _Adam:
    def __init__(self, params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def local_train(
    net: FrozenNetwork,
    stack: AdapterStack,
    data: MultimodalData,
    steps: int,
    lr: float,
    batch_size: int,
    seed,
    base: Sequence[Matrix] | None = None,
    optimizer: str = "sgd",
) -> tuple[AdapterStack, list[float]]:
    """Minibatch gradient descent on A and B only.

    ``optimizer`` is ``"sgd"`` (plain steps) or ``"adam"`` (moment estimates
    reset at every call, betas 0.9/0.999). Batches come from per-epoch
    permutations of ``default_rng(seed)``. The returned trace holds the
    full-training-set loss before the first step and after every step
    (``steps + 1`` values).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    x_all, y_all = data.inputs, data.target
    n = len(data)
    batch_size = min(batch_size, n)
    a = [p.a.copy() for p in stack]
    b = [p.b.copy() for p in stack]
    adam = _Adam(a + b) if optimizer == "adam" else None

    def current() -> AdapterStack:
        return AdapterStack(tuple(LoraPair(ai, bi) for ai, bi in zip(a, b)))

    trace = [mse(forward(net, stack, x_all, base), y_all)]
    order = rng.permutation(n)
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        rows = order[cursor:cursor + batch_size]
        cursor += batch_size
        loss, ga, gb = loss_and_grads(net, current(), x_all[rows], y_all[rows], base)
        if not np.isfinite(loss):
            raise DivergenceError(f"diverged at step {step}: batch loss {loss} (lr={lr}, batch={batch_size})")
        if adam is None:
            for y in range(len(a)):
                a[y] -= lr * ga[y]
                b[y] -= lr * gb[y]
        else:
            adam.step(a + b, ga + gb, lr)
        with np.errstate(over="ignore", invalid="ignore"):
            finite = all(np.isfinite(m).all() for m in a + b)
        if not finite:
            raise DivergenceError(f"diverged at step {step}: non-finite adapter entries (lr={lr})")
        trace.append(mse(forward(net, current(), x_all, base), y_all))
        if not np.isfinite(trace[-1]):
            raise DivergenceError(f"diverged at step {step}: training loss {trace[-1]} (lr={lr})")
    return current(), trace


def evaluate(
    net: FrozenNetwork,
    model: AdapterStack | Sequence[Matrix] | None,
    data: MultimodalData,
    base: Sequence[Matrix] | None = None,
) -> float:
    """Mean squared error of the adapted network on ``data``.

    ``model`` is either an adapter stack or a list of dense per-layer deltas.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if model is None or isinstance(model, AdapterStack):
        pred = forward(net, model, data, base)
    else:
        deltas = list(model)
        if base is not None:
            deltas = [d + e for d, e in zip(deltas, base)]
        pred = forward(net, None, data, deltas)
    return mse(pred, data.target)
