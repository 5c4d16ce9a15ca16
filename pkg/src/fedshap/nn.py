"""Minimal numpy MLP with manual backprop, local SGD training and model averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, InputError, TrainingError

ACTIVATIONS = ("relu", "tanh")


@dataclass
class Dataset:
    """Feature matrix plus integer labels in ``[0, n_classes)``."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise InputError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError(f"labels outside [0, {self.n_classes})")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes)

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector.

    ``layout`` lists ``(fan_in, fan_out)`` per dense layer; each layer
    occupies ``fan_in * fan_out`` weights followed by ``fan_out`` biases.
    """

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        expected = layout_size(self.layout)
        if self.values.shape != (expected,):
            raise ConfigurationError(
                f"parameter vector of shape {self.values.shape} does not match layout size {expected}"
            )

    def layers(self):
        """Yield ``(W, b)`` views into ``values``."""
        offset = 0
        for fan_in, fan_out in self.layout:
            w = self.values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.values[offset : offset + fan_out]
            offset += fan_out
            yield w, b

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __len__(self):
        return self.values.shape[0]


def layout_size(layout) -> int:
    return sum(i * o + o for i, o in layout)


def layout_from_dims(layer_dims: Sequence[int]) -> tuple:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ConfigurationError(f"layer_dims must hold at least two positive sizes, got {dims}")
    return tuple(zip(dims[:-1], dims[1:]))


def init_params(layer_dims: Sequence[int], rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    layout = layout_from_dims(layer_dims)
    chunks = []
    for fan_in, fan_out in layout:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), layout)


@dataclass
class MlpModel:
    layer_dims: tuple
    activation: str = "relu"
    params: Optional[ParamVector] = None

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        layout = layout_from_dims(self.layer_dims)
        if self.params is None:
            self.params = ParamVector(np.zeros(layout_size(layout)), layout)
        elif self.params.layout != layout:
            raise ConfigurationError("params layout does not match layer_dims")

    @classmethod
    def initialized(cls, layer_dims, rng, activation="relu") -> "MlpModel":
        return cls(tuple(layer_dims), activation, init_params(layer_dims, rng))

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return logits(self.params, x, self.activation)

    def with_params(self, params: ParamVector) -> "MlpModel":
        return MlpModel(self.layer_dims, self.activation, params)


@dataclass
class TrainConfig:
    epochs: int = 5
    batches_per_epoch: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.5
    prox_mu: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ConfigurationError("epochs and batches_per_epoch must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.prox_mu < 0:
            raise ConfigurationError("prox_mu must be nonnegative")


def _act(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z, a, activation):
    if activation == "relu":
        return (z > 0).astype(z.dtype)
    return 1.0 - a * a


def _check_dim(params: ParamVector, x: np.ndarray):
    fan_in = params.layout[0][0]
    if x.ndim != 2 or x.shape[1] != fan_in:
        raise ConfigurationError(
            f"feature dimension {x.shape[-1] if x.ndim else None} does not match model input {fan_in}"
        )


def logits(params: ParamVector, x: np.ndarray, activation: str = "relu") -> np.ndarray:
    _check_dim(params, x)
    h = x
    layers = list(params.layers())
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = _act(h, activation)
    return h


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_accuracy(params: ParamVector, data: Dataset, activation: str = "relu"):
    if data.n == 0:
        raise InputError("cannot evaluate loss on an empty dataset")
    z = logits(params, data.features, activation)
    if z.shape[1] != data.n_classes:
        raise ConfigurationError(
            f"model emits {z.shape[1]} classes, dataset has {data.n_classes}"
        )
    logp = _log_softmax(z)
    loss = -float(np.mean(logp[np.arange(data.n), data.labels]))
    acc = float(np.mean(np.argmax(z, axis=1) == data.labels))
    return loss, acc


def forward_loss(model: MlpModel, data: Dataset):
    """Mean cross-entropy and argmax accuracy of ``model`` on ``data``."""
    return loss_and_accuracy(model.params, data, model.activation)


def loss_and_grad(params: ParamVector, x: np.ndarray, y: np.ndarray, activation: str = "relu"):
    """Mean cross-entropy over a batch and its gradient as a flat vector."""
    _check_dim(params, x)
    layers = list(params.layers())
    pre, post = [], [x]
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        if i < len(layers) - 1:
            h = _act(z, activation)
            post.append(h)
    logp = _log_softmax(pre[-1])
    n = x.shape[0]
    loss = -float(np.mean(logp[np.arange(n), y]))

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (post[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * _act_grad(pre[i - 1], post[i], activation)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return loss, flat


def objective_and_grad(
    params: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    anchor: Optional[ParamVector] = None,
    mu: float = 0.0,
    activation: str = "relu",
):
    """Batch loss plus ``mu/2 * ||w - anchor||^2`` and its gradient."""
    loss, g = loss_and_grad(params, x, y, activation)
    if mu > 0 and anchor is not None:
        diff = params.values - anchor.values
        loss += 0.5 * mu * float(diff @ diff)
        g = g + mu * diff
    return loss, g


def epoch_batches(n: int, batches: int, rng: np.random.Generator):
    """Shuffle ``range(n)`` and split into ``batches`` contiguous chunks.

    The last chunk absorbs the remainder. With fewer than ``batches``
    samples every sample becomes its own batch.
    """
    order = rng.permutation(n)
    if n < batches:
        return [order[i : i + 1] for i in range(n)]
    size = n // batches
    cuts = [i * size for i in range(batches)] + [n]
    return [order[cuts[i] : cuts[i + 1]] for i in range(batches)]


def client_update(
    server_params: ParamVector,
    data: Dataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    epochs_override: Optional[int] = None,
    activation: str = "relu",
    round_index=None,
    client=None,
    start: Optional[ParamVector] = None,
) -> ParamVector:
    """Local SGD with heavy-ball momentum starting from the server model.

    The momentum buffer starts at zero and persists across the epochs of
    this call. ``cfg.prox_mu > 0`` adds the FedProx term
    ``mu * (w - server_params)`` to every batch gradient. ``start``
    overrides the initial point (the proximal anchor stays at
    ``server_params``).
    """
    if data.n == 0:
        raise InputError("client has no data")
    epochs = cfg.epochs
    if epochs_override is not None:
        if not 1 <= epochs_override <= cfg.epochs:
            raise ConfigurationError(
                f"epochs_override={epochs_override} outside [1, {cfg.epochs}]"
            )
        epochs = epochs_override

    if start is not None and start.layout != server_params.layout:
        raise ConfigurationError("start and server params have different layouts")
    w = (start if start is not None else server_params).values.copy()
    velocity = np.zeros_like(w)
    for _ in range(epochs):
        for batch in epoch_batches(data.n, cfg.batches_per_epoch, rng):
            _, g = objective_and_grad(
                ParamVector(w, server_params.layout),
                data.features[batch],
                data.labels[batch],
                server_params,
                cfg.prox_mu,
                activation,
            )
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient", round_index, client)
            velocity = cfg.momentum * velocity + g
            w = w - cfg.learning_rate * velocity
    if not np.all(np.isfinite(w)):
        raise TrainingError("non-finite parameters after update", round_index, client)
    return ParamVector(w, server_params.layout)


AverageEntries = Union[Mapping[int, tuple], Sequence[tuple]]


def model_average(entries: AverageEntries) -> ParamVector:
    """Average parameter vectors with weights ``n_k / sum(n_j)``.

    ``entries`` is either a sequence of ``(n_k, params)`` pairs, summed in
    the given order, or a mapping ``client -> (n_k, params)``, summed in
    ascending client order so the result does not depend on insertion order.
    """
    if isinstance(entries, Mapping):
        items = [entries[k] for k in sorted(entries)]
    else:
        items = list(entries)
    if not items:
        raise InputError("model_average needs at least one entry")
    layout = items[0][1].layout
    total = 0
    for n_k, params in items:
        if params.layout != layout:
            raise ConfigurationError("cannot average parameter vectors with different layouts")
        if n_k <= 0:
            raise InputError(f"weight count must be positive, got {n_k}")
        total += n_k
    out = np.zeros_like(items[0][1].values)
    lo = np.full_like(out, np.inf)
    hi = np.full_like(out, -np.inf)
    for n_k, params in items:
        out += (n_k / total) * params.values
        np.minimum(lo, params.values, out=lo)
        np.maximum(hi, params.values, out=hi)
    # rounding can push a convex combination one ulp outside the input envelope
    np.clip(out, lo, hi, out=out)
    return ParamVector(out, layout)
