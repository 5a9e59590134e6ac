"""Dense MLP engine shared by the stacked autoencoder and the localizer.

Parameters are kept in float64 and flattened in a canonical order: layer-major,
weights (row-major, ``out x in``) before bias. Federation indexes into that
order, so it must never change.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, TrainingDivergedError, WireFormatError

logger = logging.getLogger(__name__)

ACTIVATIONS: tuple[str, ...] = ("relu", "sigmoid", "linear", "softmax")
LOSSES: tuple[str, ...] = ("mse", "sparse_categorical_crossentropy")

_SNAPSHOT_MAGIC = b"FNET"
_SNAPSHOT_VERSION = 1


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "linear"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation: {self.activation}")
        if self.weights.ndim != 2 or self.bias.ndim != 1 or self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[0])

    @property
    def param_count(self) -> int:
        return (self.in_dim + 1) * self.out_dim


@dataclass
class Network:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self) -> None:
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_dim != self.layers[i + 1].in_dim:
                raise ShapeError(
                    f"layer {i} outputs {self.layers[i].out_dim} values but layer {i + 1} "
                    f"expects {self.layers[i + 1].in_dim}"
                )

    @property
    def shape(self) -> "NetworkShape":
        if not self.layers:
            return NetworkShape(dims=(), activations=())
        dims = (self.layers[0].in_dim, *(layer.out_dim for layer in self.layers))
        return NetworkShape(dims=dims, activations=tuple(layer.activation for layer in self.layers))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim if self.layers else 0

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else 0

    def copy(self) -> "Network":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths ``(in_0, out_0, out_1, ...)`` plus one activation per layer."""

    dims: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.dims and len(self.dims) != len(self.activations) + 1:
            raise ShapeError("shape needs exactly one activation per layer")
        if not self.dims and self.activations:
            raise ShapeError("empty shape cannot carry activations")
        if any(d < 1 for d in self.dims):
            raise ShapeError(f"layer widths must be >= 1: {self.dims}")

    @property
    def layer_count(self) -> int:
        return len(self.activations)

    def layer_param_counts(self) -> list[int]:
        return [(self.dims[i] + 1) * self.dims[i + 1] for i in range(self.layer_count)]

    @property
    def param_count(self) -> int:
        return sum(self.layer_param_counts())

    def layer_offset(self, layer: int) -> int:
        """Flat index of the first weight of ``layer``."""
        return sum(self.layer_param_counts()[:layer])

    def weight_index(self, layer: int, row: int, col: int) -> int:
        return self.layer_offset(layer) + row * self.dims[layer] + col

    def bias_index(self, layer: int, unit: int) -> int:
        return self.layer_offset(layer) + self.dims[layer] * self.dims[layer + 1] + unit


@dataclass
class WeightVector:
    values: np.ndarray
    shape: NetworkShape

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] != self.shape.param_count:
            raise ShapeError(
                f"weight vector length {self.values.size} does not match shape "
                f"parameter count {self.shape.param_count}"
            )

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def replace(self, values: np.ndarray) -> "WeightVector":
        return WeightVector(values=values, shape=self.shape)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    loss: str = "mse"
    frozen_layers: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss: {self.loss}")

    def with_overrides(self, **changes) -> "TrainConfig":
        values = {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "loss": self.loss,
            "frozen_layers": self.frozen_layers,
        }
        values.update(changes)
        return TrainConfig(**values)


@dataclass
class TrainResult:
    network: Network
    losses: list[float] = field(default_factory=list)  # mean batch loss per epoch


# Construction ---------------------------------------------------------------


def init_network(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator | int) -> Network:
    """Glorot-uniform weights, zero biases."""

    shape = NetworkShape(dims=tuple(int(d) for d in dims), activations=tuple(activations))
    generator = np.random.default_rng(rng)
    layers: list[DenseLayer] = []
    for i, activation in enumerate(shape.activations):
        fan_in, fan_out = shape.dims[i], shape.dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = generator.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(weights=weights, bias=np.zeros(fan_out), activation=activation))
    return Network(layers=layers)


def param_count(net: Network) -> int:
    return sum(layer.param_count for layer in net.layers)


def flatten(net: Network) -> WeightVector:
    parts: list[np.ndarray] = []
    for layer in net.layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias)
    values = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float64)
    return WeightVector(values=values.copy(), shape=net.shape)


def unflatten(wv: WeightVector | np.ndarray, shape: NetworkShape) -> Network:
    values = wv.values if isinstance(wv, WeightVector) else np.asarray(wv, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != shape.param_count:
        raise ShapeError(f"cannot unflatten {values.size} values into a shape with {shape.param_count} parameters")
    layers: list[DenseLayer] = []
    offset = 0
    for i, activation in enumerate(shape.activations):
        fan_in, fan_out = shape.dims[i], shape.dims[i + 1]
        w_end = offset + fan_in * fan_out
        weights = values[offset:w_end].reshape(fan_out, fan_in).copy()
        bias = values[w_end : w_end + fan_out].copy()
        layers.append(DenseLayer(weights=weights, bias=bias, activation=activation))
        offset = w_end + fan_out
    return Network(layers=layers)


# Activations and losses ------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "softmax":
        return _softmax(z)
    return z


def _activation_backward(name: str, z: np.ndarray, a: np.ndarray, grad_a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return grad_a * (z > 0.0)
    if name == "sigmoid":
        return grad_a * a * (1.0 - a)
    if name == "softmax":
        return a * (grad_a - np.sum(grad_a * a, axis=1, keepdims=True))
    return grad_a


def _as_batch(x: np.ndarray, expected: int) -> np.ndarray:
    batch = np.asarray(x, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[np.newaxis, :]
    if batch.ndim != 2 or batch.shape[1] != expected:
        raise ShapeError(f"expected inputs of width {expected}, got shape {np.shape(x)}")
    return batch


def _forward_cache(net: Network, batch: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    activations = [batch]
    pre_activations: list[np.ndarray] = []
    a = batch
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        a = _activate(layer.activation, z)
        pre_activations.append(z)
        activations.append(a)
    return pre_activations, activations


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Run inference; a 1-D input yields a 1-D output, a 2-D batch a 2-D batch."""

    if not net.layers:
        return np.asarray(x, dtype=np.float64).copy()
    single = np.ndim(x) == 1
    _, activations = _forward_cache(net, _as_batch(x, net.input_dim))
    out = activations[-1]
    return out[0] if single else out


def _class_labels(targets: np.ndarray, batch_size: int, classes: int) -> np.ndarray:
    labels = np.asarray(targets)
    if labels.ndim != 1 or labels.shape[0] != batch_size:
        raise ShapeError(f"expected {batch_size} integer labels, got shape {labels.shape}")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def _regression_targets(targets: np.ndarray, batch_size: int, width: int) -> np.ndarray:
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1 and width == 1:
        y = y[:, np.newaxis]
    if y.shape != (batch_size, width):
        raise ShapeError(f"expected targets of shape {(batch_size, width)}, got {y.shape}")
    return y


def _loss_and_output_delta(
    net: Network, z: np.ndarray, a: np.ndarray, targets: np.ndarray, loss: str
) -> tuple[float, np.ndarray]:
    """Return the mean batch loss and dL/dz for the output layer."""

    n = a.shape[0]
    activation = net.layers[-1].activation
    if loss == "mse":
        y = _regression_targets(targets, n, a.shape[1])
        diff = a - y
        value = float(np.mean(diff * diff))
        grad_a = 2.0 * diff / diff.size
        return value, _activation_backward(activation, z, a, grad_a)

    labels = _class_labels(targets, n, a.shape[1])
    rows = np.arange(n)
    if activation == "softmax":
        log_p = z - np.max(z, axis=1, keepdims=True)
        log_p = log_p - np.log(np.sum(np.exp(log_p), axis=1, keepdims=True))
        value = float(-np.mean(log_p[rows, labels]))
        delta = a.copy()
        delta[rows, labels] -= 1.0
        return value, delta / n
    if activation == "sigmoid":
        # Cross-entropy over sigmoid scores renormalized into a distribution.
        log_s = _log_sigmoid(z)
        top = np.max(log_s, axis=1, keepdims=True)
        log_total = top + np.log(np.sum(np.exp(log_s - top), axis=1, keepdims=True))
        value = float(-np.mean(log_s[rows, labels] - log_total[:, 0]))
        p = np.exp(log_s - log_total)
        delta = p * (1.0 - a)
        delta[rows, labels] -= 1.0 - a[rows, labels]
        return value, delta / n
    raise ConfigError(f"sparse categorical cross-entropy needs a sigmoid or softmax output, not {activation}")


def _backprop(
    net: Network, inputs: np.ndarray, targets: np.ndarray, loss: str
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    batch = _as_batch(inputs, net.input_dim)
    if batch.shape[0] == 0:
        raise ShapeError("gradient needs a non-empty batch")
    pre, acts = _forward_cache(net, batch)
    value, delta = _loss_and_output_delta(net, pre[-1], acts[-1], targets, loss)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            prev = net.layers[i - 1]
            delta = _activation_backward(prev.activation, pre[i - 1], acts[i], delta @ layer.weights)
    return value, grads


def loss_value(net: Network, inputs: np.ndarray, targets: np.ndarray, loss: str) -> float:
    batch = _as_batch(inputs, net.input_dim)
    pre, acts = _forward_cache(net, batch)
    value, _ = _loss_and_output_delta(net, pre[-1], acts[-1], targets, loss)
    return value


def gradient(net: Network, inputs: np.ndarray, targets: np.ndarray, loss: str, *, scale: float = 1.0) -> WeightVector:
    """Exact backprop gradient of ``scale * mean batch loss``, flattened canonically."""

    if not net.layers:
        return WeightVector(values=np.zeros(0), shape=net.shape)
    _, grads = _backprop(net, inputs, targets, loss)
    parts: list[np.ndarray] = []
    for dw, db in grads:
        parts.append(dw.ravel())
        parts.append(db)
    return WeightVector(values=scale * np.concatenate(parts), shape=net.shape)


# Training -----------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def sgd_train(net: Network, data: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """Mini-batch SGD; ``net`` is left untouched and a trained copy is returned."""

    inputs = _as_batch(data, net.input_dim) if net.layers else np.asarray(data, dtype=np.float64)
    targets = np.asarray(labels)
    if inputs.shape[0] != targets.shape[0]:
        raise ShapeError(f"{inputs.shape[0]} samples but {targets.shape[0]} labels")
    for index in cfg.frozen_layers:
        if not 0 <= index < len(net.layers):
            raise ConfigError(f"frozen layer index {index} out of range")

    trained = net.copy()
    result = TrainResult(network=trained)
    n = inputs.shape[0]
    if cfg.epochs == 0 or n == 0 or not trained.layers:
        return result

    rng = np.random.default_rng(cfg.seed)
    frozen = set(cfg.frozen_layers)
    for epoch in range(cfg.epochs):
        total = 0.0
        steps = 0
        for step, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            value, grads = _backprop(trained, inputs[idx], targets[idx], cfg.loss)
            if not np.isfinite(value):
                logger.error("loss diverged to %s at epoch %d batch %d", value, epoch, step)
                raise TrainingDivergedError(f"non-finite loss {value}", epoch=epoch, batch=step)
            for i, (dw, db) in enumerate(grads):
                if i in frozen:
                    continue
                layer = trained.layers[i]
                layer.weights -= cfg.learning_rate * dw
                layer.bias -= cfg.learning_rate * db
            total += value
            steps += 1
        result.losses.append(total / steps)
    logger.debug("trained %d epochs, loss %.6g -> %.6g", cfg.epochs, result.losses[0], result.losses[-1])
    return result


# Snapshots ----------------------------------------------------------------


def encode_network(net: Network) -> bytes:
    """Binary snapshot: ``FNET`` + version + layer count, per-layer dims/tag, then LE float64 values."""

    shape = net.shape
    header = bytearray(_SNAPSHOT_MAGIC)
    header += struct.pack("<II", _SNAPSHOT_VERSION, shape.layer_count)
    if shape.layer_count:
        header += struct.pack("<I", shape.dims[0])
    for i, activation in enumerate(shape.activations):
        header += struct.pack("<IB", shape.dims[i + 1], ACTIVATIONS.index(activation))
    return bytes(header) + flatten(net).values.astype("<f8").tobytes()


def decode_network(payload: bytes) -> tuple[Network, int]:
    """Decode one snapshot; returns the network and the number of bytes consumed."""

    if payload[:4] != _SNAPSHOT_MAGIC:
        raise WireFormatError("not a network snapshot (bad magic)")
    try:
        version, count = struct.unpack_from("<II", payload, 4)
        if version != _SNAPSHOT_VERSION:
            raise WireFormatError(f"unsupported snapshot version {version}")
        offset = 12
        dims: list[int] = []
        activations: list[str] = []
        if count:
            dims.append(struct.unpack_from("<I", payload, offset)[0])
            offset += 4
        for _ in range(count):
            width, tag = struct.unpack_from("<IB", payload, offset)
            offset += 5
            dims.append(width)
            activations.append(ACTIVATIONS[tag])
    except (struct.error, IndexError) as exc:
        raise WireFormatError(f"truncated snapshot header: {exc}") from exc
    shape = NetworkShape(dims=tuple(dims), activations=tuple(activations))
    end = offset + 8 * shape.param_count
    if len(payload) < end:
        raise WireFormatError("truncated snapshot values")
    values = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64)
    return unflatten(values, shape), end


def save_network(net: Network, path: Path) -> None:
    path.write_bytes(encode_network(net))


def load_network(path: Path) -> Network:
    net, _ = decode_network(path.read_bytes())
    return net
