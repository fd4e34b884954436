"""Parameter vectors, built-in small models and local SGD training.

Three architectures are built in:

* ``tinynet``: a 1 -> 1 linear regressor (2 parameters) trained on mean
  squared error, with the first feature column as input and the label as
  target.
* ``linear``: a d -> c softmax classifier trained on cross-entropy.
* ``mlp``: a tanh multilayer perceptron with a softmax head.

All math runs in float64. Parameters are carried on the wire as
little-endian float32, so every model has ``byte_size == 4 * param_count``.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from hflight.data import LabeledDataset
    from hflight.strategy import TrainerStrategy

BYTES_PER_PARAM = 4


class DimensionMismatchError(ValueError):
    pass


class TrainingDivergedError(ArithmeticError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


@dataclass(frozen=True)
class Layer:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


class ParamVector:
    """Flat parameter vector with named layer views."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Sequence[Layer]):
        values = np.asarray(values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        self.values = values.reshape(-1)
        self.layout = tuple(layout)
        if sum(layer.length for layer in self.layout) != self.values.size:
            raise DimensionMismatchError(
                f"layout covers {sum(l.length for l in self.layout)} values, vector has {self.values.size}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite values")

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        names = ",".join(layer.name for layer in self.layout)
        return f"ParamVector(n={self.values.size}, layers=[{names}])"

    @classmethod
    def _trusted(cls, values: np.ndarray, layout: tuple[Layer, ...]) -> ParamVector:
        # skips validation for vectors decoded from a blob written by encode()
        out = cls.__new__(cls)
        out.values, out.layout = values, layout
        return out

    def __getstate__(self):
        return (self.values, self.layout)

    def __setstate__(self, state):
        self.values, self.layout = state

    def layer(self, name: str) -> np.ndarray:
        for layer in self.layout:
            if layer.name == name:
                return self.values[layer.offset : layer.offset + layer.length].reshape(layer.shape)
        raise KeyError(name)

    def same_layout(self, other: ParamVector) -> bool:
        return self.layout == other.layout

    def with_values(self, values) -> ParamVector:
        return ParamVector(values, self.layout)

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)

    def as_single(self) -> ParamVector:
        """Round to the single-precision values carried on the wire."""
        return ParamVector(self.values.astype(np.float32), self.layout)

    def bitwise_equal(self, other: ParamVector) -> bool:
        return (
            self.layout == other.layout
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )

    @property
    def nbytes(self) -> int:
        return self.values.size * BYTES_PER_PARAM


# Codec: b"HFPV" | u32 n_layers | per layer (u16 name_len, name, u32 ndim,
# u64*ndim shape, u64 offset, u64 length) | u64 n_values | float32 LE values.
_MAGIC = b"HFPV"


def encode(params: ParamVector) -> bytes:
    return encode_header(params) + params.values.astype("<f4").tobytes()


def encode_header(params: ParamVector) -> bytes:
    return _header(params.layout, params.values.size)


@functools.lru_cache(maxsize=64)
def _header(layout: tuple[Layer, ...], n_values: int) -> bytes:
    parts = [_MAGIC, struct.pack("<I", len(layout))]
    for layer in layout:
        name = layer.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", len(layer.shape)))
        parts.append(struct.pack(f"<{len(layer.shape)}Q", *layer.shape))
        parts.append(struct.pack("<QQ", layer.offset, layer.length))
    parts.append(struct.pack("<Q", n_values))
    return b"".join(parts)


def decode(blob: bytes) -> ParamVector:
    if blob[:4] != _MAGIC:
        raise ValueError("not an encoded parameter vector")
    for header, (layout, n) in _KNOWN_HEADERS.items():
        if blob.startswith(header) and len(blob) - len(header) == n * BYTES_PER_PARAM:
            values = np.frombuffer(blob, dtype="<f4", count=n, offset=len(header)).astype(np.float32)
            return ParamVector._trusted(values, layout)
    pos = 4
    (n_layers,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    layout = []
    for _ in range(n_layers):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        offset, length = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        layout.append(Layer(name, offset, length, tuple(shape)))
    (n,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) - pos != n * BYTES_PER_PARAM:
        raise ValueError("truncated parameter vector payload")
    values = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).astype(np.float32)
    params = ParamVector(values, layout)
    if len(_KNOWN_HEADERS) < 16:
        _KNOWN_HEADERS[bytes(blob[:pos])] = (params.layout, n)
    return params


# layouts seen by decode, keyed by their header bytes
_KNOWN_HEADERS: dict[bytes, tuple[tuple[Layer, ...], int]] = {}


@dataclass(frozen=True)
class LossReport:
    loss: float
    accuracy: float
    num_samples: int

    def to_dict(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy, "num_samples": self.num_samples}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            # eta == 0 is accepted as a no-op for identity checks
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


ARCHITECTURES = ("tinynet", "linear", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int = 1
    n_classes: int = 1
    hidden: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.architecture == "tinynet":
            object.__setattr__(self, "input_dim", 1)
            object.__setattr__(self, "n_classes", 1)
            object.__setattr__(self, "hidden", ())
        elif self.architecture == "linear":
            object.__setattr__(self, "hidden", ())

    @classmethod
    def tinynet(cls) -> ModelSpec:
        return cls("tinynet")

    @classmethod
    def linear(cls, input_dim: int, n_classes: int) -> ModelSpec:
        return cls("linear", input_dim, n_classes)

    @classmethod
    def mlp(cls, input_dim: int, n_classes: int, hidden: Sequence[int] = (32,)) -> ModelSpec:
        return cls("mlp", input_dim, n_classes, tuple(hidden))

    @property
    def is_regression(self) -> bool:
        return self.architecture == "tinynet"

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        sizes = [self.input_dim, *self.hidden, self.n_classes]
        shapes = []
        for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes.append((f"w{i}", (d_in, d_out)))
            shapes.append((f"b{i}", (d_out,)))
        return shapes

    def layout(self) -> tuple[Layer, ...]:
        return _layout(self)

    @property
    def param_count(self) -> int:
        return sum(math.prod(s) for _, s in self.layer_shapes())

    @property
    def byte_size(self) -> int:
        return self.param_count * BYTES_PER_PARAM

    def init_params(self, seed: int = 0) -> ParamVector:
        rng = np.random.default_rng(seed)
        chunks = []
        for name, shape in self.layer_shapes():
            if name.startswith("w"):
                scale = 1.0 / math.sqrt(shape[0])
                chunks.append(rng.normal(0.0, scale, size=shape).ravel())
            else:
                chunks.append(np.zeros(shape))
        return ParamVector(np.concatenate(chunks), self.layout()).as_single()


@functools.lru_cache(maxsize=64)
def _layout(model: ModelSpec) -> tuple[Layer, ...]:
    layers, offset = [], 0
    for name, shape in model.layer_shapes():
        n = math.prod(shape)
        layers.append(Layer(name, offset, n, shape))
        offset += n
    return tuple(layers)


def _check(model: ModelSpec, params: ParamVector, X: np.ndarray):
    if params.layout != model.layout():
        raise DimensionMismatchError("parameter layout does not match the model")
    if X.ndim != 2 or X.shape[1] < model.input_dim or (
        not model.is_regression and X.shape[1] != model.input_dim
    ):
        raise DimensionMismatchError(f"expected {model.input_dim} features, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("batch is empty")


def _weights(model: ModelSpec, values: np.ndarray):
    out = []
    for layer in model.layout():
        out.append(values[layer.offset : layer.offset + layer.length].reshape(layer.shape))
    return out


def _forward(model: ModelSpec, values: np.ndarray, X: np.ndarray):
    """Return (outputs, hidden activations incl. input)."""
    ws = _weights(model, values)
    acts = [X]
    h = X
    n_layers = len(ws) // 2
    for i in range(n_layers):
        z = h @ ws[2 * i] + ws[2 * i + 1]
        if i < n_layers - 1:
            h = np.tanh(z)
            acts.append(h)
        else:
            h = z
    return h, acts


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _inputs(model: ModelSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[:, :1] if model.is_regression else X


def _loss_grad(model: ModelSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray):
    out, acts = _forward(model, w, X)
    n = X.shape[0]
    if model.is_regression:
        resid = out[:, 0] - y.astype(np.float64)
        loss = float(np.mean(resid**2))
        delta = (2.0 / n) * resid[:, None]
    else:
        logp = _log_softmax(out)
        labels = y.astype(np.int64)
        loss = float(-np.mean(logp[np.arange(n), labels]))
        delta = np.exp(logp)
        delta[np.arange(n), labels] -= 1.0
        delta /= n

    ws = _weights(model, w)
    n_layers = len(ws) // 2
    grads: list = [None] * len(ws)
    for i in reversed(range(n_layers)):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ ws[2 * i].T) * (1.0 - acts[i] ** 2)
    grad = np.concatenate([g.ravel() for g in grads])
    return loss, grad, (out[:, 0] if model.is_regression else out)


def forward_loss(model: ModelSpec, params: ParamVector, X, y) -> tuple[float, ParamVector]:
    """Mean loss over the batch and its gradient w.r.t. ``params``."""
    X = _inputs(model, X)
    y = np.asarray(y)
    _check(model, params, X)
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatchError("features and labels differ in length")
    loss, grad, _ = _loss_grad(model, params.values.astype(np.float64), X, y)
    return loss, ParamVector(grad, params.layout)


def predict(model: ModelSpec, params: ParamVector, X) -> np.ndarray:
    """Class scores (classification) or predictions (tinynet)."""
    X = _inputs(model, X)
    _check(model, params, X)
    out, _ = _forward(model, params.values.astype(np.float64), X)
    return out[:, 0] if model.is_regression else out


def _correct(model: ModelSpec, out: np.ndarray, y: np.ndarray) -> int:
    if model.is_regression:
        # a regression output counts as correct when it rounds to the label
        return int(np.sum(np.abs(out - y) < 0.5))
    return int(np.sum(np.argmax(out, axis=1) == y))


def _batch_loss(model: ModelSpec, out: np.ndarray, y: np.ndarray) -> float:
    if model.is_regression:
        return float(np.mean((out - y) ** 2))
    logp = _log_softmax(out)
    return float(-np.mean(logp[np.arange(len(y)), y.astype(np.int64)]))


def evaluate(model: ModelSpec, params: ParamVector, data: LabeledDataset) -> LossReport:
    out = predict(model, params, data.features)
    y = data.labels
    correct = _correct(model, out, y)
    return LossReport(_batch_loss(model, out, y), correct / len(y), len(y))


def local_train(
    model: ModelSpec,
    start: ParamVector,
    data: LabeledDataset,
    cfg: TrainConfig,
    trainer: TrainerStrategy | None = None,
) -> tuple[ParamVector, list[LossReport]]:
    """Plain minibatch SGD, ``w <- w - lr * grad`` per step.

    Batches are reshuffled every epoch from ``cfg.seed``. The history holds one
    report per epoch with the pre-step loss and accuracy averaged over batches.
    When a ``trainer`` is given, its ``modify_loss`` hook may adjust the loss and
    gradient of each step (``start`` is passed as the global parameters).
    """
    n = len(data)
    if n == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(cfg.seed)
    _check(model, start, _inputs(model, data.features[:1]))
    w = start.values.astype(np.float64)
    global_params = start
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            X, y = data.features[idx], data.labels[idx]
            loss, g, out = _loss_grad(model, w, _inputs(model, X), y)
            if trainer is not None:
                loss, g = trainer.modify_loss(loss, g, ParamVector(w, start.layout), global_params)
            if not math.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            correct += _correct(model, out, y)
            loss_sum += loss * len(idx)
            w = w - cfg.learning_rate * g
            step += 1
        if not np.all(np.isfinite(w)):
            raise TrainingDivergedError(step, float("nan"))
        history.append(LossReport(loss_sum / n, correct / n, n))
    return ParamVector(w, start.layout), history


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
