"""Small numpy neural-network kernel with hand-written backpropagation.

Layers work on batches: convolution and pooling take ``(batch, channels,
length)``; dense layers flatten whatever they receive. Everything is
float64 so finite-difference gradient checks stay meaningful.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv1d", "max_pool", "global_max_pool", "dense", "dropout", "softmax")
ACTIVATIONS = ("relu", "sigmoid", "identity")
MODEL_FORMAT = "premirna-model"
MODEL_VERSION = 1
CE_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    window: int = 0
    stride: int = 1
    units: int = 0
    rate: float = 0.0
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "conv1d" and (self.filters < 1 or self.window < 1 or self.stride < 1):
            raise ValueError("conv1d needs filters >= 1, window >= 1, stride >= 1")
        if self.kind == "max_pool" and (self.window < 1 or self.stride < 1):
            raise ValueError("max_pool needs window >= 1, stride >= 1")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense needs units >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v != LayerSpec.__dataclass_fields__[k].default or k == "kind"}


def conv(filters, window, stride=1, activation="relu") -> LayerSpec:
    return LayerSpec("conv1d", filters=filters, window=window, stride=stride, activation=activation)


def max_pool(window, stride) -> LayerSpec:
    return LayerSpec("max_pool", window=window, stride=stride)


def global_max_pool() -> LayerSpec:
    return LayerSpec("global_max_pool")


def dense(units, activation="relu") -> LayerSpec:
    return LayerSpec("dense", units=units, activation=activation)


def dropout(rate) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def softmax_layer() -> LayerSpec:
    return LayerSpec("softmax")


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    name: str = ""

    def shapes(self) -> list[tuple]:
        """Output shape of every layer (batch axis omitted); raises ShapeError."""
        shape = tuple(self.input_shape)
        out = []
        for n, spec in enumerate(self.layers):
            shape = _out_shape(spec, shape, n)
            out.append(shape)
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**s) for s in d["layers"]), d.get("name", ""))


def conv_output_length(length: int, window: int, stride: int) -> int:
    return (length - window) // stride + 1


def _out_shape(spec: LayerSpec, shape: tuple, n: int) -> tuple:
    if spec.kind in ("conv1d", "max_pool", "global_max_pool"):
        if len(shape) != 2:
            raise ShapeError(f"layer {n} ({spec.kind}) needs (channels, length) input, got {shape}")
        c, length = shape
        if spec.kind == "global_max_pool":
            return (c, 1)
        if spec.window > length:
            raise ShapeError(f"layer {n} ({spec.kind}): window {spec.window} larger than input length {length}")
        out_len = conv_output_length(length, spec.window, spec.stride)
        return (spec.filters, out_len) if spec.kind == "conv1d" else (c, out_len)
    if spec.kind == "dense":
        return (spec.units,)
    return shape


# ---------------------------------------------------------------- functions

def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(p, d) -> float:
    """-sum d log p averaged over the batch (a 1-D input is one example)."""
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    ce = -(d * np.log(np.maximum(p, CE_CLAMP))).sum(axis=-1)
    return float(np.mean(ce))


def binary_cross_entropy(p, y) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64).reshape(-1), CE_CLAMP, 1.0 - CE_CLAMP)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def _activate(z, name):
    if name == "relu":
        return relu(z)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(z, a, name, grad):
    if name == "relu":
        return grad * (z > 0)
    if name == "sigmoid":
        return grad * a * (1.0 - a)
    return grad


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# -------------------------------------------------------------------- layers

class Layer:
    def __init__(self, spec: LayerSpec, in_shape: tuple, out_shape: tuple):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = out_shape
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def init(self, rng):
        pass

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.spec.kind}: backward called before forward")
        return self._cache


class Conv1D(Layer):
    """out[f, t] = act(sum_{c,k} W[f, c, k] x[c, t*s + k] + b[f])"""

    def init(self, rng):
        c = self.in_shape[0]
        f, w = self.spec.filters, self.spec.window
        self.params = {"W": _glorot(rng, (f, c, w), c * w, f * w), "b": np.zeros(f)}

    def forward(self, x, training=False, rng=None):
        w, s = self.spec.window, self.spec.stride
        batch, c, length = x.shape
        if w > length:
            raise ShapeError(f"conv1d window {w} larger than input length {length}")
        out_len = conv_output_length(length, w, s)
        win = sliding_window_view(x, w, axis=2)[:, :, : s * (out_len - 1) + 1 : s, :]
        cols = win.transpose(0, 2, 1, 3).reshape(batch * out_len, c * w)
        W = self.params["W"]
        z = cols @ W.reshape(W.shape[0], -1).T + self.params["b"]
        z = z.reshape(batch, out_len, -1).transpose(0, 2, 1)
        a = _activate(z, self.spec.activation)
        self._cache = (x.shape, cols, z, a)
        return a

    def backward(self, grad):
        x_shape, cols, z, a = self._need_cache()
        batch, c, length = x_shape
        w, s = self.spec.window, self.spec.stride
        W = self.params["W"]
        f = W.shape[0]
        out_len = z.shape[2]
        dz = _activation_grad(z, a, self.spec.activation, grad)
        dz_flat = dz.transpose(0, 2, 1).reshape(batch * out_len, f)
        self.grads = {"W": (dz_flat.T @ cols).reshape(W.shape), "b": dz.sum(axis=(0, 2))}
        dcols = (dz_flat @ W.reshape(f, -1)).reshape(batch, out_len, c, w)
        dx = np.zeros(x_shape)
        span = s * (out_len - 1) + 1
        for k in range(w):
            dx[:, :, k:k + span:s] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dx


class MaxPool1D(Layer):
    def forward(self, x, training=False, rng=None):
        w, s = self.spec.window, self.spec.stride
        length = x.shape[2]
        if w > length:
            raise ShapeError(f"max_pool window {w} larger than input length {length}")
        out_len = conv_output_length(length, w, s)
        win = sliding_window_view(x, w, axis=2)[:, :, : s * (out_len - 1) + 1 : s, :]
        arg = win.argmax(axis=3)  # first index on ties
        out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
        self._cache = (x.shape, arg + np.arange(out_len)[None, None, :] * s)
        return out

    def backward(self, grad):
        x_shape, src = self._need_cache()
        dx = np.zeros(x_shape)
        b, c, _ = np.indices(src.shape)
        np.add.at(dx, (b, c, src), grad)
        return dx


class GlobalMaxPool1D(Layer):
    def forward(self, x, training=False, rng=None):
        arg = x.argmax(axis=2)
        self._cache = (x.shape, arg)
        return np.take_along_axis(x, arg[..., None], axis=2)

    def backward(self, grad):
        x_shape, arg = self._need_cache()
        dx = np.zeros(x_shape)
        np.put_along_axis(dx, arg[..., None], grad, axis=2)
        return dx


class Dense(Layer):
    def init(self, rng):
        n_in = int(np.prod(self.in_shape))
        n_out = self.spec.units
        self.params = {"W": _glorot(rng, (n_out, n_in), n_in, n_out), "b": np.zeros(n_out)}

    def forward(self, x, training=False, rng=None):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.params["W"].shape[1]:
            raise ShapeError(f"dense expects {self.params['W'].shape[1]} inputs, got {flat.shape[1]}")
        z = flat @ self.params["W"].T + self.params["b"]
        a = _activate(z, self.spec.activation)
        self._cache = (x.shape, flat, z, a)
        return a

    def backward(self, grad, pre_activation=False):
        x_shape, flat, z, a = self._need_cache()
        dz = grad if pre_activation else _activation_grad(z, a, self.spec.activation, grad)
        self.grads = {"W": dz.T @ flat, "b": dz.sum(axis=0)}
        return (dz @ self.params["W"]).reshape(x_shape)


class Dropout(Layer):
    """Inverted dropout; identity unless ``training``."""

    def forward(self, x, training=False, rng=None):
        p = self.spec.rate
        if not training or p == 0.0:
            self._cache = None
            self._identity = True
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        self._cache = mask
        self._identity = False
        return x * mask

    def backward(self, grad):
        if getattr(self, "_identity", None) is None:
            raise RuntimeError("dropout: backward called before forward")
        return grad if self._identity else grad * self._cache


class Softmax(Layer):
    def forward(self, x, training=False, rng=None):
        p = softmax(x, axis=-1)
        self._cache = p
        return p

    def backward(self, grad):
        p = self._need_cache()
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


_LAYER_CLASSES = {
    "conv1d": Conv1D,
    "max_pool": MaxPool1D,
    "global_max_pool": GlobalMaxPool1D,
    "dense": Dense,
    "dropout": Dropout,
    "softmax": Softmax,
}


def dropout_forward(x, p: float, training: bool, seed: int = 0):
    """Stand-alone inverted dropout, deterministic given ``seed``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    layer = Dropout(LayerSpec("dropout", rate=p), np.shape(x), np.shape(x))
    return layer.forward(np.asarray(x, dtype=np.float64), training, np.random.default_rng(seed))


# -------------------------------------------------------------------- network

class Network:
    """Sequential network built from a NetworkSpec.

    The final layer is either ``softmax`` (trained with cross-entropy) or a
    one-unit sigmoid ``dense`` layer (binary cross-entropy).
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        shapes = spec.shapes()
        in_shape = tuple(spec.input_shape)
        self.layers: list[Layer] = []
        rng = np.random.default_rng(seed)
        for layer_spec, out_shape in zip(spec.layers, shapes):
            layer = _LAYER_CLASSES[layer_spec.kind](layer_spec, in_shape, out_shape)
            layer.init(rng)
            self.layers.append(layer)
            in_shape = out_shape
        self.frozen: set[int] = set()
        self._forward_done = False

    @property
    def head(self) -> str:
        last = self.spec.layers[-1]
        if last.kind == "softmax":
            return "softmax"
        if last.kind == "dense" and last.activation == "sigmoid" and last.units == 1:
            return "sigmoid"
        return "none"

    def parameters(self) -> list[tuple[int, str, np.ndarray]]:
        return [(n, name, arr) for n, layer in enumerate(self.layers)
                for name, arr in sorted(layer.params.items())]

    def forward(self, x, training=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeError(f"expected input shape {tuple(self.spec.input_shape)}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, training, rng)
        self._forward_done = True
        return x

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        """Positive-class probability for every example."""
        out = []
        for start in range(0, len(x), batch_size):
            p = self.forward(x[start:start + batch_size])
            out.append(p[:, 0] if self.head == "sigmoid" else p[:, 1])
        return np.concatenate(out) if out else np.zeros(0)

    def loss(self, output, y) -> float:
        if self.head == "sigmoid":
            return binary_cross_entropy(output, y)
        return cross_entropy(output, one_hot_labels(y, output.shape[-1]))

    def backward(self, y):
        """Gradients of the mean batch loss w.r.t. every parameter."""
        if not self._forward_done:
            raise RuntimeError("backward called before forward")
        top = self.layers[-1]
        if self.head == "softmax":
            p = top._cache
            # fused softmax + cross-entropy: dC/dlogits = p - d
            grad = (p - one_hot_labels(y, p.shape[-1])) / p.shape[0]
        elif self.head == "sigmoid":
            _, _, _, a = top._cache
            grad = (a - np.asarray(y, dtype=np.float64).reshape(-1, 1)) / a.shape[0]
            grad = top.backward(grad, pre_activation=True)
        else:
            raise ValueError("network has no softmax or sigmoid output head")
        for layer in reversed(self.layers[:-1]):
            grad = layer.backward(grad)
        return [(n, name, self.layers[n].grads[name]) for n, name, _ in self.parameters()]

    def flat_parameters(self) -> np.ndarray:
        arrays = [a.ravel() for _, _, a in self.parameters()]
        return np.concatenate(arrays) if arrays else np.zeros(0)

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        offset = 0
        for _, _, arr in self.parameters():
            size = arr.size
            arr[...] = flat[offset:offset + size].reshape(arr.shape)
            offset += size
        if offset != flat.size:
            raise ModelFileError(f"parameter count mismatch: expected {offset}, got {flat.size}")


def one_hot_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(np.float64)
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), y.astype(np.int64)] = 1.0
    return out


# ----------------------------------------------------------------- training

@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 100
    momentum: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def sgd_update(params, grads, eta: float, velocity=None, momentum: float = 0.0):
    """In-place descent step ``w <- w - eta * dC/dw`` (optionally with momentum)."""
    for n, (w, g) in enumerate(zip(params, grads)):
        if w.shape != g.shape:
            raise ShapeError(f"parameter {n}: shape {w.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingDivergence(f"parameter {n}: {bad} non-finite gradient entries")
        if momentum and velocity is not None:
            velocity[n] *= momentum
            velocity[n] -= eta * g
            w += velocity[n]
        else:
            w -= eta * g
        if not np.all(np.isfinite(w)):
            raise TrainingDivergence(f"parameter {n}: non-finite values after the update")
    return params


def fit(net: Network, x, y, config: TrainConfig, log_every: int = 0) -> list[float]:
    """Minibatch SGD; returns the mean training loss of every epoch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng([config.seed, 7])
    trainable = [(n, name, arr) for n, name, arr in net.parameters() if n not in net.frozen]
    velocity = [np.zeros_like(a) for _, _, a in trainable]
    history = []
    # overflow is caught explicitly below and reported as TrainingDivergence
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.permutation(len(x))
            total = 0.0
            for start in range(0, len(x), config.batch_size):
                idx = order[start:start + config.batch_size]
                out = net.forward(x[idx], training=True, rng=rng)
                batch_loss = net.loss(out, y[idx])
                if not math.isfinite(batch_loss):
                    raise TrainingDivergence(f"non-finite loss at epoch {epoch}", epoch)
                total += batch_loss * len(idx)
                grads = {(n, name): g for n, name, g in net.backward(y[idx])}
                try:
                    sgd_update([a for _, _, a in trainable],
                               [grads[(n, name)] for n, name, _ in trainable],
                               config.learning_rate, velocity, config.momentum)
                except TrainingDivergence as exc:
                    raise TrainingDivergence(f"epoch {epoch}: {exc}", epoch) from exc
            history.append(total / len(x))
            if log_every and (epoch + 1) % log_every == 0:
                logging.getLogger(__name__).info("epoch %d loss %.5f", epoch + 1, history[-1])
    return history


# ------------------------------------------------------------ gradient check

def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))


def numeric_gradient(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        up = f()
        arr[i] = old - step
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad


def check_network_gradients(net: Network, x, y, step: float = 1e-5, training: bool = False,
                            seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    In training mode the dropout masks are replayed from ``seed`` on every
    evaluation, so the loss is a fixed smooth function of the parameters.
    """
    def loss():
        rng = np.random.default_rng(seed)
        return net.loss(net.forward(x, training, rng), y)

    loss()
    analytic = {(n, name): g.copy() for n, name, g in net.backward(y)}
    worst = 0.0
    for n, name, arr in net.parameters():
        numeric = numeric_gradient(loss, arr, step)
        worst = max(worst, float(relative_error(analytic[(n, name)], numeric).max()))
    return worst


def check_layer_gradients(layer: Layer, x, step: float = 1e-5, seed: int = 0, training=False) -> float:
    """Gradient check of one layer under a random linear read-out loss."""
    x = np.asarray(x, dtype=np.float64).copy()
    probe = np.random.default_rng(seed + 1).normal(size=layer.forward(x, training, np.random.default_rng(seed)).shape)

    def loss():
        return float((layer.forward(x, training, np.random.default_rng(seed)) * probe).sum())

    loss()
    dx = layer.backward(probe)
    grads = {k: v.copy() for k, v in layer.grads.items()}
    worst = float(relative_error(dx, numeric_gradient(loss, x, step)).max())
    for name, arr in layer.params.items():
        worst = max(worst, float(relative_error(grads[name], numeric_gradient(loss, arr, step)).max()))
    return worst


# --------------------------------------------------------------- model files

def save_model(path, header: dict, arrays: list[np.ndarray]) -> None:
    """Write a JSON header line followed by little-endian float64 parameters."""
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = dict(header)
    header["format"] = MODEL_FORMAT
    header["version"] = MODEL_VERSION
    header["arrays"] = [list(np.shape(a)) for a in arrays]
    header["payload_bytes"] = len(payload)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_model(path) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ModelFileError(f"{path}: missing model header (truncated or not a model file)")
    try:
        header = json.loads(data[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFileError(f"{path}: corrupt model header") from exc
    if not isinstance(header, dict) or header.get("format") != MODEL_FORMAT:
        raise ModelFileError(f"{path}: not a {MODEL_FORMAT} file")
    if header.get("version") != MODEL_VERSION:
        raise ModelFileError(f"{path}: model version {header.get('version')} unsupported "
                             f"(expected {MODEL_VERSION})")
    payload = data[nl + 1:]
    if len(payload) != header["payload_bytes"]:
        raise ModelFileError(f"{path}: payload is {len(payload)} bytes, header says "
                             f"{header['payload_bytes']} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ModelFileError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays, offset = [], 0
    for shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        arrays.append(flat[offset:offset + size].reshape(shape).astype(np.float64))
        offset += size
    return header, arrays
