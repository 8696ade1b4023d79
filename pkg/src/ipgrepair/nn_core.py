"""Minimal dense feed-forward classifier.

Inference records every layer's post-activation output, gradients are
computed by hand-written reverse mode over a per-layer cache, and training
is plain mini-batch SGD with the batch gradient *summed* (not averaged).

Layer 0 of every model is a ``flatten`` layer whose output is the raw input,
so layer indices line up with provenance-graph node layers.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DataFormatError,
    DimensionError,
    InvalidGeometryError,
)

log = logging.getLogger(__name__)

KINDS = ("flatten", "dense", "batchnorm1d", "dropout")
ACTIVATIONS = (None, "relu")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_FLOOR = 1e-12
FORMAT_VERSION = 1

# hook(layer_index, post_activation_batch) -> possibly patched batch
Hook = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class Layer:
    kind: str
    units: int
    activation: Optional[str] = None
    weights: Optional[np.ndarray] = None  # (out_units, in_units)
    bias: Optional[np.ndarray] = None
    # gamma, beta_shift, running_mean, running_var
    bn_params: Optional[tuple] = None
    rate: float = 0.0  # dropout, training only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.units < 1:
            raise ConfigurationError("layer needs at least one unit")
        if self.kind == "dense":
            if self.weights is None or self.bias is None:
                raise ConfigurationError("dense layer needs weights and bias")
            self.weights = np.asarray(self.weights, dtype=np.float64)
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.weights.ndim != 2 or self.weights.shape[0] != self.units:
                raise DimensionError(
                    f"dense weights must be (units, in), got {self.weights.shape}"
                )
            if self.bias.shape != (self.units,):
                raise DimensionError("dense bias shape mismatch")
        if self.kind == "batchnorm1d":
            if self.bn_params is None:
                one = np.ones(self.units)
                zero = np.zeros(self.units)
                self.bn_params = (one, zero.copy(), zero.copy(), one.copy())
            params = tuple(np.asarray(p, dtype=np.float64) for p in self.bn_params)
            if len(params) != 4 or any(p.shape != (self.units,) for p in params):
                raise DimensionError("batchnorm needs four per-unit parameter vectors")
            if np.any(params[3] <= 0):
                raise ConfigurationError("batchnorm running_var must be positive")
            self.bn_params = params
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigurationError("dropout rate must be in [0, 1)")

    @property
    def in_units(self) -> Optional[int]:
        return self.weights.shape[1] if self.kind == "dense" else None

    def param_names(self) -> tuple:
        if self.kind == "dense":
            return ("weights", "bias")
        if self.kind == "batchnorm1d":
            return ("gamma", "beta")
        return ()

    def get_param(self, name: str) -> np.ndarray:
        if name in ("weights", "bias"):
            return getattr(self, name)
        return self.bn_params[0 if name == "gamma" else 1]


@dataclass
class Model:
    layers: list
    input_dim: int
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        if not self.layers or self.layers[0].kind != "flatten":
            raise ConfigurationError("layer 0 must be a flatten (input) layer")
        if self.layers[0].units != self.input_dim:
            raise DimensionError("flatten units must equal input_dim")
        prev = self.input_dim
        for i, layer in enumerate(self.layers[1:], start=1):
            if layer.kind == "flatten":
                raise ConfigurationError("flatten is only allowed as layer 0")
            if layer.kind == "dense" and layer.in_units != prev:
                raise DimensionError(
                    f"layer {i}: expects {layer.in_units} inputs, previous has {prev}"
                )
            if layer.kind in ("batchnorm1d", "dropout") and layer.units != prev:
                raise DimensionError(f"layer {i}: elementwise layer width mismatch")
            prev = layer.units
        if prev != self.num_classes:
            raise DimensionError("last layer width must equal num_classes")

    @property
    def unit_counts(self) -> list:
        return [layer.units for layer in self.layers]

    @property
    def digest(self) -> str:
        """SHA-256 over layer metadata and the little-endian float64 parameter bytes."""
        h = hashlib.sha256()
        h.update(_canonical([self.input_dim, self.num_classes]).encode())
        for layer in self.layers:
            h.update(_canonical([layer.kind, layer.units, layer.activation, layer.rate]).encode())
            arrays = [layer.weights, layer.bias] + list(layer.bn_params or ())
            for a in arrays:
                if a is not None:
                    h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def edge_weights(self, layer_index: int) -> np.ndarray:
        """Effective weight matrix (dst_units, src_units) feeding ``layer_index``.

        Dense layers use their weights; batchnorm is the per-unit scale
        gamma / sqrt(var + eps); dropout is the identity at inference.
        """
        if layer_index < 1:
            raise ConfigurationError("the input layer has no incoming edges")
        layer = self.layers[layer_index]
        if layer.kind == "dense":
            return layer.weights
        if layer.kind == "batchnorm1d":
            gamma, _, _, var = layer.bn_params
            return np.diag(gamma / np.sqrt(var + BN_EPS))
        return np.eye(layer.units)

    def is_elementwise(self, layer_index: int) -> bool:
        return self.layers[layer_index].kind in ("batchnorm1d", "dropout")


@dataclass
class ActivationTrace:
    per_layer: list = field(default_factory=list)


# ---------------------------------------------------------------- construction


def init_mlp(input_dim, hidden, num_classes, seed=0, batchnorm=False, dropout=0.0):
    """Dense ReLU network; weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)

    def dense(width, fan_in, act):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(width, fan_in))
        b = rng.uniform(-bound, bound, size=width)
        return Layer("dense", width, act, w, b)

    layers = [Layer("flatten", input_dim)]
    prev = input_dim
    for width in hidden:
        if batchnorm:
            layers.append(dense(width, prev, None))
            layers.append(Layer("batchnorm1d", width, "relu"))
        else:
            layers.append(dense(width, prev, "relu"))
        if dropout > 0:
            layers.append(Layer("dropout", width, rate=dropout))
        prev = width
    layers.append(dense(num_classes, prev, None))
    return Model(layers, input_dim, num_classes)


def mnist_architecture(seed=0, input_dim=784, num_classes=10):
    """flatten(784) -> Dense 350 ReLU -> Dense 50 ReLU -> Dense logits."""
    return init_mlp(input_dim, [350, 50], num_classes, seed=seed)


# ------------------------------------------------------------------- inference


def _as_batch(model: Model, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    X = X.reshape(X.shape[0], int(np.prod(X.shape[1:])))
    if X.shape[1] != model.input_dim:
        raise DimensionError(
            f"input has {X.shape[1]} features, model expects {model.input_dim}"
        )
    return X


def _apply_activation(layer: Layer, z: np.ndarray) -> np.ndarray:
    if layer.activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _layer_eval(layer: Layer, h: np.ndarray) -> np.ndarray:
    if layer.kind == "dense":
        z = h @ layer.weights.T + layer.bias
    elif layer.kind == "batchnorm1d":
        gamma, beta, mean, var = layer.bn_params
        z = (h - mean) / np.sqrt(var + BN_EPS) * gamma + beta
    else:
        z = h
    return _apply_activation(layer, z)


def run_layers(model: Model, h: np.ndarray, start: int = 0, hook: Optional[Hook] = None,
               record: bool = True):
    """Run layers ``start..end`` on a batch ``h`` (the input to layer ``start``).

    Returns (logits, outputs) where outputs[i] is the post-activation output of
    layer ``start + i`` (after any hook patch). ``record=False`` skips keeping them.
    """
    outs = []
    for i in range(start, len(model.layers)):
        h = _layer_eval(model.layers[i], h)
        if hook is not None:
            h = hook(i, h)
        if record:
            outs.append(h)
    return h, outs


def forward_batch(model: Model, X, hook: Optional[Hook] = None, record: bool = True):
    return run_layers(model, _as_batch(model, X), 0, hook, record)


def forward(model: Model, x):
    """Single-sample inference: (logits, ActivationTrace)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size != model.input_dim:
        raise DimensionError(
            f"input has {x.size} features, model expects {model.input_dim}"
        )
    logits, outs = forward_batch(model, x.reshape(1, -1))
    return logits[0], ActivationTrace([o[0] for o in outs])


def predict(model: Model, X, hook: Optional[Hook] = None) -> np.ndarray:
    logits, _ = forward_batch(model, X, hook, record=False)
    return np.argmax(logits, axis=1)


def accuracy(model: Model, X, y, hook: Optional[Hook] = None) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ConfigurationError("accuracy of an empty set")
    return float(np.mean(predict(model, X, hook) == y))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ConfigurationError(f"label {label} outside {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], PROB_FLOOR)))


def batch_loss(logits: np.ndarray, y) -> np.ndarray:
    """Per-sample cross-entropy for a batch of logits."""
    p = softmax(logits)
    picked = p[np.arange(len(p)), np.asarray(y, dtype=int)]
    return -np.log(np.maximum(picked, PROB_FLOOR))


# ------------------------------------------------------------------- gradients


def _forward_cache(model: Model, X: np.ndarray, train: bool, rng=None):
    caches = []
    h = X
    for layer in model.layers:
        c = {"x": h}
        if layer.kind == "dense":
            z = h @ layer.weights.T + layer.bias
        elif layer.kind == "batchnorm1d":
            gamma, beta, rmean, rvar = layer.bn_params
            if train:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                n = h.shape[0]
                rmean *= 1 - BN_MOMENTUM
                rmean += BN_MOMENTUM * mu
                unbiased = var * n / (n - 1) if n > 1 else var
                rvar *= 1 - BN_MOMENTUM
                rvar += BN_MOMENTUM * unbiased
            else:
                mu, var = rmean, rvar
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mu) * inv
            c.update(xhat=xhat, inv=inv, batch_stats=train)
            z = xhat * gamma + beta
        elif layer.kind == "dropout" and train and layer.rate > 0:
            mask = (rng.random(h.shape) >= layer.rate) / (1.0 - layer.rate)
            c["mask"] = mask
            z = h * mask
        else:
            z = h
        c["z"] = z
        h = _apply_activation(layer, z)
        caches.append(c)
    return h, caches


def _backward(model: Model, caches, dlogits: np.ndarray):
    grads = [dict() for _ in model.layers]
    g = dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        layer, c = model.layers[i], caches[i]
        if layer.activation == "relu":
            g = g * (c["z"] > 0)
        if layer.kind == "dense":
            grads[i]["weights"] = g.T @ c["x"]
            grads[i]["bias"] = g.sum(axis=0)
            g = g @ layer.weights
        elif layer.kind == "batchnorm1d":
            gamma = layer.bn_params[0]
            xhat = c["xhat"]
            grads[i]["gamma"] = (g * xhat).sum(axis=0)
            grads[i]["beta"] = g.sum(axis=0)
            dxhat = g * gamma
            if c["batch_stats"]:
                n = g.shape[0]
                g = c["inv"] / n * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                g = dxhat * c["inv"]
        elif "mask" in c:
            g = g * c["mask"]
    return grads, g


def loss_and_grads(model: Model, X, y, train: bool = False, rng=None):
    """Summed cross-entropy over the batch, per-layer parameter grads, input grad."""
    X = _as_batch(model, X)
    y = np.asarray(y, dtype=int)
    logits, caches = _forward_cache(model, X, train, rng)
    p = softmax(logits)
    loss = float(np.sum(-np.log(np.maximum(p[np.arange(len(y)), y], PROB_FLOOR))))
    d = p.copy()
    d[np.arange(len(y)), y] -= 1.0
    grads, dx = _backward(model, caches, d)
    return loss, grads, dx


def input_gradient(model: Model, X, y) -> np.ndarray:
    """Batched gradient of each sample's loss w.r.t. its own input (inference mode)."""
    X = _as_batch(model, X)
    _, _, dx = loss_and_grads(model, X, y)
    return dx


def grad_input(model: Model, x, label: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size != model.input_dim:
        raise DimensionError("input shape does not match the model")
    return input_gradient(model, x.reshape(1, -1), [label])[0].reshape(x.shape)


# -------------------------------------------------------------------- training


def train_sgd(model: Model, X, y, lr: float = 0.005, batch_size: int = 32,
              epochs: int = 10, seed: int = 0, history: Optional[list] = None) -> Model:
    """theta <- theta - lr * sum over the batch of grad L. Returns a trained copy."""
    X = _as_batch(model, X)
    y = np.asarray(y, dtype=int)
    if len(X) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if len(X) != len(y):
        raise DimensionError("features and labels differ in length")
    if lr < 0 or batch_size < 1 or epochs < 0:
        raise ConfigurationError("need lr >= 0, batch_size >= 1, epochs >= 0")
    model = model.copy()
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            loss, grads, _ = loss_and_grads(model, X[idx], y[idx], train=True, rng=rng)
            total += loss
            if lr == 0:
                continue
            for layer, g in zip(model.layers, grads):
                for name, value in g.items():
                    layer.get_param(name)[...] -= lr * value
        log.debug("epoch %d mean loss %.5f", epoch, total / len(X))
        if history is not None:
            history.append(total / len(X))
    return model


# ---------------------------------------------------------------- conv geometry


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def _conv_len(n, k, s, p, d):
    if n < 1 or k < 1 or s < 1 or d < 1 or p < 0:
        raise InvalidGeometryError(
            "sizes, kernel, stride and dilation must be positive; padding >= 0"
        )
    out = (n + 2 * p - d * (k - 1) - 1) // s + 1
    if out < 1:
        raise InvalidGeometryError(f"output size {out} < 1")
    return out


def conv_output_shape(in_size, kernel, stride=1, padding=0, dilation=1):
    """Conv1D length (int input) or Conv2D (H, W) (pair input) output shape."""
    if isinstance(in_size, (tuple, list)):
        dims = zip(in_size, _pair(kernel), _pair(stride), _pair(padding), _pair(dilation))
        return tuple(_conv_len(*args) for args in dims)
    return _conv_len(in_size, kernel, stride, padding, dilation)


# --------------------------------------------------------------- serialization


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def model_to_dict(model: Model) -> dict:
    layers = []
    for layer in model.layers:
        entry = {
            "kind": layer.kind,
            "units": layer.units,
            "activation": layer.activation,
            "weights": layer.weights.tolist() if layer.weights is not None else None,
            "bias": layer.bias.tolist() if layer.bias is not None else None,
            "bn_params": [p.tolist() for p in layer.bn_params] if layer.bn_params else None,
        }
        if layer.kind == "dropout":
            entry["rate"] = layer.rate
        layers.append(entry)
    return {
        "version": FORMAT_VERSION,
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "layers": layers,
    }


def model_from_dict(doc: dict) -> Model:
    try:
        if doc["version"] != FORMAT_VERSION:
            raise DataFormatError(f"unsupported model version {doc['version']}")
        layers = [
            Layer(
                kind=e["kind"],
                units=e["units"],
                activation=e.get("activation"),
                weights=e.get("weights"),
                bias=e.get("bias"),
                bn_params=e.get("bn_params"),
                rate=e.get("rate", 0.0),
            )
            for e in doc["layers"]
        ]
        return Model(layers, doc["input_dim"], doc["num_classes"])
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed model document: {exc}") from exc


def save_model(model: Model, path) -> None:
    Path(path).write_text(_canonical(model_to_dict(model)))


def load_model(path) -> Model:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return model_from_dict(doc)


def hand_model(weights: Sequence, biases: Sequence = None, activations: Sequence = None):
    """Dense model from explicit weight matrices; hidden layers ReLU, output linear."""
    weights = [np.asarray(w, dtype=np.float64) for w in weights]
    biases = biases or [np.zeros(w.shape[0]) for w in weights]
    if activations is None:
        activations = ["relu"] * (len(weights) - 1) + [None]
    layers = [Layer("flatten", weights[0].shape[1])]
    for w, b, act in zip(weights, biases, activations):
        layers.append(Layer("dense", w.shape[0], act, w, np.asarray(b, dtype=np.float64)))
    return Model(layers, weights[0].shape[1], weights[-1].shape[0])
