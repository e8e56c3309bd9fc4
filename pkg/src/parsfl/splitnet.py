"""Fully connected network with manual backprop, cut into bottom and top halves.

Parameters live in one flat float64 vector. Layer ``k`` contributes its weight
matrix (``in x out``, row-major) followed by its bias. The first
``split_layer`` layers form the bottom submodel, the rest the top submodel, so
the full vector is simply ``concat(bottom, top)``.

Every layer except the last applies the hidden activation; the last layer emits
logits scored with softmax cross-entropy (mean over the batch).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, ShapeError

ACTIVATIONS = ("tanh", "linear")
SMASHED_BYTES_PER_VALUE = 4  # single-precision wire convention

_MAGIC = b"PSFL"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIHH")  # magic, version, layer count, split layer, activation


@dataclass(frozen=True)
class Architecture:
    layer_dims: tuple
    split_layer: int
    activation: str = "tanh"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 3 or any(d < 1 for d in dims):
            raise ConfigurationError(f"need >= 2 layers with positive widths, got {dims}")
        if not 1 <= self.split_layer <= self.num_layers - 1:
            raise ConfigurationError(
                f"split_layer must be in [1, {self.num_layers - 1}], got {self.split_layer}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def layer_sizes(self) -> list[int]:
        d = self.layer_dims
        return [d[k] * d[k + 1] + d[k + 1] for k in range(self.num_layers)]

    @property
    def bottom_size(self) -> int:
        return sum(self.layer_sizes[: self.split_layer])

    @property
    def top_size(self) -> int:
        return sum(self.layer_sizes[self.split_layer:])

    @property
    def total_size(self) -> int:
        return self.bottom_size + self.top_size

    @property
    def smashed_width(self) -> int:
        return self.layer_dims[self.split_layer]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def top_to_bottom_cost_ratio(self) -> float:
        """Per-sample multiply-add ratio of the top half to the bottom half."""
        d = self.layer_dims
        macs = [d[k] * d[k + 1] for k in range(self.num_layers)]
        return sum(macs[self.split_layer:]) / sum(macs[: self.split_layer])


@dataclass
class SplitModel:
    arch: Architecture
    bottom: np.ndarray
    top: np.ndarray

    def __post_init__(self):
        self.bottom = np.asarray(self.bottom, dtype=np.float64)
        self.top = np.asarray(self.top, dtype=np.float64)
        if self.bottom.shape != (self.arch.bottom_size,) or self.top.shape != (self.arch.top_size,):
            raise ShapeError(
                f"expected bottom/top sizes {self.arch.bottom_size}/{self.arch.top_size}, "
                f"got {self.bottom.shape}/{self.top.shape}"
            )

    @classmethod
    def from_full(cls, arch: Architecture, params: np.ndarray) -> "SplitModel":
        return cls(arch, *split(arch, params))

    @property
    def params(self) -> np.ndarray:
        return splice(self.arch, self.bottom, self.top)

    def copy(self) -> "SplitModel":
        return SplitModel(self.arch, self.bottom.copy(), self.top.copy())


@dataclass
class SmashedBatch:
    activations: np.ndarray
    labels: np.ndarray
    byte_size: int

    def __post_init__(self):
        if self.activations.shape[0] != len(self.labels):
            raise ShapeError("activation rows and label count differ")


def init_params(arch: Architecture, seed: int) -> np.ndarray:
    """Uniform ``[-a, a]`` with ``a = 1/sqrt(fan_in)`` for weights and biases."""
    rng = np.random.default_rng(seed)
    parts = []
    d = arch.layer_dims
    for k in range(arch.num_layers):
        a = 1.0 / np.sqrt(d[k])
        parts.append(rng.uniform(-a, a, size=d[k] * d[k + 1] + d[k + 1]))
    return np.concatenate(parts)


def _layers(vec: np.ndarray, dims) -> list[tuple[np.ndarray, np.ndarray]]:
    out, off = [], 0
    for k in range(len(dims) - 1):
        n_in, n_out = dims[k], dims[k + 1]
        W = vec[off:off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = vec[off:off + n_out]
        off += n_out
        out.append((W, b))
    return out


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else z


def _forward(layers, X, kind, last_linear):
    """Return the list of layer inputs plus the final output."""
    inputs = [X]
    h = X
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        h = z if (last_linear and k == len(layers) - 1) else _act(z, kind)
        inputs.append(h)
    return inputs


def _backward(layers, inputs, d_out, kind, last_linear):
    """Backprop ``d_out`` (gradient w.r.t. the stack output); return (flat grad, d_input)."""
    grads = []
    g = d_out
    n = len(layers)
    for k in range(n - 1, -1, -1):
        W, _ = layers[k]
        if not (last_linear and k == n - 1) and kind == "tanh":
            g = g * (1.0 - inputs[k + 1] ** 2)
        grads.append((inputs[k].T @ g).ravel())
        grads.append(g.sum(axis=0))
        g = g @ W.T
    grads.reverse()
    # reversed order is (b_k, W_k) pairs; swap back into (W_k, b_k)
    flat = []
    for k in range(n):
        flat.append(grads[2 * k + 1])
        flat.append(grads[2 * k])
    return np.concatenate(flat), g


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.mean(np.log(p[np.arange(n), labels]))
    d = p
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def _check_features(arch, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ShapeError(f"expected features of shape (n, {arch.input_dim}), got {X.shape}")
    return X


def _check_vec(vec, size, what):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (size,):
        raise ShapeError(f"{what} must have length {size}, got shape {vec.shape}")
    return vec


def _bottom_dims(arch):
    return arch.layer_dims[: arch.split_layer + 1]


def _top_dims(arch):
    return arch.layer_dims[arch.split_layer:]


def forward_bottom(arch: Architecture, bottom: np.ndarray, features, labels) -> SmashedBatch:
    """Activations at the split layer for one mini-batch."""
    X = _check_features(arch, features)
    bottom = _check_vec(bottom, arch.bottom_size, "bottom params")
    acts = _forward(_layers(bottom, _bottom_dims(arch)), X, arch.activation, last_linear=False)[-1]
    labels = np.asarray(labels, dtype=np.int64)
    return SmashedBatch(acts, labels, acts.shape[0] * acts.shape[1] * SMASHED_BYTES_PER_VALUE)


def top_gradient(arch: Architecture, top: np.ndarray, batches: list[SmashedBatch]):
    """Averaged top gradient over workers plus each worker's activation gradient.

    Each worker's loss is the mean over its own batch; the returned activation
    gradient for worker ``i`` is the derivative of that worker's loss.
    Returns ``(top_grad, act_grads, mean_loss)``.
    """
    if not batches:
        raise ContractViolation("top_step needs at least one worker batch")
    top = _check_vec(top, arch.top_size, "top params")
    layers = _layers(top, _top_dims(arch))
    width = arch.smashed_width
    total = np.zeros_like(top)
    act_grads, losses = [], []
    for batch in batches:
        A = batch.activations
        if A.ndim != 2 or A.shape[1] != width:
            raise ShapeError(f"smashed data must have width {width}, got {A.shape}")
        inputs = _forward(layers, A, arch.activation, last_linear=True)
        loss, d_logits = _softmax_xent(inputs[-1], batch.labels)
        g, dA = _backward(layers, inputs, d_logits, arch.activation, last_linear=True)
        total += g
        act_grads.append(dA)
        losses.append(loss)
    return total / len(batches), act_grads, float(np.mean(losses))


def top_step(arch: Architecture, top: np.ndarray, batches: list[SmashedBatch], lr: float):
    """One top-worker iteration: ``top - lr/N_c * sum_i grad_i``.

    Returns ``(new_top, act_grads)``; the gradients go back to the bottom workers.
    """
    grad, act_grads, _ = top_gradient(arch, top, batches)
    return top - lr * grad, act_grads


def bottom_gradient(arch: Architecture, bottom: np.ndarray, features, act_grad) -> np.ndarray:
    X = _check_features(arch, features)
    bottom = _check_vec(bottom, arch.bottom_size, "bottom params")
    act_grad = np.asarray(act_grad, dtype=np.float64)
    if act_grad.shape != (X.shape[0], arch.smashed_width):
        raise ShapeError(
            f"activation gradient must have shape {(X.shape[0], arch.smashed_width)}, got {act_grad.shape}"
        )
    layers = _layers(bottom, _bottom_dims(arch))
    inputs = _forward(layers, X, arch.activation, last_linear=False)
    g, _ = _backward(layers, inputs, act_grad, arch.activation, last_linear=False)
    return g


def bottom_step(arch: Architecture, bottom: np.ndarray, features, act_grad, lr: float) -> np.ndarray:
    return bottom - lr * bottom_gradient(arch, bottom, features, act_grad)


def splice(arch: Architecture, bottom: np.ndarray, top: np.ndarray) -> np.ndarray:
    bottom = _check_vec(bottom, arch.bottom_size, "bottom params")
    top = _check_vec(top, arch.top_size, "top params")
    return np.concatenate([bottom, top])


def split(arch: Architecture, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    params = _check_vec(params, arch.total_size, "full params")
    return params[: arch.bottom_size].copy(), params[arch.bottom_size:].copy()


# -- monolithic (unsplit) path ------------------------------------------------


def logits(arch: Architecture, params: np.ndarray, features) -> np.ndarray:
    X = _check_features(arch, features)
    params = _check_vec(params, arch.total_size, "full params")
    return _forward(_layers(params, arch.layer_dims), X, arch.activation, last_linear=True)[-1]


def loss_and_gradient(arch: Architecture, params: np.ndarray, features, labels):
    X = _check_features(arch, features)
    params = _check_vec(params, arch.total_size, "full params")
    layers = _layers(params, arch.layer_dims)
    inputs = _forward(layers, X, arch.activation, last_linear=True)
    loss, d_logits = _softmax_xent(inputs[-1], np.asarray(labels, dtype=np.int64))
    g, _ = _backward(layers, inputs, d_logits, arch.activation, last_linear=True)
    return loss, g


def loss(arch: Architecture, params: np.ndarray, features, labels) -> float:
    z = logits(arch, params, features)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def sgd_step(arch: Architecture, params: np.ndarray, features, labels, lr: float) -> np.ndarray:
    _, g = loss_and_gradient(arch, params, features, labels)
    return params - lr * g


def accuracy(arch: Architecture, params: np.ndarray, features, labels) -> float:
    pred = np.argmax(logits(arch, params, features), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# -- checkpoint blob ----------------------------------------------------------


def to_bytes(arch: Architecture, params: np.ndarray) -> bytes:
    params = _check_vec(params, arch.total_size, "full params")
    header = _HEADER.pack(_MAGIC, _FORMAT_VERSION, arch.num_layers, arch.split_layer,
                          ACTIVATIONS.index(arch.activation))
    dims = np.asarray(arch.layer_dims, dtype="<u4").tobytes()
    return header + dims + params.astype("<f8").tobytes()


def from_bytes(blob: bytes) -> tuple[Architecture, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise ShapeError("checkpoint shorter than its header")
    magic, version, n_layers, split_layer, act = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise ShapeError(f"bad checkpoint magic {magic!r}")
    if version != _FORMAT_VERSION:
        raise ShapeError(f"unsupported checkpoint version {version}")
    off = _HEADER.size
    dims = np.frombuffer(blob, dtype="<u4", count=n_layers + 1, offset=off)
    off += 4 * (n_layers + 1)
    arch = Architecture(tuple(int(d) for d in dims), int(split_layer), ACTIVATIONS[act])
    params = np.frombuffer(blob, dtype="<f8", offset=off)
    if params.size != arch.total_size:
        raise ShapeError(f"checkpoint holds {params.size} params, architecture needs {arch.total_size}")
    return arch, params.astype(np.float64)


def save_params(path, arch: Architecture, params: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(arch, params))


def load_params(path) -> tuple[Architecture, np.ndarray]:
    return from_bytes(Path(path).read_bytes())
