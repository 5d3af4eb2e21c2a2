"""Small fully connected network with hand-written backpropagation.

Parameters live in one flat float64 vector so that whole networks can be
added, subtracted and interpolated.  Layout, layer by layer: the weight
matrix of shape ``(n_in, n_out)`` in C order followed by the ``n_out`` biases.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Tuple, Union

import numpy as np

MAGIC = b"FALC"
FORMAT_VERSION = 1


class TrainingError(ArithmeticError):
    """Raised when an update would put non-finite values into a network."""


class ModelFormatError(ValueError):
    pass


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


class Mlp:
    """ReLU hidden layers, identity output."""

    def __init__(self, layer_sizes: Sequence[int], params: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.layer_sizes = sizes
        n = param_count(sizes)
        if params is None:
            params = he_uniform(sizes, rng if rng is not None else np.random.default_rng(0))
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {params.shape}")
        if not np.all(np.isfinite(params)):
            raise TrainingError("non-finite parameters")
        self.theta = params
        self._bind()

    def _bind(self):
        self.weights = []
        self.biases = []
        off = 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(self.theta[off:off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.theta[off:off + b])
            off += b

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.theta.copy())

    def __eq__(self, other):
        return (isinstance(other, Mlp) and self.layer_sizes == other.layer_sizes
                and np.array_equal(self.theta, other.theta))

    def __repr__(self):
        return f"Mlp({list(self.layer_sizes)})"

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Output for one input vector or a batch of row vectors."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.n_in or h.ndim > 2:
            raise ValueError(f"input shape {h.shape} does not match {self.n_in} inputs")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    __call__ = forward

    def backward(self, inputs: np.ndarray, targets: np.ndarray,
                 mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
        """Loss and gradient of ``sum(mask * (out - targets)**2) / B``."""
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        if x.shape[1] != self.n_in or y.shape != (x.shape[0], self.n_out):
            raise ValueError(f"batch shapes {x.shape}/{y.shape} do not fit {self.layer_sizes}")
        if mask is not None:
            mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
            if mask.shape != y.shape:
                raise ValueError("mask shape must match targets")
        bsz = x.shape[0]
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        err = h - y
        if mask is not None:
            err = err * mask
        loss = float(np.sum(err * err) / bsz)
        grad = np.empty_like(self.theta)
        gw, gb = _views(grad, self.layer_sizes)
        delta = 2.0 * err / bsz
        for i in range(last, -1, -1):
            gw[i][...] = acts[i].T @ delta
            gb[i][...] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0.0)
        return loss, grad

    def sgd_step(self, grad: np.ndarray, lr: float) -> "Mlp":
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.theta.shape:
            raise ValueError("gradient layout does not match parameters")
        if not np.all(np.isfinite(grad)):
            raise TrainingError("non-finite gradient")
        with np.errstate(over="ignore", invalid="ignore"):
            new = self.theta - lr * grad
        if not np.all(np.isfinite(new)):
            raise TrainingError("update produced non-finite parameters")
        self.theta[...] = new
        return self

    def get_params(self) -> np.ndarray:
        return self.theta.copy()

    def set_params(self, params: np.ndarray) -> "Mlp":
        params = np.asarray(params, dtype=np.float64)
        if params.shape != self.theta.shape:
            raise ValueError(f"expected {self.theta.size} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise TrainingError("non-finite parameters")
        self.theta[...] = params
        return self

    # -- persistence ---------------------------------------------------
    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<HH", FORMAT_VERSION, len(self.layer_sizes))
        head += struct.pack(f"<{len(self.layer_sizes)}I", *self.layer_sizes)
        return head + self.theta.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Mlp":
        net, used = read_model(data, 0)
        if used != len(data):
            raise ModelFormatError(f"{len(data) - used} trailing bytes after model")
        return net

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Mlp":
        return cls.from_bytes(Path(path).read_bytes())


def read_model(data: bytes, offset: int) -> Tuple[Mlp, int]:
    """Decode one model starting at ``offset``; return it and the end offset."""
    def take(n):
        nonlocal offset
        if offset + n > len(data):
            raise ModelFormatError("truncated model data")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(4) != MAGIC:
        raise ModelFormatError("bad magic")
    version, n_layers = struct.unpack("<HH", take(4))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    sizes = struct.unpack(f"<{n_layers}I", take(4 * n_layers))
    n = param_count(sizes)
    theta = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
    return Mlp(sizes, theta), offset


def write_model(fh: BinaryIO, net: Mlp) -> None:
    fh.write(net.to_bytes())


def _views(theta, sizes):
    ws, bs = [], []
    off = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(theta[off:off + a * b].reshape(a, b))
        off += a * b
        bs.append(theta[off:off + b])
        off += b
    return ws, bs


def he_uniform(layer_sizes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    theta = np.zeros(param_count(layer_sizes))
    ws, _ = _views(theta, layer_sizes)
    for w in ws:
        limit = np.sqrt(6.0 / w.shape[0])
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return theta


# functional spellings
def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: Mlp, inputs, targets, mask=None) -> np.ndarray:
    return net.backward(inputs, targets, mask)[1]


def sgd_step(net: Mlp, grad: np.ndarray, lr: float) -> Mlp:
    return net.sgd_step(grad, lr)


def get_params(net: Mlp) -> np.ndarray:
    return net.get_params()


def set_params(net: Mlp, params: np.ndarray) -> Mlp:
    return net.set_params(params)
