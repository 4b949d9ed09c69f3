"""Small dense feed-forward networks with hand-written backprop and Adam.

Inputs may be a single vector ``(n_in,)`` or a batch ``(N, n_in)``. Parameter
gradients from :func:`backward` are summed over the batch; callers average.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")

MAGIC = b"VVNN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_LAYER = struct.Struct("<IIB")


class ModelFormatError(ValueError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (n_out, n_in)
    bias: np.ndarray  # (n_out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight/bias shapes are inconsistent")


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weight.shape[1] != a.weight.shape[0]:
                raise ValueError("adjacent layer dimensions do not match")

    @property
    def n_in(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def init_net(sizes, activations, rng) -> DenseNet:
    """Glorot-uniform weights, zero biases. ``sizes`` includes input and output widths."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = np.sqrt(6.0 / (n_in + n_out))
        layers.append(Layer(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), act))
    return DenseNet(layers)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


def _as_batch(net, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.n_in:
        raise ValueError(f"input width {xb.shape[-1]} does not match network input {net.n_in}")
    return xb, single


def forward(net: DenseNet, x) -> np.ndarray:
    h, single = _as_batch(net, x)
    for layer in net.layers:
        h = _act(layer.activation, h @ layer.weight.T + layer.bias)
    return h[0] if single else h


def backward(net: DenseNet, x, upstream) -> GradientSet:
    """Reverse-mode gradient of ``sum(upstream * forward(net, x))``."""
    h, single = _as_batch(net, x)
    g = np.asarray(upstream, dtype=float)
    g = g[None, :] if single else g
    if g.shape != (h.shape[0], net.n_out):
        raise ValueError("upstream gradient does not match the network output")
    inputs, pre, post = [], [], []
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        h = _act(layer.activation, z)
        pre.append(z)
        post.append(h)
    gw = [None] * len(net.layers)
    gb = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        delta = g * _act_grad(layer.activation, pre[k], post[k])
        gw[k] = delta.T @ inputs[k]
        gb[k] = delta.sum(axis=0)
        g = delta @ layer.weight
    return GradientSet(gw, gb, g[0] if single else g)


def adam_init(net: DenseNet, lr: float = 1e-3, **kw) -> AdamState:
    return AdamState([np.zeros_like(p) for p in net.params()], [np.zeros_like(p) for p in net.params()], lr, **kw)


def adam_step(net: DenseNet, grads: GradientSet, state: AdamState, lr: float | None = None):
    """One bias-corrected Adam descent step, in place. Returns ``(net, state)``."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(net.params(), grads.params(), state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


def serialize(net: DenseNet) -> bytes:
    """Little-endian: magic, u16 version, u32 layer count, then per layer
    u32 n_in, u32 n_out, u8 activation tag, f64 weights (row-major), f64 bias."""
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(net.layers))]
    for layer in net.layers:
        n_out, n_in = layer.weight.shape
        parts.append(_LAYER.pack(n_in, n_out, ACTIVATIONS.index(layer.activation)))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize(data: bytes) -> DenseNet:
    if len(data) < _HEADER.size:
        raise ModelFormatError("truncated header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    off = _HEADER.size
    layers = []
    for _ in range(count):
        if off + _LAYER.size > len(data):
            raise ModelFormatError("truncated layer header")
        n_in, n_out, tag = _LAYER.unpack_from(data, off)
        off += _LAYER.size
        if tag >= len(ACTIVATIONS):
            raise ModelFormatError(f"unknown activation tag {tag}")
        nbytes = 8 * (n_in * n_out + n_out)
        if off + nbytes > len(data):
            raise ModelFormatError("truncated parameters")
        w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=off).reshape(n_out, n_in).astype(float)
        off += 8 * n_in * n_out
        b = np.frombuffer(data, dtype="<f8", count=n_out, offset=off).astype(float)
        off += 8 * n_out
        layers.append(Layer(w, b, ACTIVATIONS[tag]))
    if off != len(data):
        raise ModelFormatError("trailing bytes after last layer")
    try:
        return DenseNet(layers)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None
