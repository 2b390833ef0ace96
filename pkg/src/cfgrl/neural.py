"""Small dense networks with hand-written reverse-mode gradients and Adam.

Networks train in float32; pass ``dtype=np.float64`` for gradient checks.
Weights are stored (fan_in, fan_out) so a batch ``x`` of shape (B, fan_in)
maps through ``x @ W + b``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

_SQRT_2PI = np.sqrt(2.0 * np.pi)
ACTIVATIONS = ("gelu", "mish")


def _gelu(z):
    return z * ndtr(z)


def _gelu_grad(z):
    return ndtr(z) + z * np.exp(-0.5 * z * z) / _SQRT_2PI


def _mish(z):
    return z * np.tanh(np.logaddexp(0.0, z))


def _mish_grad(z):
    t = np.tanh(np.logaddexp(0.0, z))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return t + z * (1.0 - t * t) * sig


_ACT = {"gelu": (_gelu, _gelu_grad), "mish": (_mish, _mish_grad)}


class DenseNet:
    """Feedforward net; hidden layers use `activation`, the last layer is linear."""

    def __init__(self, layer_widths, activation="gelu", rng=None, dtype=np.float32, init="scaled"):
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2 or min(widths) < 0 or min(widths[1:]) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        if activation not in _ACT:
            raise ValueError(f"unknown nonlinearity {activation!r}; expected one of {ACTIVATIONS}")
        self.layer_widths = widths
        self.activation = activation
        self.dtype = np.dtype(dtype)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if init == "zeros":
                W = np.zeros((fan_in, fan_out))
            elif init == "scaled":
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            else:
                raise ValueError(f"unknown init {init!r}")
            self.weights.append(W.astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_params(self, params) -> None:
        params = list(params)
        if len(params) != 2 * len(self.weights):
            raise ValueError("parameter count mismatch")
        for i in range(len(self.weights)):
            W, b = params[2 * i], params[2 * i + 1]
            if W.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError(f"shape mismatch in layer {i}")
            self.weights[i] = np.asarray(W, dtype=self.dtype)
            self.biases[i] = np.asarray(b, dtype=self.dtype)

    def copy(self) -> "DenseNet":
        new = DenseNet.__new__(DenseNet)
        new.layer_widths = list(self.layer_widths)
        new.activation = self.activation
        new.dtype = self.dtype
        new.weights = [W.copy() for W in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def astype(self, dtype) -> "DenseNet":
        new = self.copy()
        new.dtype = np.dtype(dtype)
        new.weights = [W.astype(dtype) for W in new.weights]
        new.biases = [b.astype(dtype) for b in new.biases]
        return new

    def _as_batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got shape {x.shape}")
        return x, single

    def forward(self, x) -> np.ndarray:
        x, single = self._as_batch(x)
        act = _ACT[self.activation][0]
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if i == last else act(z).astype(self.dtype, copy=False)
        return h[0] if single else h

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass that also returns what `backward` needs."""
        x, _ = self._as_batch(x)
        act = _ACT[self.activation][0]
        cache = []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            cache.append((h, z))
            h = z if i == last else act(z).astype(self.dtype, copy=False)
        return h, cache

    def backward(self, cache, dout):
        """Gradients of sum(dout * output) w.r.t. parameters and input."""
        dact = _ACT[self.activation][1]
        grads_W = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        g = np.asarray(dout, dtype=self.dtype)
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h_in, z = cache[i]
            if i != last:
                g = g * dact(z).astype(self.dtype, copy=False)
            grads_W[i] = h_in.T @ g
            grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        grads = []
        for gW, gb in zip(grads_W, grads_b):
            grads += [gW, gb]
        return grads, g


def forward(net: DenseNet, x) -> np.ndarray:
    return net.forward(x)


def loss_and_grad(net: DenseNet, inputs, targets, sample_weights=None):
    """Weighted squared error  sum_i w_i ||f(x_i) - y_i||^2 / sum_i w_i."""
    out, cache = net.forward_cache(inputs)
    targets = np.asarray(targets, dtype=net.dtype).reshape(out.shape)
    B = out.shape[0]
    w = np.ones(B, dtype=net.dtype) if sample_weights is None else np.asarray(sample_weights, dtype=net.dtype)
    if w.shape != (B,) or np.any(w < 0):
        raise ValueError("sample weights must be a non-negative vector, one per sample")
    total = w.sum()
    if total <= 0:
        raise ValueError("sample weights are all zero")
    diff = out - targets
    loss = float(np.sum(w * np.sum(diff * diff, axis=1)) / total)
    dout = (2.0 / total) * w[:, None] * diff
    grads, _ = net.backward(cache, dout)
    return loss, grads


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr: float = 3e-4, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)

    def update(self, params, grads) -> None:
        """In-place Adam step with bias correction."""
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("parameter/gradient/state length mismatch")
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape or m.shape != p.shape:
                raise ValueError(f"shape mismatch {g.shape} vs {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("non-finite parameter after Adam update")


def adam_step(net: DenseNet, state: AdamState, grads) -> tuple[DenseNet, AdamState]:
    state.update(net.params(), grads)
    return net, state


# -- blob persistence -------------------------------------------------------

_MAGIC = b"CFGB"


def save_blob(path, tensors: dict, header: dict | None = None) -> None:
    """Write named float32 tensors: magic, uint32 header length, JSON header, data."""
    meta = dict(header or {})
    meta.update(
        {
            "byte_order": "little",
            "dtype": "float32",
            "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()],
        }
    )
    head = json.dumps(meta, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values())
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(head)) + head + body)


def load_blob(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter blob")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + n])
    if header.get("byte_order") != "little" or header.get("dtype") != "float32":
        raise ValueError(f"{path}: unsupported blob encoding")
    offset = 8 + n
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(spec["shape"])
        tensors[spec["name"]] = arr.astype(np.float32)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensors")
    return header, tensors


def net_tensors(net: DenseNet, prefix: str = "") -> dict:
    out = {}
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}W{i}"] = W
        out[f"{prefix}b{i}"] = b
    return out


def net_from_tensors(widths, activation, tensors: dict, prefix: str = "", dtype=np.float32) -> DenseNet:
    net = DenseNet(widths, activation, dtype=dtype, init="zeros")
    params = []
    for i in range(len(widths) - 1):
        params += [tensors[f"{prefix}W{i}"], tensors[f"{prefix}b{i}"]]
    net.set_params(params)
    return net


def save_net(net: DenseNet, path) -> None:
    save_blob(path, net_tensors(net), {"layer_widths": net.layer_widths, "nonlinearity": net.activation})


def load_net(path, dtype=np.float32) -> DenseNet:
    header, tensors = load_blob(path)
    return net_from_tensors(header["layer_widths"], header["nonlinearity"], tensors, dtype=dtype)
