"""Small float64 tensor kernel with reverse-mode autodiff.

Only what the forecaster needs: elementwise arithmetic with broadcasting,
matrix products, tanh/sigmoid, softmax, the carb-focus renormalization, an
LSTM cell, additive attention, dense layers, MSE, and Adam.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import InvalidInputError, ModelError

CHECKPOINT_VERSION = 1
_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), _backward=None, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}{', grad' if self.requires_grad else ''})"

    def zero_grad(self):
        self.grad = None

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor through every recorded op."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(as_tensor(o), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(*ts) -> bool:
    return any(t.requires_grad for t in ts)


def _out(data, parents, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise ModelError("non-finite value produced in forward pass")
    if _GRAD_ENABLED and _track(*parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g, b.shape))

    return _out(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(-g, b.shape))

    return _out(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._acc(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g * a.data, b.shape))

    return _out(a.data * b.data, (a, b), bw)


def matmul(a, w) -> Tensor:
    """``a[..., k] @ w[k, j]`` (or ``w[k]``); ``w`` must be 1-D or 2-D."""
    a, w = as_tensor(a), as_tensor(w)
    if w.data.ndim not in (1, 2) or a.shape[-1] != w.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch {a.shape} @ {w.shape}")
    out = a.data @ w.data

    def bw(g):
        if w.data.ndim == 1:
            if a.requires_grad:
                a._acc(g[..., None] * w.data)
            if w.requires_grad:
                w._acc(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1))
            return
        if a.requires_grad:
            a._acc(g @ w.data.T)
        if w.requires_grad:
            w._acc(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, w.shape[1]))

    return _out(out, (a, w), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        a._acc(g * (1.0 - y * y))

    return _out(y, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        a._acc(g * y * (1.0 - y))

    return _out(y, (a,), bw)


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        a._acc(full)

    return _out(a.data[idx], (a,), bw)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._acc(g[tuple(sl)])

    return _out(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._acc(np.take(g, i, axis=axis))

    return _out(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.shape))

    return _out(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._acc(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _out(y, (a,), bw)


def carb_focus(weights: Tensor, mask, boost: float = 1.10) -> Tensor:
    """Scale masked attention weights by ``boost`` and renormalize along the last axis.

    Rows without any masked entry pass through untouched, so the plain softmax
    is preserved exactly when nothing is boosted.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != weights.shape:
        raise InvalidInputError(f"boost mask shape {mask.shape} != weights shape {weights.shape}")
    w = weights.data
    f = np.where(mask, boost, 1.0)
    active = mask.any(axis=-1, keepdims=True)
    u = w * f
    s = u.sum(axis=-1, keepdims=True)
    y = np.where(active, u / s, w)

    def bw(g):
        gu = g / s - (g * u).sum(axis=-1, keepdims=True) / (s * s)
        weights._acc(np.where(active, gu * f, g))

    return _out(y, (weights,), bw)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``sum_i weights[..., i] * values[..., i, :]``."""
    out = np.einsum("...n,...nh->...h", weights.data, values.data)

    def bw(g):
        if weights.requires_grad:
            weights._acc(np.einsum("...h,...nh->...n", g, values.data))
        if values.requires_grad:
            values._acc(weights.data[..., None] * g[..., None, :])

    return _out(out, (weights, values), bw)


def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != t.shape:
        raise InvalidInputError(f"mse shape mismatch {pred.shape} vs {t.shape}")
    d = pred.data - t

    def bw(g):
        pred._acc(g * 2.0 * d / d.size)

    return _out(np.array(np.mean(d * d)), (pred,), bw)


# ------------------------------------------------------------------- layers


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def param(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "linear"):
        self.W = param(xavier_uniform(rng, in_dim, out_dim), f"{name}.W")
        self.b = param(np.zeros(out_dim), f"{name}.b")

    def parameters(self) -> List[Tensor]:
        return [self.W, self.b]

    def __call__(self, x) -> Tensor:
        return linear(self, x)


def linear(layer: Linear, x) -> Tensor:
    return add(matmul(x, layer.W), layer.b)


class LstmCellParams:
    """Fused gate weights, column blocks ordered input, forget, cell, output."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, name: str = "lstm"):
        if input_dim < 1 or hidden_dim < 1:
            raise InvalidInputError("LSTM dims must be >= 1")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        H = hidden_dim
        self.W = param(xavier_uniform(rng, input_dim + H, 4 * H), f"{name}.W")
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0
        self.b = param(b, f"{name}.b")

    def parameters(self) -> List[Tensor]:
        return [self.W, self.b]


def lstm_step(p: LstmCellParams, x, h, z) -> Tuple[Tensor, Tensor]:
    """One LSTM update; returns the new hidden state and cell state."""
    x, h, z = as_tensor(x), as_tensor(h), as_tensor(z)
    if x.shape[-1] != p.input_dim or h.shape[-1] != p.hidden_dim or z.shape != h.shape:
        raise InvalidInputError(
            f"lstm_step shape mismatch: x {x.shape}, h {h.shape}, z {z.shape} for {p.input_dim}->{p.hidden_dim}"
        )
    H = p.hidden_dim
    gates = add(matmul(concat([x, h], axis=-1), p.W), p.b)
    i = sigmoid(gates[..., 0:H])
    f = sigmoid(gates[..., H : 2 * H])
    g = tanh(gates[..., 2 * H : 3 * H])
    o = sigmoid(gates[..., 3 * H : 4 * H])
    z_new = add(mul(f, z), mul(i, g))
    h_new = mul(o, tanh(z_new))
    return h_new, z_new


class AttentionParams:
    def __init__(self, hidden_dim: int, attn_dim: int, rng: np.random.Generator, name: str = "attn"):
        self.W_q = param(xavier_uniform(rng, hidden_dim, attn_dim), f"{name}.W_q")
        self.W_k = param(xavier_uniform(rng, hidden_dim, attn_dim), f"{name}.W_k")
        self.w_v = param(xavier_uniform(rng, attn_dim, 1, (attn_dim,)), f"{name}.w_v")

    def parameters(self) -> List[Tensor]:
        return [self.W_q, self.W_k, self.w_v]


def additive_attention(
    p: AttentionParams,
    query,
    keys,
    boost_mask=None,
    boost: float = 1.10,
    keys_proj: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Bahdanau scoring ``w_v . tanh(W_q q + W_k k_i)`` with optional carb focus.

    ``keys`` is ``[..., n, hidden]``; ``keys_proj`` may carry a precomputed
    ``keys @ W_k`` when the same keys are attended to repeatedly.
    Returns ``(context, weights)``.
    """
    query, keys = as_tensor(query), as_tensor(keys)
    if keys.data.ndim < 2 or keys.shape[-2] == 0:
        raise InvalidInputError("attention needs at least one key")
    if keys_proj is None:
        keys_proj = matmul(keys, p.W_k)
    q = matmul(query, p.W_q)
    q = getitem(q, (..., None, slice(None)))
    scores = matmul(tanh(add(keys_proj, q)), p.w_v)
    weights = softmax(scores, axis=-1)
    if boost_mask is not None:
        mask = np.broadcast_to(np.asarray(boost_mask, dtype=bool), weights.shape)
        if mask.any():
            weights = carb_focus(weights, mask, boost)
    return weighted_sum(weights, keys), weights


# ------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------- grad check


def numeric_gradient(loss_fn: Callable[[], float], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = loss_fn()
        flat[i] = old - eps
        down = loss_fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries meaningful."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over ``params``."""
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numeric_gradient(lambda: float(loss_fn().data), p, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(stem, arrays: Dict[str, np.ndarray], meta: dict) -> Tuple[Path, Path]:
    """Write ``stem.json`` (manifest) and ``stem.bin`` (little-endian f64 buffers, in manifest order)."""
    stem = Path(stem)
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    layers, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        offset += len(buf)
        chunks.append(buf)
    manifest = {"version": CHECKPOINT_VERSION, "layers": layers, "data_file": bin_path.name, **meta}
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return json_path, bin_path


def load_checkpoint(stem) -> Tuple[Dict[str, np.ndarray], dict]:
    stem = Path(stem)
    json_path = stem if stem.suffix == ".json" else stem.with_suffix(".json")
    manifest = json.loads(json_path.read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {manifest.get('version')!r}")
    raw = (json_path.parent / manifest["data_file"]).read_bytes()
    arrays = {}
    for layer in manifest["layers"]:
        a, n = layer["offset"], layer["nbytes"]
        if a + n > len(raw):
            raise ModelError(f"checkpoint data truncated at layer {layer['name']}")
        arrays[layer["name"]] = np.frombuffer(raw[a : a + n], dtype="<f8").astype(np.float64).reshape(layer["shape"])
    return arrays, manifest
