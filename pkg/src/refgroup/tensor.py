"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op works on arbitrary leading (batch) axes, so the model code can run a
whole minibatch through one graph. Gradients broadcast back with summation
over expanded axes.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when a caller violates an op precondition."""


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = None
        self._op = _op

    # ---- plumbing -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the value buffer."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # ---- operator sugar -------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else (), _op=op)
    if req:
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---- graph traversal ------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every differentiable tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---- piecewise-constant value replay --------------------------------------
# Values that the tape treats as constants (stop-gradient outputs, argmax
# one-hots) can be recorded on one forward pass and replayed on later ones.
# Finite differences taken under replay differentiate exactly the surrogate
# function whose gradient the tape computes.

class ConstantReplay:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.recording = True
        self._pos = 0

    def replay(self):
        self.recording = False
        self._pos = 0
        return self

    def __call__(self, arr: np.ndarray) -> np.ndarray:
        if self.recording:
            self.values.append(np.array(arr, copy=True))
            return arr
        v = self.values[self._pos]
        self._pos += 1
        if v.shape != np.shape(arr):
            raise ContractError("constant replay desynchronised: shape changed between passes")
        return v


_REPLAY: ConstantReplay | None = None


@contextlib.contextmanager
def constant_replay(replay: ConstantReplay):
    global _REPLAY
    prev, _REPLAY = _REPLAY, replay
    try:
        yield replay
    finally:
        _REPLAY = prev


def nondiff(arr) -> Tensor:
    """Wrap the output of a non-differentiable computation as a constant."""
    arr = np.asarray(arr, dtype=np.float64)
    if _REPLAY is not None:
        arr = _REPLAY(arr)
    return Tensor(arr)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass, zero derivative in the backward pass."""
    out = nondiff(x.data)
    out._op = "sg"
    return out


# ---- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / b.data ** 2)
    return _make(a.data / b.data, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), "pow", lambda g: _accum(a, g * p * a.data ** (p - 1)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), "exp", lambda g: _accum(a, g * out_data))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: _accum(a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), "sqrt", lambda g: _accum(a, g * 0.5 / out_data))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sigmoid(a.data)
    return _make(out_data, (a,), "sigmoid", lambda g: _accum(a, g * out_data * (1.0 - out_data)))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without cancellation for large |a|."""
    a = as_tensor(a)
    x = a.data
    out_data = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out_data, (a,), "log_sigmoid", lambda g: _accum(a, g * _sigmoid(-x)))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out_data, (a,), "softplus", lambda g: _accum(a, g * _sigmoid(x)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: _accum(a, g * mask))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner))
    return _make(out_data, (a,), "gelu", bw)


# ---- reductions and shape ops --------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape))
    return _make(out_data, (a,), "sum", bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: _accum(a, g.transpose(inv)))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), "swapaxes",
                 lambda g: _accum(a, np.swapaxes(g, ax1, ax2)))


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)
    return _make(a.data[idx], (a,), "getitem", bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)
    return _make(out_data, tuple(tensors), "concat", bw)


# ---- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)
    return _make(a.data @ b.data, (a, b), "matmul", bw)


# ---- normalisation and softmax -------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))
    return _make(out_data, (x,), "softmax", bw)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m)
    out_k = m + np.log(s.sum(axis=axis, keepdims=True))
    weights = s / s.sum(axis=axis, keepdims=True)
    out_data = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, g * weights)
    return _make(out_data, (x,), "logsumexp", bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match last axis {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
    return _make(out_data, (x, gamma, beta), "layer_norm", bw)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along ``axis``; zero vectors map to zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out_data = x.data / denom
    live = norm > eps

    def bw(g):
        # below eps the denominator is constant, so the map is linear
        proj = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, (g - np.where(live, out_data * proj, 0.0)) / denom)
    return _make(out_data, (x,), "l2_normalize", bw)


# ---- spatial ops (channels-last: ... x H x W x C) ------------------------

def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv2d(x, k, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation. ``x``: (..., H, W, Cin); ``k``: (kh, kw, Cin, Cout)."""
    x, k = as_tensor(x), as_tensor(k)
    kh, kw, cin, cout = k.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {k.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    lead = x.shape[:-3]
    h, w = x.shape[-3], x.shape[-2]
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w} with pad {pad}")
    widths = [(0, 0)] * len(lead) + [(pad, pad), (pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-3, -2))
    # win: (..., Hp-kh+1, Wp-kw+1, Cin, kh, kw)
    win = win[..., ::stride, ::stride, :, :, :][..., :ho, :wo, :, :, :]
    cols = win.reshape(*lead, ho, wo, cin * kh * kw)
    kmat = k.data.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    out_data = cols @ kmat

    def bw(g):
        if k.requires_grad:
            gk = cols.reshape(-1, cin * kh * kw).T @ g.reshape(-1, cout)
            _accum(k, gk.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3))
        if x.requires_grad:
            gcols = (g @ kmat.T).reshape(*lead, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[..., i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[..., i, j]
            _accum(x, gxp[..., pad:pad + h, pad:pad + w, :])
    return _make(out_data, (x, k), "conv2d", bw)


def upsample2x(x, mode: str = "nearest") -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    if mode != "nearest":
        raise ContractError(f"upsample2x: unsupported mode {mode!r}")
    x = as_tensor(x)
    out_data = np.repeat(np.repeat(x.data, 2, axis=-3), 2, axis=-2)

    def bw(g):
        lead = g.shape[:-3]
        h2, w2, c = g.shape[-3:]
        _accum(x, g.reshape(*lead, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(-4, -2)))
    return _make(out_data, (x,), "upsample2x", bw)


# ---- Gumbel noise ---------------------------------------------------------

GUMBEL_CLAMP = 1e-12


def gumbel_transform(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gumbel_sample(rng, shape) -> Tensor:
    """Standard Gumbel(0, 1) draws from ``rng`` (a :class:`refgroup.rng.Rng`)."""
    return nondiff(gumbel_transform(rng.uniform(shape)))
