"""Reverse-mode automatic differentiation on dense float32 tensors.

The engine is a define-by-run tape: every operation returns a new Tensor
holding its value, its parents, and a closure that routes the incoming
gradient to those parents. ``backward`` walks the tape in reverse
topological order. Only the ops needed by the rest of the package are
implemented; there is no general broadcasting beyond bias-style adds.

Tensors are immutable once created (training code mutates leaf ``data``
buffers between graph builds, never mid-graph). A single graph is
single-threaded; independent graphs may run concurrently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError

DTYPE = np.float32


def _as_f32(values) -> np.ndarray:
    arr = np.asarray(values, dtype=DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float32 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Optional[Callable] = None,
                 op: str = "leaf"):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # ---- graph traversal -------------------------------------------------

    def _toposort(self) -> list:
        order, seen, stack = [], set(), [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward is None and not self._parents:
            raise StateError("backward called on a leaf with no recorded graph; run forward first")
        order = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- convenience operators -------------------------------------------

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        return mul(self, other if isinstance(other, Tensor) else Tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)


def _node(data, parents: Sequence[Tensor], backward: Optional[Callable], op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(DTYPE, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite output from op '{op}'")
    return arr


# ---- elementwise ops -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _node(out, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _node(out, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))
    return _node(out, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    out = a.data * c

    def back(g):
        _accum(a, g * c)
    return _node(out, (a,), back, "scale")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def back(g):
        _accum(a, g * (a.data > 0))
    return _node(out, (a,), back, "relu")


def exp(a: Tensor) -> Tensor:
    out = _check_finite(np.exp(a.data), "exp")

    def back(g):
        _accum(a, g * out)
    return _node(out, (a,), back, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite(np.log(a.data), "log")

    def back(g):
        _accum(a, g / a.data)
    return _node(out, (a,), back, "log")


def sqrt(a: Tensor) -> Tensor:
    out = _check_finite(np.sqrt(a.data), "sqrt")

    def back(g):
        _accum(a, g / (2.0 * np.maximum(out, 1e-12)))
    return _node(out, (a,), back, "sqrt")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def back(g):
        _accum(a, g * 2.0 * a.data)
    return _node(out, (a,), back, "square")


# ---- reductions ------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=DTYPE)

    def back(g):
        _accum(a, np.full(a.shape, g, dtype=DTYPE))
    return _node(out, (a,), back, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean(dtype=DTYPE)

    def back(g):
        _accum(a, np.full(a.shape, g / n, dtype=DTYPE))
    return _node(out, (a,), back, "mean")


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))
    return _node(out, (a,), back, "sum_axis")


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    s = sum_axis(a, axis, keepdims)
    return scale(s, 1.0 / n)


# ---- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def back(g):
        _accum(a, g.reshape(a.shape))
    return _node(out, (a,), back, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def back(g):
        _accum(a, np.transpose(g, inv))
    return _node(out, (a,), back, "transpose")


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, gp)
    return _node(out, tuple(parts), back, "concat")


def embed(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: out[i] = table[idx[i]] (grad scatter-adds)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def back(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)
    return _node(out, (table,), back, "embed")


# ---- matmul ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))
    return _node(out, (a, b), back, "matmul")


# ---- conv / pool / upsample -------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """2-D convolution, stride 1, zero 'same' padding.

    x: (N, C, H, W); w: (F, C, kh, kw); out: (N, F, H, W).
    Implemented as a sum of kernel-offset tensordots, which keeps memory
    flat and lets BLAS do the heavy lifting.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel channels {w.shape}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, h, wd, f), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + h, j:j + wd]
            out += np.tensordot(patch, w.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out = out + b.data[None, :, None, None]

    def back(g):
        gmoved = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (N,H,W,F)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + wd] += np.tensordot(
                        gmoved, w.data[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
            _accum(x, gxp[:, :, ph:ph + h, pw:pw + wd])
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + h, j:j + wd]
                    gw[:, :, i, j] = np.tensordot(gmoved, patch, axes=([0, 1, 2], [0, 2, 3]))
            _accum(w, gw)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, back, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first element."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {x.shape}")
    h2, w2 = h // 2, w // 2
    blocks = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accum(x, gx)
    return _node(out, (x,), back, "maxpool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor doubling of both spatial dims."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        n, c, h, w = x.data.shape
        gx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        _accum(x, gx)
    return _node(out, (x,), back, "upsample2x")


# ---- normalization / attention / losses -------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * out)
    return _node(out, (a,), back, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        n = x.shape[-1]
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
            _accum(x, gx)
    return _node(out, (x, gain, bias), back, "layernorm")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    q, k, v: (..., L, D). ``mask`` is an additive float array broadcastable
    to the (..., L, L) score matrix (use -1e9 to block positions).
    """
    d = q.shape[-1]
    scores = matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)))
    scores = scale(scores, 1.0 / float(np.sqrt(d)))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    attn = softmax(scores, axis=-1)
    return matmul(attn, v)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy for (N, K) logits and integer targets (N,)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, K) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), targets]
    out = _check_finite(nll.mean(dtype=DTYPE), "cross_entropy")

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        _accum(logits, (g / n) * p)
    return _node(out, (logits,), back, "cross_entropy")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    out = _check_finite((diff * diff).mean(dtype=DTYPE), "mse")

    def back(g):
        gd = g * 2.0 / diff.size * diff
        _accum(pred, gd)
        _accum(target, -gd)
    return _node(out, (pred, target), back, "mse")


def linmap(x: Tensor, fwd: Callable[[np.ndarray], np.ndarray],
           adj: Callable[[np.ndarray], np.ndarray], op: str = "linmap") -> Tensor:
    """Apply an arbitrary linear operator given its forward and adjoint.

    Used for operators (FFT-domain filters and the like) that are cheaper
    through specialized transforms than through explicit matrices. The
    caller guarantees ``adj`` is the true adjoint of ``fwd``; the gradient
    check suite verifies the pairs the package registers.
    """
    out = fwd(x.data)

    def back(g):
        _accum(x, adj(g).astype(DTYPE, copy=False))
    return _node(out, (x,), back, op)


# ---- optimizer --------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One adaptive-moment update with bias correction, in place.

    ``params`` and ``grads`` map names to float32 arrays; ``state`` persists
    first/second moments and the step counter between calls.
    """
    t = state.get("t", 0) + 1
    state["t"] = t
    b1t = 1.0 - beta1 ** t
    b2t = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"NaN/inf gradient for parameter '{name}'")
        m = state.setdefault("m_" + name, np.zeros_like(p))
        v = state.setdefault("v_" + name, np.zeros_like(p))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p -= (lr * (m / b1t) / (np.sqrt(v / b2t) + eps)).astype(p.dtype)


class Adam:
    """Stateful wrapper around :func:`adam_step` for named Tensor parameters."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict = {}

    def step(self) -> None:
        datas = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items()}
        adam_step(datas, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


# ---- initializers ------------------------------------------------------------

def he_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """He-scaled Gaussian init for relu stacks."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)
