"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` remembers the tensors it was computed from and a closure that
maps its output gradient to their input gradients.  Calling ``backward()``
on a scalar walks that graph in reverse topological order.  Every forward
pass builds a fresh graph; tracked tensors are never mutated in place.

Arrays default to float32.  A float64 ndarray passed in keeps its dtype,
which is occasionally useful for high-accuracy gradient checks.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))
        self.op = op
        self.shapes = shapes


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
        return np.asarray(data)
    return np.asarray(data, dtype=DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Tensors for a binary op; a Python scalar takes the other operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(b, dtype=a.data.dtype)
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(a, dtype=b.data.dtype), b
    return as_tensor(a), as_tensor(b)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.data.dtype)
    return _node(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out.astype(x.dtype), (a,), lambda g: (g * sig,))


def gradient_reverse(a, scale: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies the gradient by -scale."""
    a = as_tensor(a)
    return _node(a.data.copy(), (a,), lambda g: (-scale * g,))


# -- reductions and shape ops ------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(a, index) -> Tensor:
    """Gather rows of a 2-D tensor; ``index == -1`` yields a zero row."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("take_rows", a.shape)
    index = np.asarray(index)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = a.data[safe] * valid[..., None]

    def back(g):
        ga = np.zeros_like(a.data)
        gv = (g * valid[..., None]).reshape(-1, a.shape[1])
        np.add.at(ga, safe.reshape(-1), gv)
        return (ga,)

    return _node(out.astype(a.data.dtype), (a,), back)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), back)


def dense(x, W, b=None) -> Tensor:
    """x @ W + b over the last axis of ``x``; W has shape (in, out)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError("dense", x.shape, W.shape)
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError("dense bias", W.shape, b.shape)
        out = out + b.data
        parents.append(b)
    out = out.reshape(x.shape[:-1] + (W.shape[1],))

    def back(g):
        g2 = g.reshape(-1, W.shape[1])
        grads = [(g2 @ W.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, back)


# -- normalisation ---------------------------------------------------------

def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get zero weight."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (e / np.where(s > 0, s, 1)).astype(a.data.dtype)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, (a,), back)


def layer_norm(a, axes=-1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean and unit variance over ``axes`` (no affine)."""
    a = as_tensor(a)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(a.data.dtype)

    def back(g):
        gs = g.sum(axis=axes, keepdims=True)
        gx = (g * xhat).sum(axis=axes, keepdims=True)
        return ((inv / n) * (n * g - gs - xhat * gx),)

    return _node(xhat, (a,), back)


# -- convolution and pooling -----------------------------------------------

def conv(x, kernel, bias=None) -> Tensor:
    """Stride-1 'same' convolution, channels last.

    ``x``: (B, *spatial, Cin); ``kernel``: (*k, Cin, Cout) with odd sides.
    Works for any number of spatial dimensions (conv2d / conv3d below).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    nd = kernel.ndim - 2
    if nd < 1 or x.ndim != nd + 2 or x.shape[-1] != kernel.shape[-2]:
        raise ShapeError(f"conv{nd}d", x.shape, kernel.shape)
    ksz = kernel.shape[:nd]
    if any(k % 2 == 0 for k in ksz):
        raise ShapeError("conv (odd kernel sides required)", kernel.shape)
    cin, cout = kernel.shape[-2:]
    spatial = x.shape[1:-1]
    pads = [(0, 0)] + [(k // 2, k // 2) for k in ksz] + [(0, 0)]
    xp = np.pad(x.data, pads)
    win = sliding_window_view(xp, ksz, axis=tuple(range(1, nd + 1)))  # (B, *S, Cin, *k)
    perm = (0, *range(1, nd + 1), *range(nd + 2, 2 * nd + 2), nd + 1)
    cols = np.ascontiguousarray(np.transpose(win, perm)).reshape(-1, int(np.prod(ksz)) * cin)
    kmat = kernel.data.reshape(-1, cout)
    out = cols @ kmat
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(x.shape[:-1] + (cout,))

    def back(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        dcols = (g2 @ kmat.T).reshape(x.shape[:1] + spatial + ksz + (cin,))
        gxp = np.zeros_like(xp)
        for off in itertools.product(*[range(k) for k in ksz]):
            sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, spatial)) + (slice(None),)
            gxp[sl] += dcols[(slice(None),) * (nd + 1) + off]
        inner = (slice(None),) + tuple(slice(k // 2, k // 2 + s) for k, s in zip(ksz, spatial)) + (slice(None),)
        grads = [gxp[inner], gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, back)


def conv2d(x, kernel, bias=None) -> Tensor:
    if as_tensor(kernel).ndim != 4:
        raise ShapeError("conv2d", as_tensor(x).shape, as_tensor(kernel).shape)
    return conv(x, kernel, bias)


def conv3d(x, kernel, bias=None) -> Tensor:
    if as_tensor(kernel).ndim != 5:
        raise ShapeError("conv3d", as_tensor(x).shape, as_tensor(kernel).shape)
    return conv(x, kernel, bias)


def avgpool(x, n_axes: int = 2) -> Tensor:
    """Average neighbouring pairs along the first ``n_axes`` spatial axes.

    Axes of length 1 are left alone; an odd trailing element is dropped.
    """
    x = as_tensor(x)
    if x.ndim < n_axes + 2:
        raise ShapeError("avgpool", x.shape)
    factors = [2 if x.shape[1 + i] >= 2 else 1 for i in range(n_axes)]
    crop = tuple(slice(0, (x.shape[1 + i] // f) * f) for i, f in enumerate(factors))
    xc = x.data[(slice(None),) + crop]
    shape = [x.shape[0]]
    for i, f in enumerate(factors):
        shape += [xc.shape[1 + i] // f, f]
    rest = xc.shape[1 + n_axes:]
    shape += list(rest)
    red = tuple(2 + 2 * i for i in range(n_axes))
    denom = float(np.prod(factors))
    out = xc.reshape(shape).sum(axis=red) / denom

    def back(g):
        gx = np.zeros_like(x.data)
        ge = np.expand_dims(g, red)
        gx[(slice(None),) + crop] = np.broadcast_to(ge / denom, shape).reshape(xc.shape)
        return (gx,)

    return _node(out.astype(x.data.dtype), (x,), back)


# -- gradient checking -------------------------------------------------------

def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-3, dtype=DTYPE, rng=None,
               max_entries: int | None = None) -> float:
    """Largest discrepancy between backprop and central finite differences.

    ``f`` maps one or more tensors to a scalar tensor.  The error for each
    input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``;
    the maximum over inputs is returned.  ``max_entries`` limits the number
    of perturbed entries per input (chosen at random) for large inputs.
    """
    arrays = [np.array(a, dtype=dtype) for a in (x if isinstance(x, (list, tuple)) else [x])]
    leaves = [Tensor(a.copy(), requires_grad=True, dtype=dtype) for a in arrays]
    out = f(*leaves)
    out.backward()
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for k, arr in enumerate(arrays):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arr)
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = rng.choice(arr.size, max_entries, replace=False)
        a_sel, n_sel = [], []
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape)
            vals = []
            for sign in (1.0, -1.0):
                pert = [a.copy() for a in arrays]
                pert[k][idx] += sign * eps
                vals.append(float(np.asarray(f(*[Tensor(p, dtype=dtype) for p in pert]).data, dtype=np.float64)))
            n_sel.append((vals[0] - vals[1]) / (2 * eps))
            a_sel.append(float(analytic[idx]))
        a_sel, n_sel = np.array(a_sel), np.array(n_sel)
        scale = max(np.max(np.abs(a_sel), initial=0.0), np.max(np.abs(n_sel), initial=0.0))
        if scale == 0:
            continue
        worst = max(worst, float(np.max(np.abs(a_sel - n_sel)) / scale))
    return worst
