"""Dense tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient
the output remembers its parents and a closure mapping the upstream gradient
to one gradient per parent.  ``Tensor.backward`` walks that graph once in
reverse topological order and then releases it, so a second call on the same
root raises :class:`TapeError`.
"""
from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT = np.float32


class NumericError(ArithmeticError):
    """A forward or backward value became NaN/Inf."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class TapeError(RuntimeError):
    """The computation graph was already consumed by a backward pass."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        if isinstance(data, np.floating):
            data = np.asarray(data)  # 0-d results come back as numpy scalars; keep their precision
        elif not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=FLOAT)
        elif data.dtype.kind != "f":
            data = data.astype(FLOAT)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self._consumed:
            raise TapeError("backward already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise TapeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"implicit gradient needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    _check_finite(g, "backward")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    return _topological(root)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype or FLOAT))


def _make(out: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    _check_finite(out, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(out, True, parents, backward, op)
    return Tensor(out, False, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _make as NumericError
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype),), "relu")


def minimum(x: Tensor, ceiling: float) -> Tensor:
    """Elementwise min against a constant; gradient is zero where clamped."""
    keep = x.data < ceiling
    return _make(np.minimum(x.data, np.asarray(ceiling, x.data.dtype)), (x,),
                 lambda g: (g * keep,), "minimum")


# ---------------------------------------------------------------- reductions & shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), backward, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``x`` of any rank; folds leading axes into one GEMM."""
    lead = x.shape[:-1]
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply shapes {x.shape} and {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _make(out.reshape(lead + (wd.shape[1],)), parents, backward, "linear")


# ---------------------------------------------------------------- normalisation & softmax

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    d = xd.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    if gd.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gd.shape}/{bias.shape} vs feature size {d}")
    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise NumericError("l2_normalize: zero vector")
    out = xd / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------- lookups

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather; the gradient scatter-adds into the looked-up rows."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids[(ids < 0) | (ids >= n)].flat[0])
        raise IndexError(f"embedding id {bad} outside [0, {n})")
    shape, dtype = table.shape, table.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------- convolution & pooling

def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over time.  ``x`` is ``[T, d_in]`` or ``[B, T, d_in]``."""
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    k, d_in, d_out = kernel.shape
    B, T, c = xd.shape
    if c != d_in:
        raise ShapeError(f"conv1d: input channels {x.shape} vs kernel {kernel.shape}")
    if T + 2 * padding < k:
        raise ShapeError(f"conv1d: window {k} larger than padded length {T + 2 * padding}")
    xp = np.pad(xd, ((0, 0), (padding, padding), (0, 0))) if padding else xd
    t_out = (T + 2 * padding - k) // stride + 1
    span = stride * (t_out - 1) + 1
    # cols[b, t, j, :] = xp[b, t*stride + j, :]
    cols = np.stack([xp[:, j:j + span:stride] for j in range(k)], axis=2)
    w2 = kernel.data.reshape(k * d_in, d_out)
    cols2 = cols.reshape(B * t_out, k * d_in)
    out = (cols2 @ w2).reshape(B, t_out, d_out)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(B * t_out, d_out)
        gx = gk = gb = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, t_out, k, d_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + span:stride] += gcols[:, :, j]
            gx = gxp[:, padding:padding + T]
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gk = (cols2.T @ g2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out[0] if squeeze else out, parents, backward, "conv1d")


def maxpool1d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over sliding windows in time; ties route the gradient to the lowest index."""
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, T, d = xd.shape
    if T < window:
        raise ShapeError(f"maxpool1d: length {T} shorter than window {window}")
    t_out = (T - window) // stride + 1
    span = stride * (t_out - 1) + 1
    wins = np.stack([xd[:, j:j + span:stride] for j in range(window)], axis=2)
    arg = wins.argmax(axis=2)  # first maximum wins ties
    out = np.take_along_axis(wins, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        g3 = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        for j in range(window):
            gx[:, j:j + span:stride] += np.where(arg == j, g3, 0)
        return (gx[0] if squeeze else gx,)

    return _make(out[0] if squeeze else out, (x,), backward, "maxpool1d")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 channels-last 2D cross-correlation: ``[N,H,W,C] * [kh,kw,C,O]``."""
    N, H, W, C = x.shape
    kh, kw, c_in, c_out = kernel.shape
    if c_in != C:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kernel.shape[:2]} larger than padded input")
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate([xp[:, i:i + ho, j:j + wo] for i, j in offsets], axis=-1)
    cols2 = cols.reshape(-1, kh * kw * C)
    w2 = kernel.data.reshape(kh * kw * C, c_out)
    out = (cols2 @ w2).reshape(N, ho, wo, c_out)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gx = gk = gb = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(N, ho, wo, kh * kw, C)
            gxp = np.zeros_like(xp)
            for n, (i, j) in enumerate(offsets):
                gxp[:, i:i + ho, j:j + wo] += gcols[:, :, :, n]
            gx = gxp[:, padding:padding + H, padding:padding + W]
        if kernel.requires_grad:
            gk = (cols2.T @ g2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool on ``[N,H,W,C]`` (odd trailing rows/cols dropped).

    Ties route the gradient to the first window element in row-major order.
    """
    N, H, W, C = x.shape
    h2, w2 = H // 2, W // 2
    xd = x.data
    views = [xd[:, i:2 * h2:2, j:2 * w2:2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (views[k] == out) & ~taken
            taken |= hit
            gx[:, i:2 * h2:2, j:2 * w2:2] = np.where(hit, g, 0)
        return (gx,)

    return _make(out, (x,), backward, "maxpool2d")


# ---------------------------------------------------------------- parameters

class ParameterStore:
    """Ordered name -> trainable :class:`Tensor` mapping."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] = ()):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, arr in items:
            self.add(name, arr)

    def add(self, name: str, arr) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(arr, dtype=getattr(arr, "dtype", FLOAT)), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def copy(self, dtype=None) -> "ParameterStore":
        out = ParameterStore()
        for k, v in self._params.items():
            out.add(k, v.data.astype(dtype or v.data.dtype, copy=True))
        return out

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def num_elements(self) -> int:
        return int(np.sum([v.data.size for v in self._params.values()]))


def finite_diff_check(f: Callable[[ParameterStore], Tensor], params: ParameterStore,
                      step: float = 1e-3, sample_count: int = 32, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``sample_count`` coordinates are drawn uniformly over all parameter
    entries.  The relative error at a coordinate is
    ``|ga - gn| / max(1e-8, |ga| + |gn|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite")
    loss.backward()
    names = params.names()
    sizes = np.array([params[n].data.size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(sample_count, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for idx in np.sort(flat):
        which = int(np.searchsorted(bounds, idx, side="right"))
        local = int(idx - (bounds[which - 1] if which else 0))
        t = params[names[which]]
        analytic = 0.0 if t.grad is None else float(t.grad.reshape(-1)[local])
        view = t.data.reshape(-1)
        orig = view[local].copy()
        view[local] = orig + step
        up = float(f(params).data)
        view[local] = orig - step
        down = float(f(params).data)
        view[local] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("objective is not finite under perturbation")
        numeric = (up - down) / (2 * step)
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    params.zero_grad()
    return worst
