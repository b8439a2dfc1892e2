"""Dense numpy tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` whose ``_backward`` closure maps the
upstream gradient to one gradient per parent. :func:`backward` sorts the graph
topologically and replays those closures exactly once per node.

Feature maps are laid out ``[batch, channel, height, width]``; reductions and
scalar parameters use whatever rank they need.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
# longdouble is only used for finite-difference references
_FLOAT_TYPES = (np.float32, np.float64, np.longdouble)
_GRAD_ENABLED = True
# op names whose gradient rule is deliberately perturbed (gradcheck negative control)
_TAMPERED: set[str] = set()
# branch masks of piecewise ops, collected while a monitor is active
_BRANCHES: list | None = None


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_TYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine-wide floating-point type."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def tampered_gradient(*ops: str):
    """Scale the gradient emitted by the named ops by 1.01 (test hook)."""
    _TAMPERED.update(ops)
    try:
        yield
    finally:
        _TAMPERED.difference_update(ops)


@contextlib.contextmanager
def branch_monitor():
    """Collect the branch masks chosen by piecewise-linear ops during a forward pass.

    Two passes that select identical branches evaluate the same smooth piece,
    so a finite difference between them is valid.
    """
    global _BRANCHES
    old, _BRANCHES = _BRANCHES, []
    try:
        yield _BRANCHES
    finally:
        _BRANCHES = old


def _branch(mask: np.ndarray) -> None:
    if _BRANCHES is not None:
        _BRANCHES.append(np.array(mask, copy=True))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, _op: str = ""):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=op)


def _toposort(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Interior nodes are released afterwards, so a graph can be replayed once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                g = np.asarray(g).reshape(node.shape)
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        if node._op in _TAMPERED:
            parent_grads = tuple(None if pg is None else pg * 1.01 for pg in parent_grads)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)
    return _make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    # past |z| ~ 37 (float64) the value rounds to exactly 0 or 1; keep it strictly inside
    fi = np.finfo(s.dtype)
    return np.clip(s, fi.tiny, 1.0 - fi.epsneg)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    _branch(pos)
    out = np.where(pos, x.data, x.data * slope)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    _branch(inside)
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    _branch(pick_a)

    def bw(g):
        return (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape))
    return _make(np.maximum(a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    _branch(pick_a)

    def bw(g):
        return (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape))
    return _make(np.minimum(a.data, b.data), (a, b), bw, "minimum")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy, computed from logits without overflow."""
    t = np.asarray(target, dtype=logits.dtype)
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (logits,), lambda g: (g * (_stable_sigmoid(z) - t),), "bce_with_logits")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _make(out, (x,), bw, "mean")


STD_EPS = 1e-12


def std(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Population standard deviation, ``sqrt(var + 1e-12)``."""
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    sd = np.sqrt((centered ** 2).mean(axis=axes, keepdims=True) + STD_EPS)
    out = sd if keepdims else sd.squeeze(axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * centered / (count * sd),)
    return _make(out, (x,), bw, "std")


def amax(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    m = x.data.max(axis=axes, keepdims=True)
    mask = x.data == m
    _branch(mask)
    mask = mask / mask.sum(axis=axes, keepdims=True)
    out = m if keepdims else m.squeeze(axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * mask,)
    return _make(out, (x,), bw, "amax")


# ---------------------------------------------------------------- structural

def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, xs[0].shape)) if i != axis % t.ndim):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {[u.shape for u in xs]}")
    return _make(np.concatenate([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return _make(out, (x,), bw, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects [m,k]@[k,n], got {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- feature-map ops

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad=0) -> Tensor:
    """Zero-padded 2-D cross-correlation over ``[n, c_in, h, w]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has c_in={c} channels but weight expects c_in={ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match c_out={co}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    ph, pw = _pair(pad)
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: output extents ({oh},{ow}) not positive for input h={h}, w={w}, "
                         f"kernel {kh}x{kw}, pad {pad}")

    wmat = weight.data.reshape(co, -1)
    if kh == 1 and kw == 1 and stride == 1 and ph == 0 and pw == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if (bias is not None and bias.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if kh == 1 and kw == 1 and stride == 1 and ph == 0 and pw == 0:
                gx = dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(n, oh, ow, c, kh, kw)
                gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, ph:ph + h, pw:pw + w]
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def pixel_unshuffle(x: Tensor, factor: int = 2) -> Tensor:
    """Space-to-depth: ``out[n, c*f*f + f*dy + dx, i, j] = x[n, c, f*i + dy, f*j + dx]``."""
    n, c, h, w = x.shape
    f = int(factor)
    if h % f or w % f:
        raise ShapeError(f"pixel_unshuffle: extents ({h},{w}) not divisible by factor {f}")
    out = x.data.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4)
    out = np.ascontiguousarray(out).reshape(n, c * f * f, h // f, w // f)

    def bw(g):
        gx = g.reshape(n, c, f, f, h // f, w // f).transpose(0, 1, 4, 2, 5, 3)
        return (np.ascontiguousarray(gx).reshape(n, c, h, w),)
    return _make(out, (x,), bw, "pixel_unshuffle")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, source coordinate clamped into [0, n_in - 1]
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"bilinear_resize: target extents ({out_h},{out_w}) must be positive")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ry = _interp_matrix(h, out_h, x.dtype)
    rx = _interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),), "bilinear_resize")


def style_pool(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and population std, each ``[n, c]``."""
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("style_pool needs at least one spatial element")
    return mean(x, axis=(2, 3)), std(x, axis=(2, 3))


def spatial_stats(x: Tensor) -> Tensor:
    """Stack the channel-axis mean and std of every pixel into ``[n, 2, h, w]``."""
    if x.shape[1] < 1:
        raise ShapeError("spatial_stats needs at least one channel")
    return concat([mean(x, axis=1, keepdims=True), std(x, axis=1, keepdims=True)], axis=1)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
