"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``.  Every differentiable operation
returns a new tensor that remembers its parents and a closure mapping the
output gradient to the parent gradients.  :meth:`Tensor.backward` walks the
recorded graph in reverse topological order exactly once and accumulates
gradients into leaf tensors that have ``requires_grad`` set.

Shapes must match exactly for binary operations.  The only implicit
broadcast is :func:`bias_add` over the trailing dimension; everything else
goes through :func:`expand` / :func:`reshape`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the element type used for new tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the default dtype, e.g. ``with precision(np.float64)``."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference only)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"
        self._released = False

    # construction of graph nodes ---------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._released = False
        out._op = op
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # basic properties -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar --------------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    # reverse pass ----------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.size != 1 or self.ndim > 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise RuntimeError("graph already consumed by a previous backward(); double backward is unsupported")
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad; nothing to differentiate")
        order = graph_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            if node._released:
                raise RuntimeError("graph already consumed by a previous backward(); double backward is unsupported")
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if node.requires_grad and g is not None:
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
            node._backward = None
            node._parents = ()
            node._released = True


def graph_order(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of nodes reachable from ``root`` (inputs first)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x), dtype=like.dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise -----------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    half = a.dtype.type(0.5)
    y = half * (np.tanh(half * a.data) + 1)
    return Tensor._from_op(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "abs": absolute, "neg": lambda a: scale(a, -1.0)}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing dimension of ``x``."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ValueError(f"bias_add: bias {b.shape} does not match trailing dim of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return Tensor._from_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g), "bias_add")


# linear algebra --------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[M,K]`` with ``[K,N]`` or a ``[K]`` vector."""
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ValueError(f"matmul: expected [M,K] @ [K,N] or [K], got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


# shape manipulation ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"reshape: cannot reshape {src} to {shape}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes of ``a`` to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ValueError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    out = np.broadcast_to(a.data, shape).copy()
    return Tensor._from_op(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.dtype
    out = np.array(a.data[index], copy=True)

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return Tensor._from_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack: empty input")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor._from_op(
        out,
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


# reductions ------------------------------------------------------------------------


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"reduce: axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"reduce: repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce ``x`` over ``axes`` with ``sum``, ``mean`` or ``max``.

    ``axes=None`` reduces everything; an empty tuple is the identity.
    ``max`` routes the gradient to the first maximal element.
    """
    axes = _normalize_axes(axes, x.ndim)
    if not axes:
        return reshape(x, x.shape)
    src_shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src_shape))
    out_shape = kept if keepdims else tuple(s for i, s in enumerate(src_shape) if i not in axes)

    if kind == "sum":
        out = x.data.sum(axis=axes).reshape(out_shape)
        return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept), src_shape).copy(),), "sum")
    if kind == "mean":
        count = int(np.prod([src_shape[a] for a in axes]))
        out = x.data.mean(axis=axes).reshape(out_shape)
        inv = x.dtype.type(1.0 / count)
        return Tensor._from_op(
            out, (x,), lambda g: (np.broadcast_to(g.reshape(kept) * inv, src_shape).copy(),), "mean"
        )
    if kind == "max":
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        perm = rest + axes
        moved = x.data.transpose(perm)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0].reshape(out_shape)

        def backward(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
            return (gflat.reshape(moved.shape).transpose(np.argsort(perm)),)

        return Tensor._from_op(out, (x,), backward, "max")
    raise ValueError(f"unknown reduction {kind!r}")


# convolution and pooling -----------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kernel: tuple[int, ...], stride: int) -> np.ndarray:
    """View of shape ``(N, C, *out, *kernel)`` over a padded batch."""
    nd = len(kernel)
    spatial = tuple(range(2, 2 + nd))
    win = sliding_window_view(xp, kernel, axis=spatial)
    if stride != 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    return win


def _scatter_windows(dwin: np.ndarray, padded_shape, kernel, stride, dtype) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window gradients back onto the padded grid."""
    nd = len(kernel)
    out_sizes = dwin.shape[2 : 2 + nd]
    dxp = np.zeros(padded_shape, dtype=dtype)
    for offs in itertools.product(*(range(k) for k in kernel)):
        target = (slice(None), slice(None)) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, out_sizes)
        )
        dxp[target] += dwin[(Ellipsis,) + offs]
    return dxp


def _convnd(x: Tensor, w: Tensor, stride: int, pad: int, nd: int, name: str) -> Tensor:
    if stride < 1 or pad < 0:
        raise ValueError(f"{name}: stride must be >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    batched = x.ndim == nd + 2
    if x.ndim not in (nd + 1, nd + 2):
        raise ValueError(f"{name}: expected input of rank {nd + 1} or {nd + 2}, got {x.shape}")
    if w.ndim != nd + 2:
        raise ValueError(f"{name}: expected weight of rank {nd + 2}, got {w.shape}")
    xd = x.data if batched else x.data[None]
    n, c = xd.shape[:2]
    c_out, c_in = w.shape[:2]
    kernel = w.shape[2:]
    if c != c_in:
        raise ValueError(f"{name}: input has {c} channels but weight {w.shape} expects {c_in}")
    spatial = xd.shape[2:]
    for s, k in zip(spatial, kernel):
        if k > s + 2 * pad:
            raise ValueError(f"{name}: kernel {kernel} larger than padded input {tuple(t + 2 * pad for t in spatial)}")
    out_sizes = tuple(_out_extent(s, k, stride, pad) for s, k in zip(spatial, kernel))

    xp = np.pad(xd, ((0, 0), (0, 0)) + ((pad, pad),) * nd) if pad else xd
    win = _windows(xp, kernel, stride)
    # (N, *out, C, *kernel) -> rows of im2col
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = win.transpose(perm).reshape(-1, c * int(np.prod(kernel)))
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape((n,) + out_sizes + (c_out,))
    out = np.moveaxis(out, -1, 1)
    out = np.ascontiguousarray(out if batched else out[0])
    padded_shape, dtype = xp.shape, xd.dtype

    def backward(g):
        gb = g if batched else g[None]
        gmat = np.moveaxis(gb, 1, -1).reshape(-1, c_out)
        dw = (gmat.T @ cols).reshape(w.shape)
        dcols = (gmat @ wmat).reshape((n,) + out_sizes + (c,) + tuple(kernel))
        inv = np.argsort(perm)
        dwin = dcols.transpose(inv)
        dxp = _scatter_windows(dwin, padded_shape, kernel, stride, dtype)
        if pad:
            dxp = dxp[(slice(None), slice(None)) + (slice(pad, -pad),) * nd]
        return (dxp if batched else dxp[0]), dw

    return Tensor._from_op(out, (x, w), backward, name)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation; ``x`` is ``[C,H,W]`` or ``[N,C,H,W]``, ``w`` is ``[Co,C,k,k]``."""
    return _convnd(x, w, stride, pad, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """3D cross-correlation; ``x`` is ``[C,D,H,W]`` or ``[N,C,D,H,W]``."""
    return _convnd(x, w, stride, pad, 3, "conv3d")


def max_pool(x: Tensor, kernel: int, stride: int, pad: int = 0, nd: int = 2) -> Tensor:
    """Max pooling over the last ``nd`` axes of a batched ``[N,C,...]`` tensor.

    Padding uses -inf, so padded cells never win.
    """
    if x.ndim != nd + 2:
        raise ValueError(f"max_pool: expected rank {nd + 2} input, got {x.shape}")
    if pad * 2 > kernel:
        raise ValueError("max_pool: padding larger than half the kernel")
    ks = (kernel,) * nd
    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((pad, pad),) * nd, constant_values=-np.inf) if pad else x.data
    for s in xp.shape[2:]:
        if s < kernel:
            raise ValueError(f"max_pool: kernel {kernel} larger than padded input {xp.shape[2:]}")
    win = _windows(xp, ks, stride)
    flat = win.reshape(win.shape[: 2 + nd] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    padded_shape, dtype = xp.shape, x.dtype

    def backward(g):
        dflat = np.zeros(flat.shape, dtype=dtype)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dxp = _scatter_windows(dflat.reshape(win.shape), padded_shape, ks, stride, dtype)
        if pad:
            dxp = dxp[(slice(None), slice(None)) + (slice(pad, -pad),) * nd]
        return (dxp,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "max_pool")


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
