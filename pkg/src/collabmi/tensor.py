"""Dense float64 tensors with a small reverse-mode differentiation engine.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient, the result remembers its parents and a closure mapping the
output gradient to one gradient per parent; :func:`backward` walks that
graph once in reverse topological order. Inputs that are plain arrays or
tensors with ``requires_grad=False`` are constants and never receive
gradients.

Spatial tensors are laid out channels-last, ``[H, W, C]``, optionally with a
leading batch axis ``[B, H, W, C]``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "backward",
    "linear",
    "matmul",
    "conv2d",
    "activation",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "smooth_l1",
    "concat",
    "stack",
    "take",
    "upsample_nearest",
    "softmax",
    "segment_softmax",
    "segment_sum",
    "sparse_apply",
]


class Tensor:
    """An immutable grid of float64 values, optionally part of a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.data.flags.writeable = False
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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
        """Row-major flat copy of the values."""
        return self.data.ravel().copy()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return reduce_sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self):
        return reshape(self, (-1,))

    def backward(self):
        backward(self)


def tensor(values, requires_grad=False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def parameter(values) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(values, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, grad_fn, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=np.float64)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- engine ---------------------------------------------------------------
def _topological_order(root: Tensor) -> list:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    With ``params`` given, their ``.grad`` is reset first and the list of
    gradients is returned in the same order; parameters that do not
    influence the loss get exact zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = None
    if loss.requires_grad:
        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
    if params is None:
        return None
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


# -- elementwise arithmetic ----------------------------------------------
def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _node(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if np.ndim(b) == 0 and not isinstance(b, Tensor):
        c = float(b)
        return _node(a.data * c, (a,), lambda g: (g * c,), "scale")
    b = _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log of a non-positive value")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _node(out, (a,), lambda g: (np.where(out > 0, g, 0.0),), "relu")


def _sigmoid(x):
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "softplus": softplus}[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(a)


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    x = a.data
    small = np.abs(x) < beta
    out = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    return _node(out, (a,), lambda g: (g * np.where(small, x / beta, np.sign(x)),), "smooth_l1")


# -- shape and reduction --------------------------------------------------
def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(out, (a,), grad_fn, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a: Tensor, key) -> Tensor:
    src = a.shape

    def grad_fn(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(a.data[key]), (a,), grad_fn, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    src = a.shape
    axis = axis % a.ndim

    def grad_fn(g):
        full = np.zeros(src)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _node(np.take(a.data, idx, axis=axis), (a,), grad_fn, "take")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot stack shapes {[t.shape for t in tensors]}") from exc
    n = len(tensors)
    return _node(
        out,
        tuple(tensors),
        lambda g: tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis)),
        "stack",
    )


# -- linear algebra -------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., n] @ b[n, m]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: axis -1 of {a.shape} must match axis 0 of {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def grad_fn(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return _node(out, (a, b), grad_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input axis -1 has {x.shape[-1]} values, weight axis 0 has {weight.shape[0]}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows of ``k*k*C`` patch values ordered (row offset, column offset, channel)."""
    # shifted slices keep the channel axis contiguous, which copies far faster
    # than transposing a sliding-window view
    cols = np.concatenate(
        [xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] for i in range(k) for j in range(k)],
        axis=-1,
    )
    return cols.reshape(-1, k * k * xp.shape[-1])


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x[(B,) H, W, Cin]`` with ``kernel[k, k, Cin, Cout]``.

    ``"same"`` zero-pads by ``k // 2`` so the output has ``ceil(H / stride)``
    rows; ``"valid"`` does not pad.
    """
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"conv2d: kernel must be [k, k, Cin, Cout], got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be [H, W, C] or [B, H, W, C], got {x.shape}")
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input axis -1 has {x.shape[-1]} channels, kernel axis 2 expects {cin}")
    if padding not in ("same", "valid"):
        raise ContractError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be positive, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    nb, h, w, _ = xd.shape
    pad = k // 2 if padding == "same" else 0
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input spatial size {(h, w)} too small for kernel {k}")
    kd = kernel.data.reshape(k * k * cin, cout)

    if k == 1 and stride == 1:
        cols = xd.reshape(-1, cin)
    else:
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
        cols = _im2col(xp, k, stride, ho, wo)
    out = cols @ kd
    if bias is not None:
        out += bias.data
    out = out.reshape(nb, ho, wo, cout)
    if single:
        out = out[0]

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if k == 1 and stride == 1:
                gx = (g2 @ kd.T).reshape(x.shape)
            elif stride == 1:
                # input gradient = correlation of the padded output gradient with the flipped kernel
                lo = k - 1 - pad
                gd = np.zeros((nb, h + k - 1, w + k - 1, cout))
                gd[:, lo : lo + ho, lo : lo + wo] = g.reshape(nb, ho, wo, cout)
                flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
                gx = (_im2col(gd, k, 1, h, w) @ flipped).reshape(x.shape)
            else:
                gc = (g2 @ kd.T).reshape(nb, ho, wo, k * k, cin)
                gp = np.zeros((nb, h + 2 * pad, w + 2 * pad, cin))
                n = 0
                for i in range(k):
                    for j in range(k):
                        gp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gc[:, :, :, n]
                        n += 1
                gx = gp[:, pad : pad + h, pad : pad + w, :]
                gx = gx[0] if single else gx
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, grad_fn, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat every voxel ``factor`` times along both spatial axes."""
    out = np.repeat(np.repeat(x.data, factor, axis=-3), factor, axis=-2)
    shape = x.shape

    def grad_fn(g):
        lead = g.shape[:-3]
        h, w, c = shape[-3:]
        return (g.reshape(*lead, h, factor, w, factor, c).sum(axis=(-4, -2)),)

    return _node(out, (x,), grad_fn, "upsample")


def sparse_apply(matrix: sp.csr_matrix, x: Tensor, out_shape) -> Tensor:
    """``matrix @ x`` with x's leading axes flattened to rows and the last axis kept.

    Gradients flow to ``x`` only; the matrix is a constant.
    """
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    if matrix.shape[1] != flat.shape[0]:
        raise DimensionError(f"sparse_apply: matrix has {matrix.shape[1]} columns, input has {flat.shape[0]} rows")
    out = np.asarray(matrix @ flat).reshape(out_shape)
    src = x.shape

    def grad_fn(g):
        return (np.asarray(matrix.T @ g.reshape(-1, c)).reshape(src),)

    return _node(out, (x,), grad_fn, "sparse_apply")


# -- normalisation ------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def _offsets(sizes):
    sizes = np.asarray(sizes, dtype=np.intp)
    if sizes.size == 0 or np.any(sizes < 1):
        raise ContractError(f"segment sizes must be positive, got {sizes.tolist()}")
    return sizes, np.concatenate([[0], np.cumsum(sizes)[:-1]])


def segment_sum(x: Tensor, sizes) -> Tensor:
    """Sum consecutive groups of rows (axis 0) with the given group sizes."""
    sizes, starts = _offsets(sizes)
    if sizes.sum() != x.shape[0]:
        raise DimensionError(f"segment sizes sum to {sizes.sum()}, axis 0 has {x.shape[0]}")
    out = np.add.reduceat(x.data, starts, axis=0)
    return _node(out, (x,), lambda g: (np.repeat(g, sizes, axis=0),), "segment_sum")


def segment_softmax(x: Tensor, sizes) -> Tensor:
    """Softmax over consecutive groups of rows (axis 0)."""
    sizes, starts = _offsets(sizes)
    if sizes.sum() != x.shape[0]:
        raise DimensionError(f"segment sizes sum to {sizes.sum()}, axis 0 has {x.shape[0]}")
    peak = np.repeat(np.maximum.reduceat(x.data, starts, axis=0), sizes, axis=0)
    e = np.exp(x.data - peak)
    s = e / np.repeat(np.add.reduceat(e, starts, axis=0), sizes, axis=0)

    def grad_fn(g):
        inner = np.repeat(np.add.reduceat(g * s, starts, axis=0), sizes, axis=0)
        return (s * (g - inner),)

    return _node(s, (x,), grad_fn, "segment_softmax")
