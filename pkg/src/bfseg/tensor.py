"""N-dimensional tensors with reverse-mode automatic differentiation.

numpy supplies the storage and the raw arithmetic; this module adds the
operation graph recorded during the forward pass, the backward traversal,
and a central finite-difference checker used to verify every analytic
gradient.  Verification paths run in float64 (finite differences are not
trustworthy in float32); training may run in float32.

GELU uses the exact form x * Phi(x) with Phi the standard normal CDF
(erf-based), not the tanh approximation.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "ConfigError",
    "GradError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "layernorm",
    "softmax",
    "log_softmax",
    "gelu",
    "reshape",
    "transpose",
    "concat",
    "split",
    "backward",
    "grad_check",
]

# python floats stay "weak" under numpy promotion rules, keeping float32 paths float32
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A structural parameter (groups, ratios, sizes) is invalid."""


class GradError(RuntimeError):
    """The autodiff contract was violated (non-scalar loss, missing grad)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording, e.g. for validation and prediction passes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense row-major array with an optional slot in the operation graph.

    Tensors are immutable once built; the sanctioned exceptions are gradient
    accumulation into ``grad`` and the optimizer updating leaf parameters in
    place between passes.  Leaf tensors created with ``requires_grad=True``
    start with an all-zero ``grad``; ``backward`` accumulates into it, so a
    parameter that never appears on the loss path keeps a zero gradient and
    repeated backward calls without ``zero_grad`` sum their contributions.
    """

    __slots__ = ("array", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None

    # -- structure ---------------------------------------------------------

    @property
    def shape(self):
        return self.array.shape

    @property
    def ndim(self):
        return self.array.ndim

    @property
    def size(self):
        return self.array.size

    @property
    def dtype(self):
        return self.array.dtype

    @property
    def data(self):
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    def numpy(self):
        """The backing ndarray (treat as read-only)."""
        return self.array

    def item(self):
        return float(self.array.reshape(()))

    def detach(self):
        """Same values, severed from the graph."""
        return Tensor(self.array)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        body = repr(self.array) if self.size <= 8 else f"shape={self.shape}"
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({body}{flags})"

    # -- operators ---------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _astensor(v, like=None):
    if isinstance(v, Tensor):
        return v
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(v, dtype=dtype))


def _make(arr, parents, backward_fn):
    """Wrap an op result, recording parents only while grad is enabled."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    t = Tensor.__new__(Tensor)
    t.array = arr
    t.requires_grad = track
    t.grad = None
    t._parents = tuple(parents) if track else ()
    t._backward = backward_fn if track else None
    return t


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops --------------------------------------------------------


def add(a, b):
    a, b = _astensor(a), _astensor(b, like=a)
    arr = a.array + b.array

    def bw(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make(arr, (a, b), bw)


def sub(a, b):
    a, b = _astensor(a), _astensor(b, like=a)
    arr = a.array - b.array

    def bw(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _make(arr, (a, b), bw)


def mul(a, b):
    a, b = _astensor(a), _astensor(b, like=a)
    arr = a.array * b.array

    def bw(g):
        return (
            _sum_to_shape(g * b.array, a.shape),
            _sum_to_shape(g * a.array, b.shape),
        )

    return _make(arr, (a, b), bw)


def div(a, b):
    a, b = _astensor(a), _astensor(b, like=a)
    arr = a.array / b.array

    def bw(g):
        return (
            _sum_to_shape(g / b.array, a.shape),
            _sum_to_shape(-g * a.array / (b.array * b.array), b.shape),
        )

    return _make(arr, (a, b), bw)


def pow_(a, p):
    a = _astensor(a)
    p = float(p)
    arr = a.array**p

    def bw(g):
        return (g * p * a.array ** (p - 1.0),)

    return _make(arr, (a,), bw)


def exp(a):
    a = _astensor(a)
    arr = np.exp(a.array)

    def bw(g):
        return (g * arr,)

    return _make(arr, (a,), bw)


def log(a):
    a = _astensor(a)
    arr = np.log(a.array)

    def bw(g):
        return (g / a.array,)

    return _make(arr, (a,), bw)


def gelu(a):
    """Exact GELU, x * Phi(x) with the erf-based standard normal CDF."""
    a = _astensor(a)
    x = a.array
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    arr = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(arr, (a,), bw)


# -- reductions --------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = _astensor(a)
    arr = a.array.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(arr, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _astensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    """Matrix product.  Leading batch dimensions must match exactly, or one
    side may carry none (shared weights)."""
    a, b = _astensor(a), _astensor(b, like=a)
    A, B = a.array, b.array
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {A.shape} x {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {A.shape} x {B.shape}")
    if A.ndim > 2 and B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {A.shape} x {B.shape}")
    arr = A @ B

    def bw(g):
        ga = _sum_to_shape(g @ B.swapaxes(-1, -2), A.shape)
        gb = _sum_to_shape(A.swapaxes(-1, -2) @ g, B.shape)
        return ga, gb

    return _make(arr, (a, b), bw)


def conv2d(x, w, bias=None, stride=1, padding=1, groups=1):
    """2-D cross-correlation with zero padding.

    x: [N, C, H, W]; w: [O, C/groups, kh, kw]; bias: [O] or None.
    groups == C == O gives a depthwise convolution.
    """
    x = _astensor(x)
    w = _astensor(w, like=x)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if C % groups or O % groups:
        raise ConfigError(
            f"conv2d groups={groups} must divide in/out channels ({C}, {O})"
        )
    if Cg != C // groups:
        raise ShapeError(
            f"conv2d kernel expects {Cg} channels per group, input supplies {C // groups}"
        )
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d kernel {(kh, kw)} does not fit input {(H, W)} with padding {p}")

    xp = np.pad(x.array, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.array
    xg = xp.reshape(N, groups, Cg, xp.shape[2], xp.shape[3])
    wg = w.array.reshape(groups, O // groups, Cg, kh, kw)
    out = np.zeros((N, groups, O // groups, Ho, Wo), dtype=x.dtype)
    # One vectorized contraction per kernel offset; kernels here are small.
    for i in range(kh):
        for j in range(kw):
            xs = xg[:, :, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]
            out += np.einsum("ngchw,goc->ngohw", xs, wg[:, :, :, i, j], optimize=True)
    out = out.reshape(N, O, Ho, Wo)

    b = _astensor(bias, like=x) if bias is not None else None
    if b is not None:
        if b.shape != (O,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match {O} output channels")
        out = out + b.array.reshape(1, O, 1, 1)

    def bw(g):
        go = g.reshape(N, groups, O // groups, Ho, Wo)
        gw = np.zeros_like(wg)
        gxp = np.zeros_like(xg)
        for i in range(kh):
            for j in range(kw):
                sl = (
                    slice(None),
                    slice(None),
                    slice(None),
                    slice(i, i + s * (Ho - 1) + 1, s),
                    slice(j, j + s * (Wo - 1) + 1, s),
                )
                gw[:, :, :, i, j] = np.einsum("ngohw,ngchw->goc", go, xg[sl], optimize=True)
                gxp[sl] += np.einsum("ngohw,goc->ngchw", go, wg[:, :, :, i, j], optimize=True)
        gx = gxp.reshape(N, C, xp.shape[2], xp.shape[3])
        if p:
            gx = gx[:, :, p:-p, p:-p]
        grads = (gx, gw.reshape(O, Cg, kh, kw))
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def layernorm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, scale and shift."""
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be positive, got {eps}")
    x = _astensor(x)
    gamma = _astensor(gamma, like=x)
    beta = _astensor(beta, like=x)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"layernorm scale/shift shapes {gamma.shape}/{beta.shape} do not match last axis {C}"
        )
    X = x.array
    mu = X.mean(axis=-1, keepdims=True)
    var = X.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv
    arr = xhat * gamma.array + beta.array

    def bw(g):
        dxhat = g * gamma.array
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        red = tuple(range(X.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(arr, (x, gamma, beta), bw)


def softmax(x, axis=-1):
    """Stable softmax; slices along ``axis`` sum to 1."""
    x = _astensor(x)
    arr = x.array - x.array.max(axis=axis, keepdims=True)
    np.exp(arr, out=arr)
    arr /= arr.sum(axis=axis, keepdims=True)

    def bw(g):
        return (arr * (g - (g * arr).sum(axis=axis, keepdims=True)),)

    return _make(arr, (x,), bw)


def log_softmax(x, axis=-1):
    x = _astensor(x)
    z = x.array - x.array.max(axis=axis, keepdims=True)
    arr = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(arr) * g.sum(axis=axis, keepdims=True),)

    return _make(arr, (x,), bw)


# -- layout ops ---------------------------------------------------------------


def reshape(x, shape):
    x = _astensor(x)
    shape = tuple(shape)
    target = int(np.prod([d for d in shape if d != -1]))
    if -1 not in shape and target != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")
    arr = x.array.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(arr, (x,), bw)


def transpose(x, axes=None):
    x = _astensor(x)
    arr = x.array.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(arr, (x,), bw)


def concat(xs, axis=0):
    xs = [_astensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty sequence")
    arr = np.concatenate([x.array for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for k in range(len(xs)):
            sl[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(arr, tuple(xs), bw)


def split(x, sizes, axis=0):
    """Split along ``axis`` into chunks of the given sizes.

    Inverse of ``concat``: ``concat(split(x, sizes, ax), ax)`` is bit-identical
    to ``x``.
    """
    x = _astensor(x)
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not sum to axis length {x.shape[axis]}")
    offsets = np.cumsum([0] + sizes)
    outs = []
    for k in range(len(sizes)):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(offsets[k], offsets[k + 1])
        sl = tuple(sl)
        arr = x.array[sl].copy()

        def bw(g, sl=sl):
            z = np.zeros(x.shape, dtype=g.dtype)
            z[sl] = g
            return (z,)

        outs.append(_make(arr, (x,), bw))
    return outs


# -- backward pass ------------------------------------------------------------


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Reverse-mode accumulation from a scalar loss.

    Populates ``grad`` on every reachable tensor that requires one.  Grads
    accumulate across calls until ``zero_grad``.
    """
    if not isinstance(loss, Tensor):
        raise GradError("backward expects a Tensor")
    if loss.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
    flowing = {id(loss): np.ones_like(loss.array)}
    for node in reversed(_toposort(loss)):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            if pg.shape != parent.shape:
                raise GradError(
                    f"gradient shape {pg.shape} does not match tensor shape {parent.shape}"
                )
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg


# -- verification -------------------------------------------------------------


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.  Runs
    in float64 regardless of the dtype of ``x``.  The error at coordinate i
    is |analytic_i - fd_i| / max(|analytic_i|, |fd_i|, 1e-8).
    """
    work = Tensor(np.array(x.array if isinstance(x, Tensor) else x, dtype=np.float64),
                  requires_grad=True)
    out = f(work)
    if out.size != 1:
        raise GradError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    if not np.isfinite(out.array).all():
        raise GradError("grad_check: non-finite forward value at the base point")
    backward(out)
    analytic = work.grad.reshape(-1).copy()

    flat = work.array.reshape(-1)
    fd = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(work).item()
            flat[i] = orig - eps
            fm = f(work).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradError(f"grad_check: non-finite value while probing coordinate {i}")
            fd[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))
