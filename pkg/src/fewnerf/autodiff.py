"""Reverse-mode automatic differentiation on dense float32 numpy arrays.

Define-by-run: every op records its parents and a backward closure on the
output tensor, and `backward(loss)` walks the graph in reverse topological
order. Storage is float32; reductions and cumulative products accumulate in
float64 so long compositing chains stay stable. Broadcasting follows numpy's
trailing-axis rules only.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEBUG_CHECKS = False
_DTYPE = np.float32

_EPS_GUARD = 1e-8


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def precision64():
    """Store float64 inside the block (used by grad_check's numeric side)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Check every op output for non-finite values inside the block."""
    global _DEBUG_CHECKS
    prev = _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled
    try:
        yield
    finally:
        _DEBUG_CHECKS = prev


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives an identical stream."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, grad={self.requires_grad})"

    # operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _finite_check(arr: np.ndarray, op: str):
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output of op '{op}'")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_DTYPE)
    out.grad = None
    out.op = op
    _finite_check(out.data, op)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after trailing-axis broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return np.asarray(grad, dtype=np.float32).reshape(shape)


def _check_broadcastable(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# binary elementwise ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcastable(a.data, b.data, "add")

    def backward(g):
        # at most one recipient may claim the pass-through `g` itself
        ga = _unbroadcast(g, a.shape)
        _accumulate(a, ga, owned=True)
        gb = _unbroadcast(g, b.shape)
        _accumulate(b, gb, owned=gb is not g)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcastable(a.data, b.data, "sub")

    def backward(g):
        ga = _unbroadcast(g, a.shape)
        _accumulate(a, ga, owned=True)
        _accumulate(b, _unbroadcast(-g, b.shape), owned=True)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcastable(a.data, b.data, "mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape), owned=True)
        _accumulate(b, _unbroadcast(g * a.data, b.shape), owned=True)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcastable(a.data, b.data, "div")

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape), owned=True)
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
                    owned=True)

    return _node(a.data / b.data, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T, owned=True)
        _accumulate(b, a.data.T @ g, owned=True)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


# unary -----------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask, owned=True)

    return _node(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # numerically stable in both tails
    y = np.where(x.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    y = y.astype(_DTYPE)

    def backward(g):
        _accumulate(x, g * y * (1.0 - y), owned=True)

    return _node(y, (x,), backward, "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * y, owned=True)

    return _node(y, (x,), backward, "exp")


def expm1(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * np.exp(x.data), owned=True)

    return _node(np.expm1(x.data), (x,), backward, "expm1")


def sin(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * np.cos(x.data), owned=True)

    return _node(np.sin(x.data), (x,), backward, "sin")


def cos(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, -g * np.sin(x.data), owned=True)

    return _node(np.cos(x.data), (x,), backward, "cos")


# shape ops -------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)

    def backward(g):
        # sole parent: a writable view of the consumed child grad is safe to own
        _accumulate(x, g.reshape(x.shape), owned=True)

    return _node(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose supports 2-D only, got {x.shape}")

    def backward(g):
        _accumulate(x, np.ascontiguousarray(g.T), owned=True)

    return _node(np.ascontiguousarray(x.data.T), (x,), backward, "transpose")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis if axis >= 0 else t.data.ndim + axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            # disjoint slices of g, so each recipient may own its piece
            _accumulate(t, np.ascontiguousarray(g[tuple(idx)]), owned=True)

    return _node(data, ts, backward, "concat")


def slice_axis(x, axis: int, start: int, length: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]
    if start < 0 or length < 1 or start + length > n:
        raise ShapeError(
            f"slice [{start}:{start + length}] out of range for axis {axis} of shape {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(x.shape, dtype=np.float32)
        full[idx] = g
        _accumulate(x, full, owned=True)

    return _node(np.ascontiguousarray(x.data[idx]), (x,), backward, "slice")


def gather_rows(x, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros(x.shape, dtype=np.float32)
        np.add.at(full, idx, g)
        _accumulate(x, full, owned=True)

    return _node(x.data[idx], (x,), backward, "gather_rows")


# reductions ------------------------------------------------------------

def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).astype(np.float32),
                        owned=True)
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(ge, x.shape).astype(np.float32),
                        owned=True)

    return _node(y, (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    y = x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(g):
        scale = np.float32(1.0 / n)
        if axis is None:
            _accumulate(x, np.broadcast_to(g * scale, x.shape).astype(np.float32),
                        owned=True)
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(ge * scale, x.shape).astype(np.float32),
                        owned=True)

    return _node(y, (x,), backward, "mean")


def cumprod(x, axis: int = -1) -> Tensor:
    """Inclusive cumulative product along `axis`, accumulated in float64.

    Backward uses the zero-safe suffix recursion
    grad_i = (prod_{k<i} x_k) * (g_i + x_{i+1} g_{i+1} + x_{i+1} x_{i+2} g_{i+2} + ...)
    so exact zeros in the input do not produce NaNs.
    """
    x = as_tensor(x)
    xd = np.moveaxis(x.data.astype(np.float64), axis, -1)
    cp = np.cumprod(xd, axis=-1)

    def backward(g):
        gd = np.moveaxis(g.astype(np.float64), axis, -1)
        n = xd.shape[-1]
        ones = np.ones(xd.shape[:-1] + (1,), dtype=np.float64)
        left = np.concatenate([ones, cp[..., :-1]], axis=-1)  # exclusive prefix products
        s = np.empty_like(gd)
        s[..., n - 1] = gd[..., n - 1]
        for i in range(n - 2, -1, -1):
            s[..., i] = gd[..., i] + xd[..., i + 1] * s[..., i + 1]
        gx = np.moveaxis(left * s, -1, axis)
        _accumulate(x, gx.astype(np.float32), owned=True)

    return _node(np.moveaxis(cp, -1, axis), (x,), backward, "cumprod")


# normalization ---------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(_DTYPE)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(np.float32)
        _accumulate(x, y * (g - dot), owned=True)

    return _node(y, (x,), backward, "softmax")


def layer_norm(x, axis: int = -1, eps: float = _EPS_GUARD) -> Tensor:
    """Normalize to zero mean / unit variance along `axis` (no affine)."""
    x = as_tensor(x)
    xd = x.data.astype(np.float64)
    mean = xd.mean(axis=axis, keepdims=True)
    var = xd.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = ((xd - mean) * inv).astype(_DTYPE)

    def backward(g):
        n = x.shape[axis]
        gd = g.astype(np.float64)
        yh = y.astype(np.float64)
        gm = gd.mean(axis=axis, keepdims=True)
        gym = (gd * yh).mean(axis=axis, keepdims=True)
        _accumulate(x, (inv * (gd - gm - yh * gym)).astype(np.float32),
                    owned=True)

    return _node(y, (x,), backward, "layer_norm")


# stochastic ------------------------------------------------------------

def dropout(x, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-p); eval is identity."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p).astype(np.float32) / np.float32(1.0 - p)

    def backward(g):
        _accumulate(x, g * mask, owned=True)

    return _node(x.data * mask, (x,), backward, "dropout")


# losses ----------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return reduce_mean(mul(d, d))


# backward engine -------------------------------------------------------

def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False):
    """Add `g` into t.grad. `owned=True` promises the caller holds the only
    live reference to `g` (fresh array, or a view of an already-consumed
    child gradient), letting the first accumulation skip its defensive copy.
    """
    if not t.requires_grad:
        return
    arr = np.asarray(g, dtype=np.float32)
    if arr is not g:
        owned = True
    if arr.shape != t.shape:
        arr = arr.reshape(t.shape)
    if t.grad is None:
        t.grad = arr if (owned and arr.flags.writeable) else arr.copy()
    else:
        t.grad += arr


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate `.grad` on every tensor the scalar `loss` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    loss.grad = np.ones(loss.shape, dtype=np.float32)
    for node in reversed(order):
        g = node.grad
        if g is None or node._backward is None:
            continue
        node._backward(g)
        # intermediate grads are fully consumed once the node's backward ran;
        # dropping them keeps peak memory at the frontier, not the whole graph
        node.grad = None


def grads_of(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of `loss` for each named parameter; zeros for non-participants.

    Clears `.grad` on the parameters afterwards so steps do not leak into
    each other.
    """
    backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = p.grad.copy() if p.grad is not None else np.zeros(p.shape, np.float32)
        p.grad = None
    return out


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# verification ----------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-3) -> float:
    """Compare analytic gradients of scalar-valued `f` against central differences.

    Returns the max over all input entries of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    inputs = list(inputs)
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError("grad_check input contains non-finite values")
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    if out.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got shape {out.shape}")
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros(t.shape, np.float32)
                for t in inputs]
    for t in inputs:
        t.grad = None

    # Central differences run in f64 so the finite-difference quotient is not
    # swamped by f32 forward rounding; the analytic side stays on the f32 path.
    with precision64():
        clones = [Tensor(t.data) for t in inputs]

    def eval_scalar() -> float:
        with no_grad(), precision64():
            return float(f(*clones).data.reshape(()))

    max_rel = 0.0
    for t, an in zip(clones, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = eval_scalar()
            flat[i] = orig - eps
            f_lo = eval_scalar()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * eps)
            a = float(an_flat[i])
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NonFiniteError(f"non-finite gradient comparison at entry {i}")
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            max_rel = max(max_rel, rel)
    return max_rel
