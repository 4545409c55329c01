"""Dense tensor engine with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (f32 by default, f64 for gradient
checking). Every differentiable op records its inputs and a vector-Jacobian
closure on the output tensor; ``backward`` walks that implicit graph in
reverse topological order. Under ``no_grad`` nothing is recorded, so pure
inference retains no activations.
"""

from __future__ import annotations

import math
import threading
import weakref
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, StateError

F32 = np.float32
F64 = np.float64
_ALLOWED = (np.dtype(F32), np.dtype(F64))

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _check_finite() -> bool:
    return getattr(_state, "check_finite", False)


@contextmanager
def no_grad():
    """Inference mode: ops record no graph and retain no activations."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def finite_check():
    """Debug mode: every op output is checked for NaN/Inf."""
    prev = _check_finite()
    _state.check_finite = True
    try:
        yield
    finally:
        _state.check_finite = prev


class _MemMeter:
    """Tracks bytes held by live tensor buffers (views excluded)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def alloc(self, n: int):
        with self._lock:
            self.current += n
            if self.current > self.peak:
                self.peak = self.current

    def free(self, n: int):
        with self._lock:
            self.current -= n

    def reset_peak(self):
        with self._lock:
            self.peak = self.current


MEM = _MemMeter()


class Tensor:
    """A shaped array of f32/f64 scalars with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED:
            arr = arr.astype(F32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"
        if self.data.base is None:
            n = self.data.nbytes
            MEM.alloc(n)
            weakref.finalize(self, MEM.free, n)

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    # operator sugar (scalars or same-dtype tensors)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=F32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(out_data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, recording the graph edge when grad mode is on."""
    if _check_finite() and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    t = Tensor(out_data, requires_grad=track)
    if track:
        t._parents = parents
        t._vjp = vjp
        t._op = op
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_same_dtype(*ts: Tensor):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise DimensionError(f"mixed dtypes {d0} vs {t.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + a.data.dtype.type(b)
        return _make(out, "add_scalar", (a,), lambda g: (g,))
    _check_same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: shapes {a.shape} vs {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_dtype(a, b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: shapes {a.shape} vs {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: shapes {a.shape} vs {b.shape}") from e
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, "mul", (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _make(a.data * s, "scale", (a,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(x) for x in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape {a.shape} -> {shape}") from e
    in_shape = a.shape
    return _make(out.copy(), "reshape", (a,), lambda g: (g.reshape(in_shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: bad axes {axes} for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, "transpose", (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise DimensionError("concat: empty tensor list")
    _check_same_dtype(*ts)
    axis = axis if axis >= 0 else ts[0].ndim + axis
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError("concat: incompatible shapes") from e
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(ts), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.full(in_shape, g, dtype=a.data.dtype)
                    if np.ndim(g) == 0 else np.broadcast_to(g, in_shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean over empty axis")
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands carry equal leading dims,
    or when b is a 2-D shared weight."""
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents {a.shape} x {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise DimensionError(f"matmul: batch ranks {a.shape} x {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents {a.shape} x {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.swapaxes(-1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _make(out, "matmul", (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last axis of x."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x: Tensor, axis: int) -> Tensor:
    ax = axis if axis >= 0 else x.ndim + axis
    if not 0 <= ax < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for {x.shape}")
    if x.shape[ax] == 0:
        raise DimensionError("softmax over empty axis")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), "relu", (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd / np.sqrt(xd.dtype.type(2.0))))
    out = xd * phi
    pdf = np.exp(-0.5 * xd * xd) / xd.dtype.type(math.sqrt(2.0 * math.pi))
    dydx = phi + xd * pdf

    def vjp(g):
        return (g * dydx.astype(g.dtype),)

    return _make(out.astype(xd.dtype), "gelu", (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (feature) axis, then affine with gamma/beta."""
    n = x.shape[-1] if x.ndim else 0
    if n == 0:
        raise DimensionError("layer_norm: empty feature axis")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: gamma/beta must have extent {n}")
    _check_same_dtype(x, gamma, beta)
    dt = x.data.dtype
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def vjp(g):
        gg = g * gd
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        return dx.astype(dt), dgamma, dbeta

    return _make(out.astype(dt), "layer_norm", (x, gamma, beta), vjp)


def l2norm_last(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; zero subgradient at zero vectors."""
    sq = (x.data * x.data).sum(axis=-1)
    n = np.sqrt(sq)
    safe = np.where(n > 0, n, 1.0)

    def vjp(g):
        return ((g / safe)[..., None] * x.data * (n > 0)[..., None],)

    return _make(n, "l2norm_last", (x,), vjp)


def l2_normalize_last(x: Tensor) -> Tensor:
    """x / ||x|| over the last axis; zero vectors stay exactly zero."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    inv = np.where(n > 0, 1.0 / np.where(n > 0, n, 1.0), 0.0).astype(x.data.dtype)
    y = x.data * inv

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) * inv,)

    return _make(y, "l2_normalize_last", (x,), vjp)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every reachable tensor.

    Visits each recorded node exactly once in reverse topological order.
    """
    if loss.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._vjp is None and not loss.requires_grad:
        raise StateError("backward: loss carries no graph (built in infer mode?)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg


def assert_all_finite(t: Tensor, where: str = ""):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values{' in ' + where if where else ''}")
