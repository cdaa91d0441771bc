"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records a node carrying
its inputs and a backward closure.  Nodes are stamped with a monotonically
increasing sequence number at creation, so sorting the nodes reachable from a
loss by that number gives a valid topological order (the tape); ``backward``
walks it once in reverse.

Accumulation order: elementwise ops are exact per element; GELU and layer
norm run in :mod:`idclab.kernels` (compiled: sequential left-to-right sums
over the last axis); other reductions go through ``numpy.sum`` along a fixed
axis (pairwise summation, fixed by shape); ``matmul`` delegates to the linked
BLAS, which is deterministic for a given build and thread count.
"""

from __future__ import annotations

import itertools
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_SEQ = itertools.count()
_GRAD_ENABLED = True


class EmptyTargetWarning(UserWarning):
    """Raised (as a warning) when every target of a loss is padding."""


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-d float64 array plus the bookkeeping reverse mode needs."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_SEQ)

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by its reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._seq = next(_SEQ)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, sa) if a.requires_grad else None,
            _unbroadcast(g * ad, sb) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    out, deriv = kernels.gelu_forward(x.data, _GRAD_ENABLED and x.requires_grad)
    return _record(out, (x,), lambda g: (g * deriv,))


# -- shape ops -------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def take_rows(weight: Tensor, ids) -> Tensor:
    """Embedding lookup: ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"row index out of range for table of {n} rows")
    return _record(weight.data[ids], (weight,), backward)


# -- reductions ------------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product.

    Accepts ``[m,k]@[k,n]``, batched ``[...,m,k]@[k,n]`` (flattened into one
    GEMM) and batched ``[...,m,k]@[...,k,n]`` with equal batch shapes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[1])
            da = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            db = a2.T @ g2 if b.requires_grad else None
            return da, db

        return _record(out, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def backward_b(g):
        da = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        db = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return da, db

    return _record(a.data @ b.data, (a, b), backward_b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    out, xhat, inv = kernels.layer_norm_forward(x.data, gain.data, bias.data, eps)

    def backward(g):
        return kernels.layer_norm_backward(g, xhat, inv, gain.data)

    return _record(out, (x, gain, bias), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``[..., T, d]`` inputs.

    ``mask`` is an additive array broadcastable to ``[..., Tq, Tk]`` (0 or
    ``-inf``-like large negatives).
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        s = s + mask
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k.data
        dk = np.swapaxes(ds, -1, -2) @ q.data
        return dq, dk, dv

    return _record(out, (q, k, v), backward)


def cross_entropy(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean negative log-softmax of ``targets`` over non-pad positions.

    ``logits`` is ``[..., V]``; ``targets`` has the leading shape.  An
    all-pad target returns 0 and emits :class:`EmptyTargetWarning`.
    """
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ValueError(f"targets {np.shape(targets)} do not match logits {logits.shape}")
    valid = tgt != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("all targets are padding; loss defined as 0", EmptyTargetWarning, stacklevel=2)
        return _record(np.asarray(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    if np.any((tgt[valid] < 0) | (tgt[valid] >= V)):
        raise IndexError(f"target id outside [0, {V})")
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(valid)[0]
    nll = lse[rows] - z[rows, tgt[rows]]
    loss = nll.sum() / n_valid

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, tgt[rows]] -= 1.0
        p[~valid] = 0.0
        return ((p * (float(g) / n_valid)).reshape(logits.shape),)

    return _record(np.asarray(loss), (logits,), backward)


# -- the tape --------------------------------------------------------------
@dataclass
class Tape:
    """Nodes reachable from an output, in creation (topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        seen: set[int] = set()
        stack = [out]
        found: list[Tensor] = []
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        found.sort(key=lambda t: t._seq)
        return cls(found)

    def check_order(self) -> bool:
        pos = {id(t): i for i, t in enumerate(self.nodes)}
        return all(pos[id(p)] < pos[id(t)] for t in self.nodes for p in t._parents if id(p) in pos)


def backward(loss: Tensor, retain_graph: bool = False) -> Tape:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain_graph:
        for node in tape.nodes:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    """Debug check: fail if ``t`` holds NaN or Inf."""
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what} {t.shape}")


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_param: str
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps entries whose true gradient is ~0 from dominating on rounding noise.
    When ``max_entries`` is given, that many entries per parameter are sampled.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst, worst_name, count = 0.0, "", 0
    rng = rng or np.random.default_rng(0)
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + h
            with no_grad():
                fp = f().item()
            flat[j] = orig - h
            with no_grad():
                fm = f().item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            an = analytic[i].reshape(-1)[j]
            err = abs(an - num) / max(abs(an), abs(num), floor)
            count += 1
            if err > worst:
                worst, worst_name = err, p.name or f"param[{i}]"
    for p in params:
        p.grad = None
    return GradCheckReport(worst, tol, worst_name, count)
