"""Reverse-mode automatic differentiation over dense tensors.

The engine is a dynamic tape: each op on grad-enabled tensors records its
parents and a backward closure on the output tensor. ``backward`` walks the
recorded graph once in reverse topological order, accumulates gradients for
every grad-enabled leaf (and any explicitly retained intermediate), then
frees the tape. A graph can be consumed exactly once.

Design constraints, chosen to keep gradient code honest at desk scale:

* float64 by default; float32 is opt-in via ``set_default_dtype``.
* No broadcasting beyond scalar-with-tensor and row-wise bias add. All
  other shape mismatches raise ``ShapeError``.
* Every primitive validates that its output is finite; NaN/Inf raises
  ``NonFiniteError`` immediately instead of propagating.
* Single-threaded per graph. Grad mode and the activation accountant are
  thread-local, so independent graphs may live on independent threads.

Activation accounting: when an accountant is installed via
``track_activations``, each node reports the element count of non-leaf
arrays its backward closure retains (leaf data -- parameters and inputs --
is excluded; both training styles hold it equally). The count is acquired
at node creation and released when backward consumes the node, which makes
the accountant's peak a deterministic, allocator-independent proxy for
activation memory.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "GraphConsumedError",
    "Tensor",
    "tensor",
    "zeros",
    "set_default_dtype",
    "default_dtype",
    "no_grad",
    "is_grad_enabled",
    "track_activations",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "gather",
    "sum_all",
    "add_n",
    "mean_pool",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "bce_loss",
    "mse_half",
    "backward",
    "grad_check",
]

BCE_EPS = 1e-12  # probability clamp inside bce_loss


class AutodiffError(Exception):
    """Base class for graph construction and execution errors."""


class ShapeError(AutodiffError):
    """Operands have shapes the requested op does not accept."""


class NonFiniteError(AutodiffError):
    """An op produced NaN or Inf."""


class GraphConsumedError(AutodiffError):
    """backward() touched a graph that was already consumed."""


_FLOAT_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))
_DEFAULT_DTYPE = np.dtype(np.float64)


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dt}; use float64 or float32")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


_STATE = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_STATE, "grad_mode", True)


def _accountant():
    return getattr(_STATE, "accountant", None)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the tape (outputs are plain values)."""
    prev = is_grad_enabled()
    _STATE.grad_mode = False
    try:
        yield
    finally:
        _STATE.grad_mode = prev


@contextlib.contextmanager
def track_activations(accountant):
    """Report saved-activation element counts of new nodes to *accountant*.

    *accountant* needs ``acquire(n)`` and ``release(n)`` methods; see
    ``instrument.ActivationAccountant``.
    """
    prev = _accountant()
    _STATE.accountant = accountant
    try:
        yield accountant
    finally:
        _STATE.accountant = prev


class Tensor:
    """Dense n-dimensional value with optional gradient participation.

    Tensors are immutable values: no op writes to ``data`` after
    construction, so a tensor may be shared freely between graphs and
    threads. Internal (op-produced) tensors additionally carry the tape
    bookkeeping needed by ``backward``.
    """

    __slots__ = ("data", "grad_enabled", "_parents", "_backward", "_saved", "_acct", "_consumed")

    def __init__(self, data, grad_enabled: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=np.dtype(dtype))
        elif isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype}; use float64 or float32")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad_enabled = bool(grad_enabled)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._saved = 0
        self._acct = None
        self._consumed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: arr is already validated / freshly computed.
        t = object.__new__(cls)
        t.data = arr
        t.grad_enabled = False
        t._parents = ()
        t._backward = None
        t._saved = 0
        t._acct = None
        t._consumed = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._backward is None and not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's values, outside any graph."""
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data!r}"

    # Operator sugar for tests and demos; library code calls the functions.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor; ``grad=True`` marks it a differentiable leaf."""
    return Tensor(data, grad_enabled=grad, dtype=dtype)


def zeros(shape, grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.dtype(dtype) if dtype else _DEFAULT_DTYPE), grad_enabled=grad)


def _check_dtypes(op: str, *ts: Tensor) -> None:
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"{op}: mixed dtypes {dt} and {t.data.dtype}")


def _result(
    arr: np.ndarray,
    parents: Sequence[Tensor],
    make_backward,
    saved: Sequence[Tensor] = (),
    saves_output: bool = False,
    op: str = "op",
) -> Tensor:
    """Finalize an op: finiteness check, then tape recording if needed.

    *make_backward* is a zero-arg callable returning the backward closure;
    it is only invoked when the output actually joins a graph, so no-grad
    forwards pay nothing for closure setup.
    """
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    if not is_grad_enabled() or not any(p.grad_enabled for p in parents):
        return Tensor._wrap(arr)
    out = Tensor._wrap(arr)
    out.grad_enabled = True
    out._parents = tuple(parents)
    out._backward = make_backward()
    acct = _accountant()
    if acct is not None:
        n = sum(t.data.size for t in saved if not t.is_leaf())
        if saves_output:
            n += arr.size
        if n:
            acct.acquire(n)
            out._saved = n
            out._acct = acct
    return out


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. Accepts equal shapes, a scalar operand, or a row-wise bias
    (a of shape (m, n) plus b of shape (n,))."""
    _check_dtypes("add", a, b)
    if a.shape == b.shape:
        def bw():
            def run(g, acc):
                acc(a, g)
                acc(b, g)
            return run
        return _result(a.data + b.data, (a, b), bw, op="add")
    if b.data.ndim == 0:
        def bw():
            def run(g, acc):
                acc(a, g)
                acc(b, np.sum(g))
            return run
        return _result(a.data + b.data, (a, b), bw, op="add")
    if a.data.ndim == 0:
        def bw():
            def run(g, acc):
                acc(a, np.sum(g))
                acc(b, g)
            return run
        return _result(a.data + b.data, (a, b), bw, op="add")
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def bw():
            def run(g, acc):
                acc(a, g)
                acc(b, g.sum(axis=0))
            return run
        return _result(a.data + b.data[None, :], (a, b), bw, op="add")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    """a - b for equal shapes or a scalar operand."""
    _check_dtypes("sub", a, b)
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        def bw():
            def run(g, acc):
                acc(a, np.sum(g) if a.data.ndim == 0 and g.ndim > 0 else g)
                gb = -g
                acc(b, np.sum(gb) if b.data.ndim == 0 and g.ndim > 0 else gb)
            return run
        return _result(a.data - b.data, (a, b), bw, op="sub")
    raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b for equal shapes or a scalar operand."""
    _check_dtypes("mul", a, b)
    if not (a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bw():
        ad, bd = a.data, b.data

        def run(g, acc):
            ga = g * bd
            acc(a, np.sum(ga) if ad.ndim == 0 and ga.ndim > 0 else ga)
            gb = g * ad
            acc(b, np.sum(gb) if bd.ndim == 0 and gb.ndim > 0 else gb)
        return run

    return _result(a.data * b.data, (a, b), bw, saved=(a, b), op="mul")


def scale(a: Tensor, c: float) -> Tensor:
    """a * c for a Python scalar c (recorded as a constant)."""
    c = float(c)

    def bw():
        def run(g, acc):
            acc(a, g * c)
        return run

    return _result(a.data * c, (a,), bw, op="scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    _check_dtypes("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")

    def bw():
        ad, bd = a.data, b.data

        def run(g, acc):
            acc(a, g @ bd.T)
            acc(b, ad.T @ g)
        return run

    return _result(a.data @ b.data, (a, b), bw, saved=(a, b), op="matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-D tensor, got {a.shape}")

    def bw():
        def run(g, acc):
            acc(a, np.ascontiguousarray(g.T))
        return run

    return _result(np.ascontiguousarray(a.data.T), (a,), bw, op="transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def bw():
        old = a.data.shape

        def run(g, acc):
            acc(a, g.reshape(old))
        return run

    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    return _result(np.ascontiguousarray(out), (a,), bw, op="reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along *axis*; all other dimensions must agree."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat: empty input list")
    _check_dtypes("concat", *ts)
    ndim = ts[0].data.ndim
    ax = axis if axis >= 0 else axis + ndim
    for t in ts:
        if t.data.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
        for d in range(ndim):
            if d != ax and t.shape[d] != ts[0].shape[d]:
                raise ShapeError(f"concat: shape mismatch off axis {ax}: {t.shape} vs {ts[0].shape}")

    def bw():
        sizes = [t.shape[ax] for t in ts]
        bounds = np.cumsum([0] + sizes)

        def run(g, acc):
            for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
                idx = tuple(slice(None) if d != ax else slice(lo, hi) for d in range(ndim))
                acc(t, np.ascontiguousarray(g[idx]))
        return run

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, bw, op="concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("stack: empty input list")
    _check_dtypes("stack", *ts)
    shp = ts[0].shape
    for t in ts:
        if t.shape != shp:
            raise ShapeError(f"stack: shape mismatch {t.shape} vs {shp}")

    def bw():
        def run(g, acc):
            for i, t in enumerate(ts):
                # asarray, not ascontiguousarray: the latter would promote
                # scalar slices to shape (1,)
                acc(t, np.asarray(g[i]))
        return run

    return _result(np.stack([t.data for t in ts]), ts, bw, op="stack")


def gather(table: Tensor, ids) -> Tensor:
    """Select rows of a (V, d) table. Backward scatter-adds row gradients,
    so repeated ids accumulate their upstream gradients into one row."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather: ids must be 1-D, got shape {idx.shape}")
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"gather: id out of range [0, {v})")

    def bw():
        vshape = table.data.shape
        dt = table.data.dtype

        def run(g, acc):
            gt = np.zeros(vshape, dtype=dt)
            np.add.at(gt, idx, g)
            acc(table, gt)
        return run

    return _result(table.data[idx], (table,), bw, op="gather")


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def bw():
        shp = a.data.shape
        dt = a.data.dtype

        def run(g, acc):
            acc(a, np.full(shp, g, dtype=dt))
        return run

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bw, op="sum_all")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equal-shaped tensors as a single node (left-fold order)."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("add_n: empty input list")
    if len(ts) == 1:
        return ts[0]
    _check_dtypes("add_n", *ts)
    shp = ts[0].shape
    for t in ts:
        if t.shape != shp:
            raise ShapeError(f"add_n: shape mismatch {t.shape} vs {shp}")
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data

    def bw():
        def run(g, acc):
            for t in ts:
                acc(t, g)
        return run

    return _result(out, ts, bw, op="add_n")


def mean_pool(a: Tensor, axis: int = 0) -> Tensor:
    """Mean over one axis (the axis is removed)."""
    if a.data.ndim == 0:
        raise ShapeError("mean_pool: needs at least 1-D input")
    ax = axis if axis >= 0 else axis + a.data.ndim

    def bw():
        shp = a.data.shape
        inv = 1.0 / shp[ax]

        def run(g, acc):
            acc(a, np.broadcast_to(np.expand_dims(g * inv, ax), shp).copy())
        return run

    return _result(a.data.mean(axis=ax), (a,), bw, op="mean_pool")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # np.where evaluates both branches; errstate hides the spurious
    # overflow/invalid in the branch that is not selected.
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    out = np.asarray(out, dtype=x.dtype)

    def bw():
        def run(g, acc):
            acc(a, g * out * (1.0 - out))
        return run

    return _result(out, (a,), bw, saves_output=True, op="sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw():
        def run(g, acc):
            acc(a, g * (1.0 - out * out))
        return run

    return _result(out, (a,), bw, saves_output=True, op="tanh")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw():
        def run(g, acc):
            acc(a, g * (out > 0))
        return run

    return _result(out, (a,), bw, saves_output=True, op="relu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along *axis* (max-subtracted)."""
    ax = axis if axis >= 0 else axis + a.data.ndim
    x = a.data
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    out = e / e.sum(axis=ax, keepdims=True)

    def bw():
        def run(g, acc):
            dot = (g * out).sum(axis=ax, keepdims=True)
            acc(a, out * (g - dot))
        return run

    return _result(out, (a,), bw, saves_output=True, op="softmax")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def bce_loss(p: Tensor, y: Tensor, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy between probabilities p and labels y in {0, 1}.

    Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS]. ``reduction`` is
    "mean" or "sum" over all elements. Gradients flow to p only; labels
    are data.
    """
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: shape mismatch {p.shape} vs {y.shape}")
    if y.grad_enabled:
        raise ValueError("bce_loss: labels must not require grad")
    yd = y.data
    if not np.all((yd == 0.0) | (yd == 1.0)):
        raise ValueError("bce_loss: labels must be exactly 0 or 1")
    pd = p.data
    if pd.size and (pd.min() < 0.0 or pd.max() > 1.0):
        raise ValueError("bce_loss: probabilities must lie in [0, 1]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"bce_loss: unknown reduction {reduction!r}")
    pc = np.clip(pd, BCE_EPS, 1.0 - BCE_EPS)
    terms = -(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc))
    total = terms.sum()
    n = max(pd.size, 1)
    value = total / n if reduction == "mean" else total

    def bw():
        inside = (pd > BCE_EPS) & (pd < 1.0 - BCE_EPS)
        coeff = 1.0 / n if reduction == "mean" else 1.0

        def run(g, acc):
            acc(p, g * coeff * inside * (pc - yd) / (pc * (1.0 - pc)))
        return run

    return _result(np.asarray(value, dtype=pd.dtype), (p, y), bw, saved=(p,), op="bce_loss")


def mse_half(a: Tensor, b: Tensor) -> Tensor:
    """Half squared error 0.5 * sum((a - b)^2), summed over all elements.

    d/db = (b - a), so regressing b onto a fixed target a yields the plain
    residual as gradient.
    """
    _check_dtypes("mse_half", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_half: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data

    def bw():
        def run(g, acc):
            acc(a, g * diff)
            acc(b, -g * diff)
        return run

    return _result(np.asarray(0.5 * np.sum(diff * diff), dtype=a.data.dtype), (a, b), bw, saved=(a, b), op="mse_half")


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor, retain: Iterable[Tensor] = ()) -> dict[Tensor, Tensor]:
    """Reverse-mode gradients of a scalar loss.

    Returns a map from every grad-enabled leaf reachable from *loss* (plus
    any tensor listed in *retain*) to its gradient. The graph is consumed:
    saved activations are released and a second backward over any of its
    nodes raises ``GraphConsumedError``.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.grad_enabled:
        raise AutodiffError("backward: loss does not participate in any gradient")
    if loss._consumed:
        raise GraphConsumedError("backward: graph already consumed")

    topo: list[Tensor] = []
    seen: set[int] = set()
    work: list[tuple[Tensor, bool]] = [(loss, False)]
    while work:
        node, done = work.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        work.append((node, True))
        for p in node._parents:
            if not p.grad_enabled or id(p) in seen:
                continue
            if p._consumed:
                raise GraphConsumedError("backward: graph shares nodes with a consumed graph")
            work.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}

    def acc(t: Tensor, g: np.ndarray) -> None:
        if not t.grad_enabled:
            return
        k = id(t)
        cur = grads.get(k)
        grads[k] = g if cur is None else cur + g

    retained_ids = {id(t) for t in retain}
    result: dict[Tensor, Tensor] = {}
    for node in reversed(topo):
        g = grads.pop(id(node))
        if node._backward is None:
            result[node] = Tensor._wrap(np.asarray(g))
            continue
        if id(node) in retained_ids:
            result[node] = Tensor._wrap(np.asarray(g).copy())
        node._backward(g, acc)
        node._consumed = True
        node._backward = None
        node._parents = ()
        if node._acct is not None:
            node._acct.release(node._saved)
            node._acct = None
            node._saved = 0
    return result


def grad_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Compare reverse-mode gradients of scalar-valued ``f`` at ``x``
    against central finite differences.

    Returns max over components of |analytic - numeric| /
    (|analytic| + |numeric| + 1e-12).
    """
    if not x.grad_enabled:
        raise AutodiffError("grad_check: x must be a grad-enabled leaf")
    out = f(x)
    if out.data.ndim != 0:
        raise ShapeError("grad_check: f must be scalar-valued")
    gmap = backward(out)
    analytic = gmap[x].data if x in gmap else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat_num = numeric.ravel()
    with no_grad():
        for i in range(x.data.size):
            xp = x.data.copy()
            xp.ravel()[i] += eps
            fp = float(f(Tensor._wrap(xp)).data)
            xm = x.data.copy()
            xm.ravel()[i] -= eps
            fm = float(f(Tensor._wrap(xm)).data)
            flat_num[i] = (fp - fm) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
