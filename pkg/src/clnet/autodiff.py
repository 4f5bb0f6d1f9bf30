"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`
when at least one operand requires a gradient. :func:`backward` walks the
tape in exact reverse append order, so the append order doubles as the
topological order of the graph.

Only the operations needed by the consensus network are provided.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "no_grad",
    "backward",
    "grad_check",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "sum",
    "mean",
    "var",
    "max",
    "concat",
    "gather",
    "transpose",
    "reshape",
    "standardize",
    "bce_with_logits",
    "eigh_smallest",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's algebraic rule."""


class DomainError(ValueError):
    """Operand values fall outside an operation's domain."""


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager to scope a computation (one per sample in
    training); outside any ``with Tape()`` block operations go to a
    per-thread default tape that :func:`backward` empties after use.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().stack
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
            node.output._index = -1
        self.nodes.clear()

    def record(self, inputs: tuple["Tensor", ...], output: "Tensor", rule: Callable) -> None:
        output._tape = self
        output._index = len(self.nodes)
        self.nodes.append(_Node(inputs, output, rule))


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.stack: list[Tape] = []
        self.default = Tape()
        self.enabled = True


_local = _ThreadState()
# shared parameters may be reached from tapes running on several threads
_leaf_lock = threading.Lock()


def _state() -> _ThreadState:
    return _local


def _current_tape() -> Tape:
    st = _state()
    return st.stack[-1] if st.stack else st.default


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on the current thread."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


class Tensor:
    """Dense row-major float64 array with an optional gradient.

    Leaves created with ``requires_grad=True`` accumulate gradients into
    ``grad`` across calls to :func:`backward`; call :meth:`zero_grad` to
    reset.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t._index = -1
        return t

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
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __rmatmul__ = lambda self, o: matmul(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(arr: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    if _state().enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _current_tape().record(inputs, out, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), rule)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 1-D or 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = ad @ bd
    n = bd.shape[0]

    if bd.ndim == 1:

        def rule(g):
            ga = g[..., None] * bd if a.requires_grad else None
            gb = (ad * g[..., None]).reshape(-1, n).sum(axis=0) if b.requires_grad else None
            return ga, gb

    elif ad.ndim == 1:

        def rule(g):
            return (bd @ g if a.requires_grad else None, np.outer(ad, g) if b.requires_grad else None)

    else:
        p = bd.shape[1]

        def rule(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, n).T @ g.reshape(-1, p) if b.requires_grad else None
            return ga, gb

    return _make(out, (a, b), rule)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def eigh_smallest(m) -> Tensor:
    """Unit eigenvector of the smallest eigenvalue of a symmetric matrix.

    The backward pass uses first-order eigenvector perturbation and is
    ill-conditioned when the two smallest eigenvalues nearly coincide;
    callers are expected to check the gap.
    """
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"eigh_smallest: expected a square matrix, got shape {m.shape}")
    sym = 0.5 * (m.data + m.data.T)
    lam, vecs = np.linalg.eigh(sym)
    v = vecs[:, 0].copy()

    def rule(g):
        coef = vecs[:, 1:].T @ g / (lam[0] - lam[1:])
        gm = np.outer(vecs[:, 1:] @ coef, v)
        return (0.5 * (gm + gm.T),)

    return _make(v, (m,), rule)


# --- nonlinearities ---------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("sqrt: input must be strictly positive for a finite gradient")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


# --- reductions -------------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[ax] for ax in axes]))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = _count(shape, axis)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand(g, shape, axis, keepdims) / n,))


def var(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the item count)."""
    a = as_tensor(a)
    shape = a.shape
    n = _count(shape, axis)
    centered = a.data - np.mean(a.data, axis=axis, keepdims=True)
    out = np.mean(centered * centered, axis=axis, keepdims=keepdims)
    return _make(
        np.asarray(out), (a,), lambda g: (2.0 * centered * _expand(g, shape, axis, keepdims) / n,)
    )


def max(a, axis: int) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    ad = a.data
    idx = np.expand_dims(np.argmax(ad, axis=axis), axis)
    out = np.take_along_axis(ad, idx, axis=axis).squeeze(axis)

    def rule(g):
        ga = np.zeros_like(ad)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), rule)


# --- structural -------------------------------------------------------------


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather(a, index, axis: int = 0) -> Tensor:
    """Select rows by integer index; ``index`` may be any integer array.

    Gradient flows only to gathered rows, summed over repeats.
    """
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if axis != 0:
        raise ShapeError("gather: only axis 0 is supported")
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather: index out of range for axis of size {n}")
    shape = a.shape

    def rule(g):
        flat = g.reshape((idx.size,) + shape[1:])
        ga = np.zeros(shape)
        np.add.at(ga, idx.reshape(-1), flat)
        return (ga,)

    return _make(a.data[idx], (a,), rule)


# --- fused ------------------------------------------------------------------


def standardize(a, axis: int = 0, floor: float = 1e-8) -> Tensor:
    """Subtract the mean and divide by the population std along ``axis``.

    The std is floored at ``floor`` so constant channels map to zero.
    """
    a = as_tensor(a)
    ad = a.data
    if ad.shape[axis] < 1:
        raise ShapeError(f"standardize: empty axis in shape {a.shape}")
    mu = ad.mean(axis=axis, keepdims=True)
    c = ad - mu
    sd = np.sqrt((c * c).mean(axis=axis, keepdims=True))
    floored = sd < floor
    s = np.where(floored, floor, sd)
    y = c / s

    def rule(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = np.where(floored, 0.0, (g * y).mean(axis=axis, keepdims=True))
        return ((g - gm - y * gy) / s,)

    return _make(y, (a,), rule)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    zd = z.data
    n = zd.size
    loss = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    p = _sigmoid(zd)
    return _make(np.asarray(loss.mean()), (z,), lambda g: (g * (p - y) / n,))


# --- reverse pass -----------------------------------------------------------


def backward(loss: Tensor, retain: bool = False) -> None:
    """Populate ``grad`` on every requires-grad leaf recorded before ``loss``.

    Leaves that appear on the tape but are not reachable from ``loss`` get a
    zero gradient. The tape is cleared afterwards unless ``retain`` is set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad")
    tape = loss._tape
    if tape is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss._index + 1]):
        g = grads.pop(id(node.output), None)
        in_grads = node.backward(g) if g is not None else (None,) * len(node.inputs)
        for inp, gi in zip(node.inputs, in_grads):
            if not inp.requires_grad:
                continue
            if inp._tape is None:
                _accumulate(inp, gi)
            elif gi is not None:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    if not retain:
        tape.clear()


def _accumulate(leaf: Tensor, g: np.ndarray | None) -> None:
    with _leaf_lock:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        if g is not None:
            leaf.grad = leaf.grad + g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over coordinates of ``x``.

    Numeric derivatives use central differences with step ``h``.
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape():
        y = f(probe)
        if y.data.size != 1:
            raise ValueError(f"grad_check: f must be scalar-valued, got shape {y.shape}")
        if y.requires_grad:
            backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            hi, lo = flat.copy(), flat.copy()
            hi[i] += h
            lo[i] -= h
            fp = f(Tensor(hi.reshape(base.shape))).item()
            fm = f(Tensor(lo.reshape(base.shape))).item()
            numeric[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
