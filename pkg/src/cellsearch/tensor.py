"""Dense float64 arrays with a recorded computation tape for reverse-mode gradients.

The engine is define-by-run: opening a ``Tape`` as a context manager makes it
the active tape for the current thread, and every primitive applied while it
is active appends one record. Records are appended in execution order, which
is a topological order by construction, so ``backward`` is a single reverse
sweep with no sorting.

Shape rules are deliberately narrow: elementwise primitives require identical
shapes, the only broadcasting allowed is a 0-d scalar against a tensor, and
matrix multiplication is strictly 2-d. Everything is float64; the
finite-difference machinery built on top of this engine is too sensitive to
rounding for single precision.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """An operand shape violates a primitive's shape rule."""


class TapeError(RuntimeError):
    """Invalid tape usage: nested tapes, cross-tape values, loss not recorded."""


_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Value:
    """A dense float64 array, optionally participating in a recorded tape.

    A ``Value`` is either a leaf (constant or parameter) or the output of a
    primitive. Parameters are leaves whose ``grad`` slot ``backward`` fills
    in; constants never receive gradients. Data is stored row-major.
    """

    __slots__ = ("data", "grad", "is_param", "name", "_tape", "_recorded")

    def __init__(self, data, *, is_param: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.is_param = is_param
        self.name = name
        self._tape: "Tape | None" = None
        self._recorded = False

    @classmethod
    def param(cls, data, name: str | None = None) -> "Value":
        """A leaf that will receive a gradient from ``backward``."""
        return cls(data, is_param=True, name=name)

    @classmethod
    def constant(cls, data) -> "Value":
        return cls(data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = "param " if self.is_param else ""
        return f"Value({tag}shape={self.shape})"

    # Arithmetic sugar. Python scalars go through scale/add-constant paths.
    def __add__(self, other):
        return add(self, _as_value(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _as_value(other))

    def __rsub__(self, other):
        return subtract(_as_value(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self):
        return sum_all(self)

    def detach(self) -> "Value":
        return detach(self)


def _as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=np.float64))


class Tape:
    """Append-only record of primitive applications, in execution order.

    Use as a context manager; at most one tape may be active per thread.
    Leaf parameters are registered the first time a primitive consumes them,
    in consumption order. The tape and its values belong to one thread;
    independent tapes share no state.
    """

    __slots__ = ("records", "_params", "_param_ids")

    def __init__(self):
        self.records: list[tuple] = []  # (kind, inputs, output, backward_fn)
        self._params: list[Value] = []
        self._param_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def params(self) -> tuple[Value, ...]:
        """Leaf parameters seen so far, in first-use order."""
        return tuple(self._params)

    def _register_leaf(self, v: Value):
        if v.is_param and id(v) not in self._param_ids:
            self._param_ids.add(id(v))
            self._params.append(v)
            v._tape = self

    def _record(self, kind: str, inputs: tuple[Value, ...], output: Value, backward_fn):
        for v in inputs:
            if v._recorded:
                if v._tape is not self:
                    raise TapeError(
                        f"{kind}: input was produced on a different tape"
                    )
            else:
                self._register_leaf(v)
        output._tape = self
        output._recorded = True
        self.records.append((kind, inputs, output, backward_fn))


def _emit(kind: str, inputs: tuple[Value, ...], out_data: np.ndarray, backward_fn) -> Value:
    """Create the output Value and record it if a tape is reachable."""
    out = Value(out_data)
    tape = _active_tape()
    if tape is None:
        for v in inputs:
            if v._recorded and v._tape is not None:
                tape = v._tape
                break
    if tape is not None:
        tape._record(kind, inputs, out, backward_fn)
    return out


def backward(loss: Value, wrt: Iterable[Value] | None = None) -> None:
    """Assign d(loss)/d(p) into ``p.grad`` for each requested parameter.

    ``loss`` must be a scalar recorded on a tape. With ``wrt`` omitted, every
    parameter registered on the loss's tape receives a gradient; otherwise
    only the given parameters do (others are left untouched). Parameters that
    do not influence the loss receive zeros. Each call assigns fresh
    gradients; nothing accumulates across calls.
    """
    if loss.ndim != 0:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not loss._recorded:
        raise TapeError("backward: loss is not recorded on a tape")
    params = list(tape.params) if wrt is None else list(wrt)
    for p in params:
        if not p.is_param:
            raise TapeError("backward: wrt entries must be parameters")

    needed = {id(p) for p in params}
    for _, inputs, output, _ in tape.records:
        if any(id(v) in needed for v in inputs):
            needed.add(id(output))

    adjoint: dict[int, np.ndarray] = {}
    if id(loss) in needed:
        adjoint[id(loss)] = np.ones((), dtype=np.float64)
        for _, inputs, output, backward_fn in reversed(tape.records):
            g_out = adjoint.pop(id(output), None)
            if g_out is None:
                continue
            grads = backward_fn(g_out)
            for v, g in zip(inputs, grads):
                if g is None or id(v) not in needed:
                    continue
                prev = adjoint.get(id(v))
                adjoint[id(v)] = g if prev is None else prev + g

    for p in params:
        g = adjoint.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else np.reshape(g, p.shape)


# ---------------------------------------------------------------------------
# Primitives. Each checks its shape rule, computes with numpy, and registers
# a closure producing input gradients aligned with the ``inputs`` tuple
# (None for inputs that never receive gradients, e.g. class labels).
# ---------------------------------------------------------------------------


def _shape_guard(kind: str, ok: bool, *shapes):
    if not ok:
        pretty = " vs ".join(str(s) for s in shapes)
        raise ShapeError(f"{kind}: incompatible shapes {pretty}")


def _elementwise_pair(kind: str, a: Value, b: Value):
    """Allow identical shapes, or a 0-d scalar against a tensor."""
    _shape_guard(kind, a.shape == b.shape or a.ndim == 0 or b.ndim == 0, a.shape, b.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo scalar-with-tensor broadcasting in the backward pass.
    if shape == ():
        return np.asarray(g.sum(), dtype=np.float64)
    return g


def add(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _elementwise_pair("add", a, b)

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, back)


def subtract(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _elementwise_pair("subtract", a, b)

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _emit("subtract", (a, b), a.data - b.data, back)


def multiply(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _elementwise_pair("elementwise-multiply", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _emit("elementwise-multiply", (a, b), ad * bd, back)


def scale(a: Value, c: float) -> Value:
    """Multiply by a plain Python constant (not differentiated through)."""
    a = _as_value(a)
    c = float(c)

    def back(g):
        return (g * c,)

    return _emit("scale-by-constant", (a,), a.data * c, back)


def matmul(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _shape_guard(
        "matrix-multiply",
        a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0],
        a.shape,
        b.shape,
    )
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _emit("matrix-multiply", (a, b), ad @ bd, back)


def tanh(x: Value) -> Value:
    x = _as_value(x)
    y = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return _emit("tanh", (x,), y, back)


def relu(x: Value) -> Value:
    x = _as_value(x)
    mask = x.data > 0.0

    def back(g):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0.0), back)


def sigmoid(x: Value) -> Value:
    x = _as_value(x)
    y = 1.0 / (1.0 + np.exp(-x.data))

    def back(g):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", (x,), y, back)


def softmax(x: Value, axis: int = -1) -> Value:
    """Softmax along one axis; stable under large logits."""
    x = _as_value(x)
    _shape_guard("softmax-over-axis", x.ndim >= 1, x.shape)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax-over-axis", (x,), y, back)


def concatenate(values: Sequence[Value], axis: int = 0) -> Value:
    vals = [_as_value(v) for v in values]
    _shape_guard("concatenate", len(vals) >= 1, ())
    base = list(vals[0].shape)
    for v in vals[1:]:
        other = list(v.shape)
        same_rank = len(other) == len(base)
        _shape_guard("concatenate", same_rank, vals[0].shape, v.shape)
        probe = [d for i, d in enumerate(other) if i != axis % len(base)]
        ref = [d for i, d in enumerate(base) if i != axis % len(base)]
        _shape_guard("concatenate", probe == ref, vals[0].shape, v.shape)
    sizes = [v.shape[axis % v.ndim] for v in vals]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit(
        "concatenate", tuple(vals), np.concatenate([v.data for v in vals], axis=axis), back
    )


def mean(x: Value, axis: int | None = None) -> Value:
    """Mean over one axis, or over all elements when axis is None."""
    x = _as_value(x)
    if axis is None:
        n = x.size

        def back(g):
            return (np.full(x.shape, float(g) / n),)

        return _emit("mean-over-axis", (x,), np.asarray(x.data.mean()), back)

    _shape_guard("mean-over-axis", -x.ndim <= axis < x.ndim, x.shape)
    n = x.shape[axis]

    def back(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _emit("mean-over-axis", (x,), x.data.mean(axis=axis), back)


def sum_all(x: Value) -> Value:
    x = _as_value(x)

    def back(g):
        return (np.full(x.shape, float(g)),)

    return _emit("sum", (x,), np.asarray(x.data.sum()), back)


def select(x: Value, index: int) -> Value:
    """Pick one entry of a 1-d value as a scalar."""
    x = _as_value(x)
    _shape_guard("select-index", x.ndim == 1 and 0 <= index < x.shape[0], x.shape)

    def back(g):
        out = np.zeros(x.shape)
        out[index] = float(g)
        return (out,)

    return _emit("select-index", (x,), np.asarray(x.data[index]), back)


def mse_loss(pred: Value, target: Value) -> Value:
    pred, target = _as_value(pred), _as_value(target)
    _shape_guard("mean-squared-error", pred.shape == target.shape, pred.shape, target.shape)
    diff = pred.data - target.data
    n = max(pred.size, 1)

    def back(g):
        d = (2.0 / n) * diff * float(g)
        return d, -d

    return _emit("mean-squared-error", (pred, target), np.asarray((diff * diff).mean()), back)


def cross_entropy(logits: Value, labels) -> Value:
    """Mean softmax cross-entropy over a batch of rows.

    ``logits`` is (batch, classes); ``labels`` holds integer class ids and is
    never differentiated.
    """
    logits = _as_value(logits)
    labels = _as_value(labels)
    idx = labels.data.astype(np.int64)
    _shape_guard(
        "softmax-cross-entropy",
        logits.ndim == 2 and idx.ndim == 1 and idx.shape[0] == logits.shape[0],
        logits.shape,
        labels.shape,
    )
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = lse - shifted[rows, idx]
    probs = np.exp(shifted - lse[:, None])
    batch = z.shape[0]

    def back(g):
        d = probs.copy()
        d[rows, idx] -= 1.0
        return d * (float(g) / batch), None

    return _emit("softmax-cross-entropy", (logits, labels), np.asarray(nll.mean()), back)


def detach(v: Value) -> Value:
    """Same data as a fresh constant with no tape participation."""
    v = _as_value(v)
    return Value(v.data.copy())


# ---------------------------------------------------------------------------
# Uniform dispatch by primitive kind, used by the gradient checker and by
# callers that treat the primitive set as data.
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "scale-by-constant": scale,
    "elementwise-multiply": multiply,
    "matrix-multiply": matmul,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax-over-axis": softmax,
    "concatenate": concatenate,
    "mean-over-axis": mean,
    "sum": sum_all,
    "select-index": select,
    "mean-squared-error": mse_loss,
    "softmax-cross-entropy": cross_entropy,
}


def apply_primitive(kind: str, inputs: Sequence[Value], **attrs) -> Value:
    """Apply a primitive by kind name.

    Attributes that are not differentiated (axis, constant factor, index)
    are passed as keyword arguments.
    """
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind: {kind!r}") from None
    if kind == "concatenate":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Finite-difference utilities shared by the test oracles and the gradient
# check command.
# ---------------------------------------------------------------------------


def finite_difference(f: Callable[[Sequence[np.ndarray]], float],
                      arrays: Sequence[np.ndarray],
                      step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of a scalar function of several arrays."""
    grads = []
    work = [np.array(a, dtype=np.float64) for a in arrays]
    for k, a in enumerate(work):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(work)
            flat[i] = orig - step
            down = f(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Relative L2 distance, guarded for near-zero pairs."""
    na = float(np.linalg.norm(np.asarray(a, dtype=np.float64).ravel()))
    nb = float(np.linalg.norm(np.asarray(b, dtype=np.float64).ravel()))
    diff = float(np.linalg.norm((np.asarray(a) - np.asarray(b)).ravel()))
    denom = max(na, nb)
    if denom == 0.0:
        return diff
    return diff / denom


def flat_norm(arrays: Iterable[np.ndarray]) -> float:
    """Global L2 norm over a collection of arrays."""
    total = 0.0
    for a in arrays:
        total += float(np.sum(np.asarray(a, dtype=np.float64) ** 2))
    return float(np.sqrt(total))
