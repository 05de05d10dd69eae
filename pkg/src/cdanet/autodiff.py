"""Reverse-mode automatic differentiation on dense float64 buffers.

Define-by-run: primitives executed while a Tape is active append records to
the tape, and ``Tape.backward`` replays them in reverse topological order.
The operation set is exactly what the two-domain CTR graph needs; the only
broadcasting supported is a bias row added to a matrix and a single-column
factor scaling a matrix.  Gradient buffers accumulate across backward calls
until explicitly zeroed, so multi-term losses can be backpropagated piecewise.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "DeterminismError",
    "backward",
    "grad_check",
    "matmul",
    "concat",
    "sigmoid",
    "relu",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "mean",
    "sum_all",
    "softmax_rows",
    "select_columns",
    "bce_with_logits",
    "frobenius_sq",
    "gather_rows",
    "pool_rows",
]


class ShapeError(ValueError):
    """An operand shape violates the operation contract."""


class DeterminismError(RuntimeError):
    """The function under a finite-difference check is not deterministic."""


class Tensor:
    """Dense float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "_in_graph")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._in_graph = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named tensor owned by a model; trainable parameters always track gradients."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, values, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(values, requires_grad=trainable)
        self.trainable = trainable

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


_ACTIVE_TAPE: "Tape | None" = None

# One record per executed primitive: (output, backward_fn).  backward_fn maps
# the output adjoint to (input_tensor, input_adjoint) pairs.
_Record = tuple[Tensor, Callable[[np.ndarray], tuple]]


class Tape:
    """Ordered record of executed primitives, replayed in reverse by backward().

    Records are appended in execution order, so every operation's inputs were
    produced earlier on the tape or are leaves; a reverse sweep therefore sees
    each output's full adjoint before propagating it to the inputs.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor
        with ``requires_grad``.  Each record is replayed exactly once."""
        if loss.values.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for out, backward_fn in reversed(self._records):
            g_out = flowing.get(id(out))
            if g_out is None:
                continue
            for tensor, g_in in backward_fn(g_out):
                if g_in is None:
                    continue
                key = id(tensor)
                if key in flowing:
                    flowing[key] = flowing[key] + g_in
                else:
                    flowing[key] = g_in
                    seen[key] = tensor
        for key, tensor in seen.items():
            if tensor.requires_grad:
                tensor._accumulate(flowing[key])


def backward(loss: Tensor) -> None:
    """Replay the active tape backward from a scalar loss."""
    if _ACTIVE_TAPE is None:
        raise RuntimeError("backward() called with no active Tape")
    _ACTIVE_TAPE.backward(loss)


def _emit(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad or t._in_graph for t in inputs):
        out._in_graph = True
        tape._records.append((out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    out = Tensor(a.values @ b.values)

    def backward_fn(g):
        return ((a, g @ b.values.T), (b, a.values.T @ g))

    return _emit(out, (a, b), backward_fn)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two matrices with equal row counts."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat: leading dimensions of {a.shape} and {b.shape} differ")
    p = a.shape[1]
    out = Tensor(np.concatenate((a.values, b.values), axis=1))

    def backward_fn(g):
        return ((a, g[:, :p]), (b, g[:, p:]))

    return _emit(out, (a, b), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(_sigmoid(x.values))

    def backward_fn(g):
        s = out.values
        return ((x, g * s * (1.0 - s)),)

    return _emit(out, (x,), backward_fn)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments, so no overflow
    pos = v >= 0
    z = np.empty_like(v)
    z[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    z[~pos] = ev / (1.0 + ev)
    return z


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.values, 0.0))

    def backward_fn(g):
        return ((x, g * (x.values > 0.0)),)

    return _emit(out, (x,), backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")
    out = Tensor(x.values.T.copy())

    def backward_fn(g):
        return ((x, g.T),)

    return _emit(out, (x,), backward_fn)


def _bias_compatible(shape_a, shape_b) -> bool:
    # matrix plus bias row
    return (
        len(shape_a) == 2
        and len(shape_b) == 2
        and shape_b[0] == 1
        and shape_a[1] == shape_b[1]
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a [n,k] matrix plus a [1,k] bias row."""
    if a.shape != b.shape and not _bias_compatible(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values + b.values)

    def backward_fn(g):
        gb = g if a.shape == b.shape else g.sum(axis=0, keepdims=True)
        return ((a, g), (b, gb))

    return _emit(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not _bias_compatible(a.shape, b.shape):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values - b.values)

    def backward_fn(g):
        gb = -g if a.shape == b.shape else -g.sum(axis=0, keepdims=True)
        return ((a, g), (b, gb))

    return _emit(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; also accepts a [n,1] column scaling a [n,k] matrix."""
    col_a = len(a.shape) == 2 and len(b.shape) == 2 and a.shape[1] == 1 and a.shape[0] == b.shape[0]
    col_b = len(a.shape) == 2 and len(b.shape) == 2 and b.shape[1] == 1 and a.shape[0] == b.shape[0]
    if a.shape != b.shape and not (col_a or col_b):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values * b.values)

    def backward_fn(g):
        ga = g * b.values
        gb = g * a.values
        if a.shape != b.shape:
            if a.shape[1] == 1:
                ga = ga.sum(axis=1, keepdims=True)
            else:
                gb = gb.sum(axis=1, keepdims=True)
        return ((a, ga), (b, gb))

    return _emit(out, (a, b), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.values * c)

    def backward_fn(g):
        return ((x, g * c),)

    return _emit(out, (x,), backward_fn)


def mean(x: Tensor) -> Tensor:
    n = x.values.size
    out = Tensor(x.values.mean())

    def backward_fn(g):
        return ((x, np.full(x.shape, float(g) / n)),)

    return _emit(out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.values.sum())

    def backward_fn(g):
        return ((x, np.full(x.shape, float(g))),)

    return _emit(out, (x,), backward_fn)


def softmax_rows(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {x.shape}")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=1, keepdims=True))

    def backward_fn(g):
        s = out.values
        return ((x, s * (g - (g * s).sum(axis=1, keepdims=True))),)

    return _emit(out, (x,), backward_fn)


def select_columns(x: Tensor, start: int, stop: int) -> Tensor:
    if x.values.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"select_columns: [{start}:{stop}] invalid for shape {x.shape}")
    out = Tensor(x.values[:, start:stop].copy())

    def backward_fn(g):
        gx = np.zeros_like(x.values)
        gx[:, start:stop] = g
        return ((x, gx),)

    return _emit(out, (x,), backward_fn)


def bce_with_logits(logit: Tensor, label: Tensor) -> Tensor:
    """Mean binary cross entropy computed in logit space.

    Uses the overflow-free form max(l,0) - l*y + log1p(exp(-|l|)); the
    backward pass is (sigmoid(l) - y) / n.
    """
    if logit.shape != label.shape:
        raise ShapeError(f"bce_with_logits: logit {logit.shape} vs label {label.shape}")
    y = label.values
    if not np.all((y == 0.0) | (y == 1.0)):
        bad = y[(y != 0.0) & (y != 1.0)][0]
        raise ValueError(f"bce_with_logits: labels must be exactly 0 or 1, found {bad}")
    lv = logit.values
    per = np.maximum(lv, 0.0) - lv * y + np.log1p(np.exp(-np.abs(lv)))
    n = lv.size
    out = Tensor(per.mean() if n else 0.0)

    def backward_fn(g):
        return ((logit, float(g) * (_sigmoid(lv) - y) / n),)

    return _emit(out, (logit, label), backward_fn)


def frobenius_sq(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.values * x.values))

    def backward_fn(g):
        return ((x, 2.0 * float(g) * x.values),)

    return _emit(out, (x,), backward_fn)


def gather_rows(table: Tensor, indices, context: str | None = None) -> Tensor:
    """Stack rows of a [V,d] table; duplicate indices accumulate gradient."""
    if table.values.ndim != 2:
        raise ShapeError(f"gather_rows needs a matrix table, got shape {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows indices must be one-dimensional, got shape {idx.shape}")
    _check_row_indices(idx, table.shape[0], context)
    out = Tensor(table.values[idx])

    def backward_fn(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return ((table, gt),)

    return _emit(out, (table,), backward_fn)


def pool_rows(table: Tensor, flat_indices, offsets, context: str | None = None) -> Tensor:
    """Mean of table rows per segment (CSR layout: offsets has n+1 entries)."""
    if table.values.ndim != 2:
        raise ShapeError(f"pool_rows needs a matrix table, got shape {table.shape}")
    flat = np.asarray(flat_indices, dtype=np.int64)
    offs = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offs)
    if np.any(counts < 1):
        raise ValueError("pool_rows: every segment must hold at least one index")
    if offs[0] != 0 or offs[-1] != flat.size:
        raise ShapeError("pool_rows: offsets do not span the flat index buffer")
    _check_row_indices(flat, table.shape[0], context)
    sums = np.add.reduceat(table.values[flat], offs[:-1], axis=0)
    out = Tensor(sums / counts[:, None])

    def backward_fn(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, flat, np.repeat(g / counts[:, None], counts, axis=0))
        return ((table, gt),)

    return _emit(out, (table,), backward_fn)


def _check_row_indices(idx: np.ndarray, vocab: int, context: str | None) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        where = f" (field '{context}')" if context else ""
        raise IndexError(f"row index {bad} out of range for table of {vocab} rows{where}")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` must rebuild its forward graph on every call and be deterministic;
    the relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError(f"grad_check: step h must be positive, got {h}")
    v1 = _eval_scalar(f)
    v2 = _eval_scalar(f)
    if v1 != v2:
        raise DeterminismError(f"function returned {v1!r} then {v2!r} at the same point")

    for p in params:
        p.tensor.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [
        p.tensor.grad.copy() if p.tensor.grad is not None else np.zeros_like(p.values)
        for p in params
    ]
    for p in params:
        p.tensor.zero_grad()

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.values.ravel()
        ga_flat = ga.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_scalar(f)
            flat[i] = orig - h
            fm = _eval_scalar(f)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(ga_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ga_flat[i] - numeric) / denom)
    return worst


def _eval_scalar(f: Callable[[], Tensor]) -> float:
    # forward only: suppress any active tape so probes are never recorded
    global _ACTIVE_TAPE
    saved, _ACTIVE_TAPE = _ACTIVE_TAPE, None
    try:
        return f().item()
    finally:
        _ACTIVE_TAPE = saved
