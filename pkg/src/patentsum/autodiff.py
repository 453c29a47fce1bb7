"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything the model math runs on: 2-D float tensors, a tape that records
primitive operations during the forward pass and replays them backward, a
central-finite-difference gradient oracle, global-norm clipping, and the
bias-corrected Adam update.

Tensors are strictly 2-D: column vectors are (n, 1), row vectors (1, n),
scalars (1, 1). Broadcasting is limited to what the model needs — a (1, 1)
scalar, a (m, 1) column, or a (1, n) row against a (m, n) matrix.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DegenerateDistributionError",
    "GraphError",
    "NonFiniteError",
    "tensor",
    "zeros",
    "matmul",
    "elementwise",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sigmoid",
    "tanh",
    "softmax",
    "log",
    "minimum",
    "concat_rows",
    "hstack_cols",
    "slice_cols",
    "transpose",
    "sum_all",
    "pick",
    "embed_row",
    "pad_rows",
    "copy_distribution",
    "grad_check",
    "AdamState",
    "adam_step",
    "clip_gradients",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class DegenerateDistributionError(ValueError):
    """A softmax was requested with every position masked out."""


class GraphError(ValueError):
    """Backward was asked for a loss the tape never produced, or a non-scalar."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class Tensor:
    """A dense 2-D array with an optional gradient buffer.

    ``track=True`` marks a leaf whose gradient should survive a backward
    pass (model parameters). Tensors produced by primitives under an active
    tape join the graph automatically.
    """

    __slots__ = ("data", "grad", "track", "_in_graph")

    def __init__(self, data, track: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.track = track
        self._in_graph = track

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), track=self.track)
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, track={self.track})"


def tensor(data, track: bool = False, dtype=None) -> Tensor:
    return Tensor(data, track=track, dtype=dtype)


def zeros(rows: int, cols: int = 1, track: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros((rows, cols), dtype=dtype), track=track)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of primitive ops from one forward pass.

    Append order is construction order, so replaying the record back to
    front visits operations in reverse topological order. Use as a context
    manager; nesting is not supported (one tape per thread).
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable[[], None]]] = []

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise GraphError("a tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.tape = None

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable[[], None]) -> None:
        out._in_graph = True
        self._ops.append((out, inputs, bwd))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every tracked leaf's ``.grad``."""
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if not loss._in_graph or not any(op[0] is loss for op in self._ops):
            raise GraphError("loss tensor is detached from this tape")
        seen: set[int] = set()
        for out, inputs, _ in self._ops:
            for t in (out, *inputs):
                if t._in_graph and id(t) not in seen:
                    seen.add(id(t))
                    t.grad = np.zeros_like(t.data)
        loss.grad = np.ones_like(loss.data)
        for out, _, bwd in reversed(self._ops):
            bwd()


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unary(data: np.ndarray, x: Tensor, bwd_factory) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.track = False
    out._in_graph = False
    t = _current_tape()
    if t is not None and x._in_graph:
        t.record(out, (x,), bwd_factory(out))
    return out


def _result(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.track = False
    out._in_graph = False
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; inner dimensions must agree."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = _result(a.data @ b.data)
    t = _current_tape()
    if t is not None and (a._in_graph or b._in_graph):
        def bwd():
            if a._in_graph:
                a.grad += out.grad @ b.data.T
            if b._in_graph:
                b.grad += a.data.T @ out.grad
        t.record(out, (a, b), bwd)
    return out


def _broadcast_reduce(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    g = grad
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    for axis in (0, 1):
        da, db = a.shape[axis], b.shape[axis]
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{opname} shapes incompatible: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = _result(a.data + b.data)
    t = _current_tape()
    if t is not None and (a._in_graph or b._in_graph):
        def bwd():
            if a._in_graph:
                a.grad += _broadcast_reduce(out.grad, a.shape)
            if b._in_graph:
                b.grad += _broadcast_reduce(out.grad, b.shape)
        t.record(out, (a, b), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = _result(a.data - b.data)
    t = _current_tape()
    if t is not None and (a._in_graph or b._in_graph):
        def bwd():
            if a._in_graph:
                a.grad += _broadcast_reduce(out.grad, a.shape)
            if b._in_graph:
                b.grad -= _broadcast_reduce(out.grad, b.shape)
        t.record(out, (a, b), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise product with scalar/row/column broadcasting."""
    _check_broadcast(a, b, "mul")
    out = _result(a.data * b.data)
    t = _current_tape()
    if t is not None and (a._in_graph or b._in_graph):
        def bwd():
            if a._in_graph:
                a.grad += _broadcast_reduce(out.grad * b.data, a.shape)
            if b._in_graph:
                b.grad += _broadcast_reduce(out.grad * a.data, b.shape)
        t.record(out, (a, b), bwd)
    return out


ELEMENTWISE_OPS = ("sigmoid", "tanh", "add", "mul", "sub")


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch a named pointwise primitive: sigmoid, tanh, add, mul, sub."""
    if op not in ELEMENTWISE_OPS:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {ELEMENTWISE_OPS}")
    fns = {"sigmoid": sigmoid, "tanh": tanh, "add": add, "mul": mul, "sub": sub}
    wants = 1 if op in ("sigmoid", "tanh") else 2
    if len(args) != wants:
        raise ShapeError(f"{op} takes {wants} argument(s), got {len(args)}")
    return fns[op](*args)


def backward(loss: Tensor, tape: "Tape") -> None:
    """Replay ``tape`` in reverse, accumulating d(loss)/d(leaf) gradients."""
    tape.backward(loss)


def neg(x: Tensor) -> Tensor:
    def factory(out):
        def bwd():
            x.grad -= out.grad
        return bwd
    return _unary(-x.data, x, factory)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable python constant."""
    def factory(out):
        def bwd():
            x.grad += c * out.grad
        return bwd
    return _unary(c * x.data, x, factory)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    def factory(out):
        def bwd():
            x.grad += out.grad * (out.data * (1.0 - out.data))
        return bwd
    return _unary(y, x, factory)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    def factory(out):
        def bwd():
            x.grad += out.grad * (1.0 - out.data * out.data)
        return bwd
    return _unary(y, x, factory)


def log(x: Tensor) -> Tensor:
    def factory(out):
        def bwd():
            x.grad += out.grad / x.data
        return bwd
    return _unary(np.log(x.data), x, factory)


def softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Probability distribution over all entries of a vector-shaped tensor.

    Computed with max-subtraction for stability, so it is invariant to a
    constant shift of the logits. ``mask`` (boolean, True = keep) forces
    masked-out positions to exactly zero.
    """
    flat = logits.data.reshape(-1)
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        if keep.shape != flat.shape:
            raise ShapeError(f"mask length {keep.shape} vs logits {flat.shape}")
        if not keep.any():
            raise DegenerateDistributionError("softmax with all positions masked")
    else:
        keep = None
    if keep is None:
        shifted = flat - flat.max()
        e = np.exp(shifted)
        y = e / e.sum()
    else:
        y = np.zeros_like(flat)
        kept = flat[keep]
        e = np.exp(kept - kept.max())
        y[keep] = e / e.sum()
    y = y.reshape(logits.shape)

    def factory(out):
        def bwd():
            g = out.grad
            dot = (out.data * g).sum()
            logits.grad += out.data * (g - dot)
        return bwd
    return _unary(y, logits, factory)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; the subgradient routes to the smaller argument (ties to a)."""
    if a.shape != b.shape:
        raise ShapeError(f"minimum shapes differ: {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    out = _result(np.where(take_a, a.data, b.data))
    t = _current_tape()
    if t is not None and (a._in_graph or b._in_graph):
        def bwd():
            if a._in_graph:
                a.grad += np.where(take_a, out.grad, 0.0)
            if b._in_graph:
                b.grad += np.where(take_a, 0.0, out.grad)
        t.record(out, (a, b), bwd)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Vertical concatenation, e.g. [x ; h] feeding a GRU cell."""
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
    out = _result(np.concatenate([p.data for p in parts], axis=0))
    t = _current_tape()
    if t is not None and any(p._in_graph for p in parts):
        offsets = np.cumsum([0] + [p.shape[0] for p in parts])
        def bwd():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p._in_graph:
                    p.grad += out.grad[lo:hi]
        t.record(out, tuple(parts), bwd)
    return out


def hstack_cols(parts: Sequence[Tensor]) -> Tensor:
    """Horizontal concatenation, e.g. stacking per-step states into (d, T)."""
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError(f"hstack_cols row mismatch: {[p.shape for p in parts]}")
    out = _result(np.concatenate([p.data for p in parts], axis=1))
    t = _current_tape()
    if t is not None and any(p._in_graph for p in parts):
        offsets = np.cumsum([0] + [p.shape[1] for p in parts])
        def bwd():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p._in_graph:
                    p.grad += out.grad[:, lo:hi]
        t.record(out, tuple(parts), bwd)
    return out


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    if not (0 <= j0 < j1 <= x.shape[1]):
        raise ShapeError(f"slice [{j0}:{j1}] out of range for shape {x.shape}")
    def factory(out):
        def bwd():
            x.grad[:, j0:j1] += out.grad
        return bwd
    return _unary(x.data[:, j0:j1].copy(), x, factory)


def transpose(x: Tensor) -> Tensor:
    def factory(out):
        def bwd():
            x.grad += out.grad.T
        return bwd
    return _unary(x.data.T.copy(), x, factory)


def sum_all(x: Tensor) -> Tensor:
    def factory(out):
        def bwd():
            x.grad += out.grad[0, 0]
        return bwd
    return _unary(np.array([[x.data.sum()]]), x, factory)


def pick(x: Tensor, index: int) -> Tensor:
    """Select one entry of a vector-shaped tensor as a (1, 1) scalar."""
    flat = x.data.reshape(-1)
    if not (0 <= index < flat.size):
        raise ShapeError(f"pick index {index} out of range for shape {x.shape}")
    r, c = divmod(index, x.shape[1])
    def factory(out):
        def bwd():
            x.grad[r, c] += out.grad[0, 0]
        return bwd
    return _unary(np.array([[flat[index]]]), x, factory)


def embed_row(table: Tensor, index: int) -> Tensor:
    """Row ``index`` of a (V, e) table as an (e, 1) column."""
    if not (0 <= index < table.shape[0]):
        raise ShapeError(f"row {index} out of range for table {table.shape}")
    def factory(out):
        def bwd():
            table.grad[index] += out.grad[:, 0]
        return bwd
    return _unary(table.data[index].reshape(-1, 1).copy(), table, factory)


def pad_rows(x: Tensor, total_rows: int) -> Tensor:
    """Append zero rows to an (n, 1) column up to ``total_rows``."""
    n = x.shape[0]
    if total_rows < n:
        raise ShapeError(f"pad_rows target {total_rows} smaller than {n}")
    data = np.zeros((total_rows, x.shape[1]), dtype=x.data.dtype)
    data[:n] = x.data
    def factory(out):
        def bwd():
            x.grad += out.grad[:n]
        return bwd
    return _unary(data, x, factory)


def copy_distribution(attn: Tensor, target_ids: Sequence[int], size: int) -> Tensor:
    """Scatter-add an attention row onto extended-vocabulary ids.

    ``attn`` is (1, T); position j contributes its weight to row
    ``target_ids[j]`` of the (size, 1) output. Several positions may share
    a target id (repeated source tokens).
    """
    ids = np.asarray(target_ids, dtype=np.intp)
    if ids.shape[0] != attn.shape[1]:
        raise ShapeError(f"ids length {ids.shape[0]} vs attention {attn.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise ShapeError(f"extended id out of range [0, {size})")
    data = np.zeros((size, 1), dtype=attn.data.dtype)
    np.add.at(data[:, 0], ids, attn.data[0])
    def factory(out):
        def bwd():
            attn.grad[0] += out.grad[ids, 0]
        return bwd
    return _unary(data, attn, factory)


def assert_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    step: float = 1e-5,
    extended_precision: bool = True,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` evaluates the scalar function from the current values of
    ``leaves`` (which must be tracked). Error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    By default the leaves are temporarily widened to 80-bit floats so the
    whole evaluation runs in extended precision; without this, the
    cancellation noise of (f(x+h) - f(x-h)) for losses of magnitude ~1 is
    ~|f|*eps/h ~ 1e-11, which the 1e-8 denominator floor turns into a
    spurious ~1e-3 "error" on coordinates whose true gradient is tiny.
    """
    originals = [leaf.data for leaf in leaves]
    if extended_precision:
        for leaf in leaves:
            leaf.data = leaf.data.astype(np.longdouble)
    try:
        with Tape() as t:
            out = f()
            t.backward(out)
        # a leaf the function never touches has zero gradient
        analytic = [
            leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves
        ]

        def value() -> float:
            return f().data.reshape(-1)[0]  # native dtype, no float64 cast

        worst = 0.0
        for leaf, ana in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                up = value()
                flat[i] = keep - step
                down = value()
                flat[i] = keep
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NonFiniteError("non-finite evaluation during grad_check")
                numeric = (up - down) / (2.0 * step)
                a = ana_flat[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, float(err))
    finally:
        for leaf, orig in zip(leaves, originals):
            leaf.data = orig
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        learning_rate: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{key}'")
        if g.shape != params[key].data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} vs parameter '{key}' {params[key].data.shape}"
            )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate
    for key, g in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params[key].data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. ``max_norm <= 0`` disables clipping.
    """
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm
