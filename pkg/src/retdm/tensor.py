"""Dense float64 tensors with a reverse-mode tape, plus SGD-with-momentum.

Design points:
  * every value is float64 and must stay finite; a NaN/Inf raises immediately
    instead of propagating silently,
  * the tape is an explicit, append-only record of primitive applications;
    forward evaluation order is already topological, so backward() is a single
    reverse sweep with no sorting,
  * gradients accumulate into ``.grad`` until explicitly cleared, which is what
    a multi-term objective needs.

Tapes are tracked per thread: independent graphs on different threads never
see each other.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

# Stabilizer inside the square root of euclid(); keeps the gradient defined
# when two embeddings coincide.
EUCLID_EPS = 1e-12

# Sigmoid outputs are clamped into the open interval (0, 1); float64 rounds
# sigmoid(x) to exactly 1.0 for x > ~37, which would break log(1 - s).
_SIGMOID_LO = 1e-15
_SIGMOID_HI = 1.0 - 1e-15


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A value left the finite range (NaN or Inf)."""


class ContractError(RuntimeError):
    """An operation was invoked outside its stated preconditions."""


_STACK = threading.local()


def _tape_stack():
    stack = getattr(_STACK, "tapes", None)
    if stack is None:
        stack = []
        _STACK.tapes = stack
    return stack


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array plus the bookkeeping backward() needs."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Light operator sugar; scalars mean Python floats, not 0-d tensors.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, float(other))

    def __radd__(self, other):
        return add_const(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -float(other))

    def __rsub__(self, other):
        return rsub_const(float(other), self)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a Python scalar, not a Tensor")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


@dataclass
class Record:
    """One primitive application: kind, inputs, output, and its pullback."""

    op: str
    inputs: tuple
    output: Tensor
    backward: object  # callable(out_grad: ndarray) -> tuple[ndarray | None, ...]


class Tape:
    """Append-only record of primitive applications.

    Use as a context manager around a forward pass; backward() replays the
    records once, in reverse order.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor):
        if loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data):
            raise NonFiniteError("loss is non-finite")
        adjoints = {id(loss): np.asarray(1.0)}
        holders = {id(loss): loss}
        for rec in reversed(self.records):
            out_grad = adjoints.pop(id(rec.output), None)
            holders.pop(id(rec.output), None)
            if out_grad is None:
                continue
            _deposit(rec.output, out_grad)
            in_grads = rec.backward(out_grad)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                prev = adjoints.get(id(t))
                # never mutate a stored array in place: pullbacks may alias
                adjoints[id(t)] = g if prev is None else prev + g
                holders[id(t)] = t
        for tid, g in adjoints.items():
            _deposit(holders[tid], g)


def _deposit(t: Tensor, g):
    if not t.requires_grad:
        return
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor the loss depends on.

    Repeated calls accumulate. A constant loss (no recorded dependencies) is a
    no-op: nothing depends on parameters, so every gradient is zero.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        return
    loss.tape.backward(loss)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitive application
# ---------------------------------------------------------------------------

def _apply(op, inputs, out_data, backward_fn) -> Tensor:
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = object.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out.tape = None
    if out.requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.records.append(Record(op, tuple(inputs), out, backward_fn))
            out.tape = tape
    return out


def _reduce_to(g, shape):
    # only 0-d operands broadcast; collapse their gradient back
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def _check_elementwise(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)
    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)
    return _apply("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)
    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)
    return _apply("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)
    def bwd(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)
    return _apply("mul", (a, b), a.data * b.data, bwd)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("scale", (a,), a.data * c, lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return _apply("add_const", (a,), a.data + float(c), lambda g: (g,))


def rsub_const(c: float, a: Tensor) -> Tensor:
    return _apply("rsub_const", (a,), float(c) - a.data, lambda g: (-g,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Sum of the elementwise product (any rank, shapes must match)."""
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} do not match")
    def bwd(g):
        return g * b.data, g * a.data
    return _apply("dot", (a, b), np.asarray((a.data * b.data).sum()), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x [n,p], w [p,q], b [q]."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(
            f"affine: expected x [n,p], w [p,q], b [q]; got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(
            f"affine: inner dimensions disagree for x {x.shape}, w {w.shape}, b {b.shape}"
        )
    def bwd(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)
    return _apply("affine", (x, w, b), x.data @ w.data + b.data, bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _apply("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)
    return _apply("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu or sigmoid."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NonFiniteError("log of a non-positive value")
    return _apply("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _apply("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise NonFiniteError("sqrt of a negative value")
    root = np.sqrt(x.data)
    return _apply("sqrt", (x,), root, lambda g: (g / (2.0 * root),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    def bwd(g):
        return (np.full(x.shape, float(g)),)
    return _apply("sum", (x,), np.asarray(x.data.sum()), bwd)


def mean(x: Tensor) -> Tensor:
    n = x.size
    def bwd(g):
        return (np.full(x.shape, float(g) / n),)
    return _apply("mean", (x,), np.asarray(x.data.mean()), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _apply("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def row(m: Tensor, i: int) -> Tensor:
    """Extract row i of a matrix as a vector."""
    if m.ndim != 2:
        raise ShapeError(f"row: expected a matrix, got shape {m.shape}")
    def bwd(g):
        full = np.zeros(m.shape)
        full[i] = g
        return (full,)
    return _apply("row", (m,), np.array(m.data[i]), bwd)


def stack(tensors) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes {shape} and {t.shape} do not match")
    def bwd(g):
        return tuple(g[i] for i in range(len(tensors)))
    return _apply("stack", tuple(tensors), np.stack([t.data for t in tensors]), bwd)


def concat(parts) -> Tensor:
    """Concatenate scalars and 1-D tensors into one vector."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of an empty sequence")
    arrays, lengths = [], []
    for t in parts:
        if t.ndim > 1:
            raise ShapeError(f"concat: expected scalars or vectors, got shape {t.shape}")
        a = np.atleast_1d(t.data)
        arrays.append(a)
        lengths.append(a.shape[0])
    offsets = np.cumsum([0] + lengths)
    def bwd(g):
        outs = []
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            piece = g[lo:hi]
            outs.append(np.asarray(piece[0]) if t.ndim == 0 else piece)
        return tuple(outs)
    return _apply("concat", tuple(parts), np.concatenate(arrays), bwd)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over a vector, max-shifted for stability."""
    if x.ndim != 1 or x.size == 0:
        raise ShapeError(f"logsumexp: expected a non-empty vector, got shape {x.shape}")
    m = x.data.max()
    out = m + np.log(np.exp(x.data - m).sum())
    def bwd(g):
        return (g * np.exp(x.data - out),)
    return _apply("logsumexp", (x,), np.asarray(out), bwd)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def sqdist(u: Tensor, v: Tensor) -> Tensor:
    """Squared Euclidean distance between two vectors."""
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"sqdist: vector shapes {u.shape} and {v.shape} do not match")
    diff = u.data - v.data
    def bwd(g):
        gu = 2.0 * float(g) * diff
        return gu, -gu
    return _apply("sqdist", (u, v), np.asarray((diff * diff).sum()), bwd)


def sqdist_rows(m: Tensor, v: Tensor) -> Tensor:
    """Squared Euclidean distance from each row of m to the vector v."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"sqdist_rows: shapes {m.shape} and {v.shape} do not match")
    diff = m.data - v.data
    def bwd(g):
        gm = 2.0 * g[:, None] * diff
        return gm, -gm.sum(axis=0)
    return _apply("sqdist_rows", (m, v), (diff * diff).sum(axis=1), bwd)


def euclid(u: Tensor, v: Tensor) -> Tensor:
    """Euclidean distance, differentiable everywhere via the EUCLID_EPS stabilizer."""
    return sqrt(add_const(sqdist(u, v), EUCLID_EPS))


def euclid_rows(m: Tensor, v: Tensor) -> Tensor:
    """Euclidean distance from each row of m to v, stabilized like euclid()."""
    return sqrt(add_const(sqdist_rows(m, v), EUCLID_EPS))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class SgdState:
    """Heavy-ball SGD state; velocity buffers mirror parameter shapes."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")


def sgd_step(params: dict, grads: dict, state: SgdState):
    """v <- mu*v + (g + wd*p); p <- p - lr*v, for every named parameter.

    Parameters are updated in place (their .data is rebound); missing or
    misshaped gradients raise naming the offending parameter.
    """
    if state.learning_rate <= 0:
        raise ContractError("learning_rate must be positive at every step")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for parameter {name!r}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + (g + state.weight_decay * p.data)
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v
    return params, state


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(fn, params: dict, step: float = 1e-5, samples=None, rng=None) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` rebuilds a scalar loss from the current parameter values. When
    ``samples`` is given, that many coordinates are drawn (without
    replacement, across all listed parameters) with ``rng``; otherwise every
    coordinate is probed.
    """
    for p in params.values():
        p.grad = None
    with Tape():
        loss = fn()
    if loss.ndim != 0:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(loss)

    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    if samples is not None and samples < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        picks = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    for name, i in coords:
        p = params[name]
        flat = p.data.reshape(-1)
        saved = flat[i]
        flat[i] = saved + step
        hi = fn().item()
        flat[i] = saved - step
        lo = fn().item()
        flat[i] = saved
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"finite-difference probe at {name}[{i}] is non-finite")
        numeric = (hi - lo) / (2.0 * step)
        analytic = float(p.grad.reshape(-1)[i]) if p.grad is not None else 0.0
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
