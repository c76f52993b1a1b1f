"""Dense float64 matrix kernels and a minimal reverse-mode gradient tape.

Every numeric value in this package is a 2-D, row-major, float64 numpy
array ("matrix"); scalars are 1x1 matrices. The tape records a fixed set
of primitives, each with a hand-written backward rule, and supports one
backward pass per recording with additive gradient accumulation at
shared operands.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

Matrix = np.ndarray


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class PreconditionError(ValueError):
    """An operation's documented precondition was violated."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (e.g. a zero-norm row)."""


class NumericFailure(RuntimeError):
    """A non-finite value appeared where the contract forbids one."""


def as_matrix(x) -> Matrix:
    """Coerce to a 2-D float64 array. 1-D input becomes a single row."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


def assert_finite(m: Matrix, what: str = "matrix") -> Matrix:
    if not np.all(np.isfinite(m)):
        raise NumericFailure(f"non-finite entries in {what}")
    return m


def child_rng(seed: int, *key) -> np.random.Generator:
    """Deterministic child generator for (seed, key...).

    String key parts are hashed with crc32 so call sites can tag streams
    by purpose; the derivation is order-independent across call sites,
    which keeps consumers from perturbing each other's streams.
    """
    ints = tuple(
        zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in key
    )
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=ints))


def derive_seed(seed: int, *key) -> int:
    """Deterministic integer seed for (seed, key...), for APIs taking ints."""
    ints = tuple(
        zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in key
    )
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=ints)
    return int(ss.generate_state(2, dtype=np.uint64)[0])


@dataclass
class _Node:
    inputs: tuple[int, ...]
    backward: object  # callable(out_grad) -> tuple of input grads (or None)


class Var:
    """Handle to one tape node: a value and, after backward, its gradient."""

    __slots__ = ("tape", "index", "value", "requires_grad", "grad")

    def __init__(self, tape: "Tape", index: int, value: Matrix, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad
        self.grad: Matrix | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 value, got {self.shape}")
        return float(self.value[0, 0])

    # Operator sugar over the module-level primitives.
    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other) -> "Var":
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Var":
        return scale(self, float(other))


class Tape:
    """Append-only record of primitive applications, in topological order."""

    def __init__(self):
        self._vars: list[Var] = []
        self._nodes: list[_Node] = []
        self._backward_done = False

    def var(self, value, requires_grad: bool = True) -> Var:
        """Record a leaf (parameter or input)."""
        return self._record(as_matrix(value), (), None, requires_grad)

    def constant(self, value) -> Var:
        """Record a leaf whose gradient is never needed."""
        return self.var(value, requires_grad=False)

    def _record(self, value: Matrix, inputs: tuple[Var, ...], backward, requires_grad=None) -> Var:
        if self._backward_done:
            raise RuntimeError("tape already consumed by backward(); start a new tape")
        if requires_grad is None:
            requires_grad = any(v.requires_grad for v in inputs)
        idx = len(self._vars)
        var = Var(self, idx, value, requires_grad)
        self._vars.append(var)
        self._nodes.append(_Node(tuple(v.index for v in inputs), backward))
        return var

    def backward(self, out: Var) -> None:
        """Accumulate d(out)/d(leaf) into each leaf's .grad. One shot per tape."""
        if out.tape is not self:
            raise ValueError("output Var belongs to a different tape")
        if self._backward_done:
            raise RuntimeError("backward() may run only once per recording")
        self._backward_done = True
        grads: dict[int, Matrix] = {out.index: np.ones_like(out.value)}
        for idx in range(out.index, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            var = self._vars[idx]
            if not var.requires_grad:
                continue
            node = self._nodes[idx]
            if node.backward is None:
                var.grad = g if var.grad is None else var.grad + g
                continue
            input_grads = node.backward(g)
            for in_idx, ig in zip(node.inputs, input_grads):
                if ig is None or not self._vars[in_idx].requires_grad:
                    continue
                if in_idx in grads:
                    grads[in_idx] = grads[in_idx] + ig
                else:
                    grads[in_idx] = ig


def _same_tape(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


# ---------------------------------------------------------------------------
# Primitives. Each forward saves exactly what its backward needs.
# ---------------------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul shapes {a.value.shape} x {b.value.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return tape._record(av @ bv, (a, b), backward)


def _require_same_shape(a: Var, b: Var, op: str):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op} shapes {a.value.shape} vs {b.value.shape}")


def add(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    _require_same_shape(a, b, "add")
    return tape._record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    _require_same_shape(a, b, "sub")
    return tape._record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    _require_same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return tape._record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def transpose(a: Var) -> Var:
    return a.tape._record(np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,))


def relu(a: Var) -> Var:
    mask = a.value > 0.0
    return a.tape._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def log(a: Var) -> Var:
    if np.any(a.value <= 0.0):
        raise PreconditionError("log requires strictly positive entries")
    av = a.value
    return a.tape._record(np.log(av), (a,), lambda g: (g / av,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._record(out, (a,), lambda g: (g * out,))


def sqrt(a: Var) -> Var:
    if np.any(a.value < 0.0):
        raise PreconditionError("sqrt requires nonnegative entries")
    out = np.sqrt(a.value)

    def backward(g):
        return (g * 0.5 / np.maximum(out, 1e-300),)

    return a.tape._record(out, (a,), backward)


def recip(a: Var) -> Var:
    if np.any(a.value == 0.0):
        raise PreconditionError("recip requires nonzero entries")
    out = 1.0 / a.value
    return a.tape._record(out, (a,), lambda g: (-g * out * out,))


def reduce(a: Var, kind: str, axis: str) -> Var:
    """Sum or mean over rows, cols, or all entries.

    axis="rows" collapses the row index (result 1 x cols);
    axis="cols" collapses the column index (result rows x 1);
    axis="all" yields a 1x1 matrix.
    """
    if kind not in ("sum", "mean"):
        raise PreconditionError(f"unknown reduce kind {kind!r}")
    if axis not in ("rows", "cols", "all"):
        raise PreconditionError(f"unknown reduce axis {axis!r}")
    n, m = a.value.shape
    if axis == "rows":
        out = a.value.sum(axis=0, keepdims=True)
        count = n
        expand = lambda g: np.repeat(g, n, axis=0)
    elif axis == "cols":
        out = a.value.sum(axis=1, keepdims=True)
        count = m
        expand = lambda g: np.repeat(g, m, axis=1)
    else:
        out = a.value.sum().reshape(1, 1)
        count = n * m
        expand = lambda g: np.full((n, m), g[0, 0])
    if kind == "mean":
        out = out / count
        backward = lambda g: (expand(g) / count,)
    else:
        backward = lambda g: (expand(g),)
    return a.tape._record(out, (a,), backward)


def reduce_sum(a: Var, axis: str = "all") -> Var:
    return reduce(a, "sum", axis)


def reduce_mean(a: Var, axis: str = "all") -> Var:
    return reduce(a, "mean", axis)


def row_softmax(a: Var) -> Var:
    if a.value.size == 0:
        raise PreconditionError("row_softmax needs a nonempty matrix")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return a.tape._record(out, (a,), backward)


def batch_standardize(z: Var) -> Var:
    """Per-column standardization over the row (batch) axis.

    Population (divisor N) standard deviation; 1e-12 is added to the std
    before dividing, so constant columns map to zeros.
    """
    n = z.value.shape[0]
    if n < 2:
        raise PreconditionError(f"batch_standardize needs at least 2 rows, got {n}")
    eps = 1e-12
    mu = z.value.mean(axis=0, keepdims=True)
    centered = z.value - mu
    std = np.sqrt((centered * centered).mean(axis=0, keepdims=True))
    denom = std + eps
    out = centered / denom

    def backward(g):
        g_mean = g.mean(axis=0, keepdims=True)
        proj = (g * centered).mean(axis=0, keepdims=True)
        inv_std = np.where(std > 0.0, 1.0 / np.maximum(std, 1e-300), 0.0)
        return ((g - g_mean) / denom - centered * proj * inv_std / (denom * denom),)

    return z.tape._record(out, (z,), backward)


def row_gather(a: Var, indices) -> Var:
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size == 0:
        raise PreconditionError("row_gather needs at least one index")
    if idx.min() < 0 or idx.max() >= a.value.shape[0]:
        raise PreconditionError(
            f"row index out of range [0, {a.value.shape[0]}): {idx.tolist()}"
        )
    shape = a.value.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._record(a.value[idx].copy(), (a,), backward)


def reshape(a: Var, rows: int, cols: int) -> Var:
    if rows * cols != a.value.size:
        raise DimensionError(f"cannot reshape {a.value.shape} to ({rows}, {cols})")
    shape = a.value.shape
    return a.tape._record(
        a.value.reshape(rows, cols).copy(), (a,), lambda g: (g.reshape(shape),)
    )


def vstack(parts: list[Var]) -> Var:
    if not parts:
        raise PreconditionError("vstack needs at least one part")
    tape = _same_tape(*parts)
    cols = parts[0].value.shape[1]
    for p in parts:
        if p.value.shape[1] != cols:
            raise DimensionError("vstack parts must share a column count")
    splits = np.cumsum([p.value.shape[0] for p in parts])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=0))

    return tape._record(np.vstack([p.value for p in parts]), tuple(parts), backward)


def cross_entropy_rows(logits: Var, target_ids) -> Var:
    """Per-row cross entropy from logits, numerically stabilized.

    Returns an (n x 1) column: row r holds logsumexp(logits[r]) - logits[r, t_r].
    """
    targets = np.asarray(target_ids, dtype=np.intp).ravel()
    n, v = logits.value.shape
    if targets.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise PreconditionError(f"target id out of range [0, {v})")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    softmax = e / e.sum(axis=1, keepdims=True)
    lse = np.log(e.sum(axis=1, keepdims=True)) + logits.value.max(axis=1, keepdims=True)
    out = lse - logits.value[np.arange(n), targets].reshape(n, 1)

    def backward(g):
        grad = softmax * g
        grad[np.arange(n), targets] -= g[:, 0]
        return (grad,)

    return logits.tape._record(out, (logits,), backward)


def absolute(a: Var) -> Var:
    """|a| composed from relu, so the tape's primitive set stays closed."""
    return add(relu(a), relu(scale(a, -1.0)))


# ---------------------------------------------------------------------------
# Finite differences (shared by tests and the selftest command).
# ---------------------------------------------------------------------------


def fd_gradient(f, arrays: list[Matrix], h: float = 1e-5) -> list[Matrix]:
    """Central finite-difference gradient of scalar f(list of matrices)."""
    grads = []
    work = [a.copy() for a in arrays]
    for k, a in enumerate(work):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work)
            flat[i] = orig - h
            fm = f(work)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def fd_directional(f, arrays: list[Matrix], direction: list[Matrix], h: float = 1e-5) -> float:
    """Central finite-difference directional derivative of scalar f."""
    plus = [a + h * d for a, d in zip(arrays, direction)]
    minus = [a - h * d for a, d in zip(arrays, direction)]
    return (f(plus) - f(minus)) / (2.0 * h)


def rel_error(a: Matrix, b: Matrix) -> float:
    """Relative error between two gradient stacks, guarded near zero."""
    num = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    den = max(float(np.linalg.norm(np.asarray(b))), 1e-12)
    return num / den
