"""Scalar reverse-mode autodiff on an explicit tape.

Every loss in this package is a scalar built from a fixed set of elementary
operations (add, sub, mul, div, neg, exp, log, tanh, softplus, square,
constants, parameter reads). Tapes are rebuilt per batch (define-by-run);
the forward and backward sweeps run over flat arrays so they can be
compiled with numba when available.

Stop-gradient is realized by inserting a constant node holding the current
numeric value (see :meth:`Tape.const`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# Op codes. Binary ops read (i0, i1); unary ops read i0; OP_CONST stores its
# value in aux; OP_PARAM stores the parameter index in i0.
OP_CONST = 0
OP_PARAM = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_NEG = 6
OP_EXP = 7
OP_LOG = 8
OP_TANH = 9
OP_SOFTPLUS = 10
OP_SQUARE = 11

_OP_NAMES = {
    OP_CONST: "const",
    OP_PARAM: "param",
    OP_ADD: "add",
    OP_SUB: "sub",
    OP_MUL: "mul",
    OP_DIV: "div",
    OP_NEG: "neg",
    OP_EXP: "exp",
    OP_LOG: "log",
    OP_TANH: "tanh",
    OP_SOFTPLUS: "softplus",
    OP_SQUARE: "square",
}


class EvaluationError(RuntimeError):
    """A tape evaluation produced a non-finite intermediate value."""


class LayoutError(KeyError):
    """Unknown parameter name in a ParamStore lookup."""


class ParamStore:
    """Flat parameter vector with named, disjoint slices.

    Slices are allocated in registration order and cover the vector exactly.
    """

    def __init__(self) -> None:
        self._values = np.zeros(0, dtype=np.float64)
        self._layout: dict[str, tuple[int, int]] = {}

    @property
    def values(self) -> np.ndarray:
        return self._values

    @values.setter
    def values(self, new: np.ndarray) -> None:
        new = np.asarray(new, dtype=np.float64)
        if new.shape != self._values.shape:
            raise ValueError(
                f"shape mismatch: store has {self._values.shape}, got {new.shape}"
            )
        self._values = new.copy()

    @property
    def size(self) -> int:
        return self._values.size

    @property
    def layout(self) -> dict[str, tuple[int, int]]:
        return dict(self._layout)

    def add(self, name: str, init: np.ndarray | float) -> tuple[int, int]:
        """Register a named slice initialized with `init`; returns (offset, length)."""
        if name in self._layout:
            raise ValueError(f"duplicate parameter name {name!r}")
        init = np.atleast_1d(np.asarray(init, dtype=np.float64)).ravel()
        offset = self._values.size
        self._values = np.concatenate([self._values, init])
        self._layout[name] = (offset, init.size)
        return offset, init.size

    def slice_of(self, name: str) -> tuple[int, int]:
        try:
            return self._layout[name]
        except KeyError:
            raise LayoutError(f"unknown parameter name {name!r}") from None

    def get(self, name: str) -> np.ndarray:
        offset, length = self.slice_of(name)
        return self._values[offset : offset + length]

    def set(self, name: str, value: np.ndarray | float) -> None:
        offset, length = self.slice_of(name)
        value = np.atleast_1d(np.asarray(value, dtype=np.float64)).ravel()
        if value.size != length:
            raise ValueError(f"slice {name!r} has length {length}, got {value.size}")
        self._values[offset : offset + length] = value

    def index_of(self, name: str, i: int = 0) -> int:
        """Global index of element `i` of slice `name`."""
        offset, length = self.slice_of(name)
        if not 0 <= i < length:
            raise IndexError(f"index {i} out of range for slice {name!r} ({length})")
        return offset + i

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other._values = self._values.copy()
        other._layout = dict(self._layout)
        return other


class Tape:
    """Topologically ordered node list with exactly one scalar output.

    Node handles are plain ints. The output is the last node appended unless
    :meth:`mark_output` is called.
    """

    def __init__(self, capacity: int = 1024) -> None:
        self._kind = np.empty(capacity, dtype=np.int8)
        self._i0 = np.empty(capacity, dtype=np.int64)
        self._i1 = np.empty(capacity, dtype=np.int64)
        self._aux = np.empty(capacity, dtype=np.float64)
        self._n = 0
        self._output: int | None = None

    def __len__(self) -> int:
        return self._n

    @property
    def output(self) -> int:
        if self._output is not None:
            return self._output
        if self._n == 0:
            raise ValueError("empty tape has no output")
        return self._n - 1

    def mark_output(self, node: int) -> None:
        if not 0 <= node < self._n:
            raise IndexError(f"node {node} not on tape")
        self._output = node

    def _reserve(self, extra: int) -> None:
        need = self._n + extra
        cap = self._kind.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_kind", "_i0", "_i1", "_aux"):
            old = getattr(self, name)
            new = np.empty(cap, dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def _emit(self, kind: int, i0: int = 0, i1: int = 0, aux: float = 0.0) -> int:
        n = self._n
        if n >= self._kind.shape[0]:
            self._reserve(1)
        self._kind[n] = kind
        self._i0[n] = i0
        self._i1[n] = i1
        self._aux[n] = aux
        self._n = n + 1
        return n

    def extend_block(self, kind: np.ndarray, i0: np.ndarray, i1: np.ndarray,
                     aux: np.ndarray) -> int:
        """Append a pre-assembled node block; indices must already be absolute.
        Returns the base index of the block."""
        m = kind.shape[0]
        self._reserve(m)
        n = self._n
        self._kind[n : n + m] = kind
        self._i0[n : n + m] = i0
        self._i1[n : n + m] = i1
        self._aux[n : n + m] = aux
        self._n = n + m
        return n

    # --- node constructors -------------------------------------------------

    def const(self, value: float) -> int:
        return self._emit(OP_CONST, aux=float(value))

    # alias making stop-gradient insertion points explicit at call sites
    sg = const

    def param(self, index: int) -> int:
        return self._emit(OP_PARAM, i0=int(index))

    def add(self, a: int, b: int) -> int:
        return self._emit(OP_ADD, a, b)

    def sub(self, a: int, b: int) -> int:
        return self._emit(OP_SUB, a, b)

    def mul(self, a: int, b: int) -> int:
        return self._emit(OP_MUL, a, b)

    def div(self, a: int, b: int) -> int:
        return self._emit(OP_DIV, a, b)

    def neg(self, a: int) -> int:
        return self._emit(OP_NEG, a)

    def exp(self, a: int) -> int:
        return self._emit(OP_EXP, a)

    def log(self, a: int) -> int:
        return self._emit(OP_LOG, a)

    def tanh(self, a: int) -> int:
        return self._emit(OP_TANH, a)

    def softplus(self, a: int) -> int:
        return self._emit(OP_SOFTPLUS, a)

    def square(self, a: int) -> int:
        return self._emit(OP_SQUARE, a)

    def sum_nodes(self, nodes: list[int]) -> int:
        """Left-to-right sum; deterministic reduction order."""
        if not nodes:
            return self.const(0.0)
        acc = nodes[0]
        emit = self._emit
        for n in nodes[1:]:
            acc = emit(OP_ADD, acc, n)
        return acc

    def affine(self, param_indices, features, bias_index: int | None = None) -> int:
        """sum_i params[param_indices[i]] * features[i] (+ params[bias_index]).

        Features are numeric constants. Emits only elementary nodes; exists to
        keep network construction loops tight.
        """
        emit = self._emit
        acc = -1
        for pidx, f in zip(param_indices, features):
            p = emit(OP_PARAM, int(pidx))
            c = emit(OP_CONST, aux=float(f))
            term = emit(OP_MUL, p, c)
            acc = term if acc < 0 else emit(OP_ADD, acc, term)
        if acc < 0:
            acc = self.const(0.0)
        if bias_index is not None:
            p = self._emit(OP_PARAM, i0=int(bias_index))
            acc = self._emit(OP_ADD, acc, p)
        return acc

    # --- execution ---------------------------------------------------------

    def _arrays(self):
        n = self._n
        return (
            self._kind[:n],
            self._i0[:n],
            self._i1[:n],
            self._aux[:n],
        )

    def param_indices(self) -> np.ndarray:
        """Global parameter indices read anywhere on the tape (unique, sorted)."""
        kind, i0, _, _ = self._arrays()
        return np.unique(i0[kind == OP_PARAM])


@njit(cache=True)
def _forward_kernel(kind, i0, i1, aux, pvals, vals):  # pragma: no cover - compiled
    n = kind.shape[0]
    for j in range(n):
        k = kind[j]
        if k == OP_CONST:
            v = aux[j]
        elif k == OP_PARAM:
            v = pvals[i0[j]]
        elif k == OP_ADD:
            v = vals[i0[j]] + vals[i1[j]]
        elif k == OP_SUB:
            v = vals[i0[j]] - vals[i1[j]]
        elif k == OP_MUL:
            v = vals[i0[j]] * vals[i1[j]]
        elif k == OP_DIV:
            v = vals[i0[j]] / vals[i1[j]]
        elif k == OP_NEG:
            v = -vals[i0[j]]
        elif k == OP_EXP:
            v = np.exp(vals[i0[j]])
        elif k == OP_LOG:
            v = np.log(vals[i0[j]])
        elif k == OP_TANH:
            v = np.tanh(vals[i0[j]])
        elif k == OP_SOFTPLUS:
            x = vals[i0[j]]
            if x > 30.0:
                v = x
            else:
                v = np.log1p(np.exp(x))
        else:  # OP_SQUARE
            x = vals[i0[j]]
            v = x * x
        vals[j] = v
        if not np.isfinite(v):
            return j
    return -1


@njit(cache=True)
def _backward_kernel(kind, i0, i1, aux, vals, adj, grad, out):  # pragma: no cover
    adj[out] = 1.0
    for j in range(out, -1, -1):
        a = adj[j]
        if a == 0.0:
            continue
        k = kind[j]
        if k == OP_CONST:
            continue
        elif k == OP_PARAM:
            grad[i0[j]] += a
        elif k == OP_ADD:
            adj[i0[j]] += a
            adj[i1[j]] += a
        elif k == OP_SUB:
            adj[i0[j]] += a
            adj[i1[j]] -= a
        elif k == OP_MUL:
            adj[i0[j]] += a * vals[i1[j]]
            adj[i1[j]] += a * vals[i0[j]]
        elif k == OP_DIV:
            adj[i0[j]] += a / vals[i1[j]]
            adj[i1[j]] -= a * vals[j] / vals[i1[j]]
        elif k == OP_NEG:
            adj[i0[j]] -= a
        elif k == OP_EXP:
            adj[i0[j]] += a * vals[j]
        elif k == OP_LOG:
            adj[i0[j]] += a / vals[i0[j]]
        elif k == OP_TANH:
            adj[i0[j]] += a * (1.0 - vals[j] * vals[j])
        elif k == OP_SOFTPLUS:
            adj[i0[j]] += a / (1.0 + np.exp(-vals[i0[j]]))
        else:  # OP_SQUARE
            adj[i0[j]] += a * 2.0 * vals[i0[j]]


def _run_forward(tape: Tape, params: ParamStore) -> np.ndarray:
    kind, i0, i1, aux = tape._arrays()
    vals = np.empty(kind.shape[0], dtype=np.float64)
    bad = _forward_kernel(kind, i0, i1, aux, params.values, vals)
    if bad >= 0:
        raise EvaluationError(
            f"non-finite value at node {bad} (op {_OP_NAMES[int(kind[bad])]})"
        )
    return vals


def evaluate(tape: Tape, params: ParamStore) -> float:
    """Run the forward sweep and return the scalar output."""
    vals = _run_forward(tape, params)
    return float(vals[tape.output])


def gradient(tape: Tape, params: ParamStore) -> np.ndarray:
    """Exact reverse-mode gradient of the tape output w.r.t. every parameter.

    Parameters not read by the tape get exactly 0.
    """
    kind, i0, i1, aux = tape._arrays()
    vals = _run_forward(tape, params)
    adj = np.zeros(kind.shape[0], dtype=np.float64)
    grad = np.zeros(params.size, dtype=np.float64)
    _backward_kernel(kind, i0, i1, aux, vals, adj, grad, tape.output)
    return grad


def value_and_gradient(tape: Tape, params: ParamStore) -> tuple[float, np.ndarray]:
    kind, i0, i1, aux = tape._arrays()
    vals = _run_forward(tape, params)
    adj = np.zeros(kind.shape[0], dtype=np.float64)
    grad = np.zeros(params.size, dtype=np.float64)
    _backward_kernel(kind, i0, i1, aux, vals, adj, grad, tape.output)
    return float(vals[tape.output]), grad


def check_gradient(tape: Tape, params: ParamStore, epsilon: float) -> float:
    """Max relative error between reverse-mode and central finite differences.

    Only parameters read by the tape are perturbed (all others provably have
    zero gradient, asserted here). Relative error is scaled by
    max(|ad|, |fd|, 1).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    ad = gradient(tape, params)
    on_tape = tape.param_indices()
    off_tape = np.setdiff1d(np.arange(params.size), on_tape)
    if off_tape.size and np.any(ad[off_tape] != 0.0):
        raise AssertionError("nonzero gradient for parameter absent from tape")
    work = params.copy()
    max_err = 0.0
    for idx in on_tape:
        base = work.values[idx]
        work.values[idx] = base + epsilon
        fp = evaluate(tape, work)
        work.values[idx] = base - epsilon
        fm = evaluate(tape, work)
        work.values[idx] = base
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite perturbation result at parameter {idx}")
        fd = (fp - fm) / (2.0 * epsilon)
        scale = max(abs(ad[idx]), abs(fd), 1.0)
        max_err = max(max_err, abs(ad[idx] - fd) / scale)
    return max_err


@dataclass
class BatchLoss:
    """Scalar loss with its gradient over a ParamStore."""

    value: float
    gradient: np.ndarray
    per_trajectory_residuals: np.ndarray | None = field(default=None)
