"""Reverse-mode automatic differentiation over dense float64 arrays.

Single-tape design: any primitive applied to a tensor that requires
gradients appends a record to a thread-local tape; ``backward`` walks the
tape once in reverse, accumulates gradients additively across fan-out, and
clears the tape.  Everything is float64 and deterministic; identical inputs
give bit-identical outputs.

Shapes are 0-d scalars, 1-d vectors, or 2-d matrices.  There is no
broadcasting beyond the few documented cases (``add_bias``), and no
higher-order tape-of-tape differentiation; second-order quantities are
obtained by finite differences of gradients elsewhere in the package.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

COSINE_GUARD = 1e-12


class NumericError(RuntimeError):
    """A computation produced or received non-finite values."""


class Tensor:
    """Dense float64 array with an optional gradient.

    ``grad`` is populated by ``backward`` for every tensor that participated
    in the tape, and accumulates additively when a tensor fans out into
    several downstream operations.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor; non-finite input is rejected."""
    t = Tensor(values, requires_grad)
    if not np.all(np.isfinite(t.values)):
        raise NumericError("leaf tensor contains non-finite values")
    return t


def constant(values) -> Tensor:
    return tensor(values, requires_grad=False)


class TapeRecord:
    """One primitive application: output, inputs, and the pullback closure."""

    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op: str, output: Tensor, inputs: tuple[Tensor, ...],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record list; topological by construction (inputs precede outputs)."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __len__(self) -> int:
        return len(self.records)


_LOCAL = threading.local()


def current_tape() -> Tape:
    tape = getattr(_LOCAL, "tape", None)
    if tape is None:
        tape = Tape()
        _LOCAL.tape = tape
    return tape


def reset_tape() -> None:
    _LOCAL.tape = Tape()


def _finite(op: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{op}: non-finite input")


def _emit(op: str, out_values: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_values)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().records.append(TapeRecord(op, out, tuple(inputs), backward_fn))
    return out


def _need_shape(op: str, t: Tensor, ndim: int) -> None:
    if t.values.ndim != ndim:
        raise ValueError(f"{op}: expected {ndim}-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _finite("add", a.values, b.values)
    return _emit("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    _finite("sub", a.values, b.values)
    return _emit("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: (n, m) + (m,) -> (n, m)."""
    _need_shape("add_bias", a, 2)
    _need_shape("add_bias", b, 1)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias: shape mismatch {a.shape} vs {b.shape}")
    _finite("add_bias", a.values, b.values)
    return _emit("add_bias", a.values + b.values[None, :], (a, b),
                 lambda g: (g, g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    _finite("mul", a.values, b.values)
    av, bv = a.values, b.values
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("scale: non-finite constant")
    _finite("scale", a.values)
    return _emit("scale", a.values * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("add_const: non-finite constant")
    _finite("add_const", a.values)
    return _emit("add_const", a.values + c, (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_shape("matmul", a, 2)
    _need_shape("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _finite("matmul", a.values, b.values)
    av, bv = a.values, b.values
    return _emit("matmul", av @ bv, (a, b),
                 lambda g: (g @ bv.T, av.T @ g))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 fixed to 0
    _finite("relu", a.values)
    mask = a.values > 0
    return _emit("relu", np.where(mask, a.values, 0.0), (a,),
                 lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    _finite("exp", a.values)
    out = np.exp(a.values)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp: overflow")
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _finite("log", a.values)
    if np.any(a.values <= 0):
        raise NumericError("log: domain requires strictly positive values")
    av = a.values
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - numpy-style name, shadows builtins.sum
    _finite("sum", a.values)
    shape = a.shape
    return _emit("sum", np.asarray(np.sum(a.values)), (a,),
                 lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over all elements (axis=None, scalar) or over rows (axis=0, (1, m))."""
    _finite("mean", a.values)
    if axis is None:
        n = a.values.size
        if n == 0:
            raise ValueError("mean: empty tensor")
        shape = a.shape
        return _emit("mean", np.asarray(np.mean(a.values)), (a,),
                     lambda g: (np.full(shape, float(g) / n),))
    if axis != 0:
        raise ValueError("mean: only axis=None or axis=0 supported")
    _need_shape("mean", a, 2)
    n = a.shape[0]
    return _emit("mean", np.mean(a.values, axis=0, keepdims=True), (a,),
                 lambda g: (np.repeat(g / n, n, axis=0),))


def variance(a: Tensor) -> Tensor:
    """Population variance (divide by element count) over all elements."""
    _finite("variance", a.values)
    n = a.values.size
    if n == 0:
        raise ValueError("variance: empty tensor")
    centered = a.values - np.mean(a.values)
    return _emit("variance", np.asarray(np.mean(centered ** 2)), (a,),
                 lambda g: (float(g) * 2.0 * centered / n,))


def row_softmax(a: Tensor) -> Tensor:
    _need_shape("row_softmax", a, 2)
    _finite("row_softmax", a.values)
    shifted = a.values - np.max(a.values, axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=1, keepdims=True)
    return _emit("row_softmax", p, (a,),
                 lambda g: (p * (g - np.sum(g * p, axis=1, keepdims=True)),))


def row_log_softmax(a: Tensor) -> Tensor:
    _need_shape("row_log_softmax", a, 2)
    _finite("row_log_softmax", a.values)
    shifted = a.values - np.max(a.values, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _emit("row_log_softmax", out, (a,),
                 lambda g: (g - p * np.sum(g, axis=1, keepdims=True),))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity of rows: (p, d) x (q, d) -> (p, q).

    The denominator is guarded by max(|u||v|, COSINE_GUARD); where the guard
    is active its value is treated as a constant by the gradient.
    """
    _need_shape("cosine", a, 2)
    _need_shape("cosine", b, 2)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine: feature dims differ, {a.shape} vs {b.shape}")
    _finite("cosine", a.values, b.values)
    av, bv = a.values, b.values
    na = np.linalg.norm(av, axis=1)
    nb = np.linalg.norm(bv, axis=1)
    raw = np.outer(na, nb)
    denom = np.maximum(raw, COSINE_GUARD)
    guarded = raw <= COSINE_GUARD
    dots = av @ bv.T
    cos = dots / denom

    def backward_fn(g):
        gd = g / denom
        ga = gd @ bv
        gb = gd.T @ av
        coef_a = g * cos / np.maximum(na, COSINE_GUARD)[:, None] ** 2
        coef_b = g * cos / np.maximum(nb, COSINE_GUARD)[None, :] ** 2
        coef_a = np.where(guarded, 0.0, coef_a)
        coef_b = np.where(guarded, 0.0, coef_b)
        ga = ga - coef_a.sum(axis=1)[:, None] * av
        gb = gb - coef_b.sum(axis=0)[:, None] * bv
        return (ga, gb)

    return _emit("cosine", cos, (a, b), backward_fn)


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    _need_shape("concat", a, 2)
    _need_shape("concat", b, 2)
    if axis not in (0, 1):
        raise ValueError("concat: axis must be 0 or 1")
    other = 1 - axis
    if a.shape[other] != b.shape[other]:
        raise ValueError(f"concat: shape mismatch {a.shape} vs {b.shape} on axis {axis}")
    _finite("concat", a.values, b.values)
    split = a.shape[axis]

    def backward_fn(g):
        if axis == 0:
            return (g[:split], g[split:])
        return (g[:, :split], g[:, split:])

    return _emit("concat", np.concatenate([a.values, b.values], axis=axis),
                 (a, b), backward_fn)


def gather_rows(a: Tensor, idx) -> Tensor:
    _need_shape("gather_rows", a, 2)
    _finite("gather_rows", a.values)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows: indices must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError("gather_rows: index out of range")
    shape = a.shape

    def backward_fn(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit("gather_rows", a.values[idx], (a,), backward_fn)


def take_pairs(a: Tensor, rows, cols) -> Tensor:
    """Select entries a[rows[i], cols[i]] -> 1-d vector."""
    _need_shape("take_pairs", a, 2)
    _finite("take_pairs", a.values)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ValueError("take_pairs: rows and cols must be matching 1-d index lists")
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]
                      or cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ValueError("take_pairs: index out of range")
    shape = a.shape

    def backward_fn(g):
        ga = np.zeros(shape)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _emit("take_pairs", a.values[rows, cols], (a,), backward_fn)


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-d vector."""
    if not xs:
        raise ValueError("stack_scalars: empty input")
    for x in xs:
        if x.values.ndim != 0:
            raise ValueError(f"stack_scalars: non-scalar input of shape {x.shape}")
    vals = np.array([x.values for x in xs], dtype=np.float64)
    _finite("stack_scalars", vals)
    return _emit("stack_scalars", vals, tuple(xs),
                 lambda g: tuple(np.asarray(g[i]) for i in range(len(xs))))


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "add_bias": add_bias,
    "mul": mul,
    "scale": scale,
    "add_const": add_const,
    "neg": neg,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "variance": variance,
    "row_softmax": row_softmax,
    "row_log_softmax": row_log_softmax,
    "cosine": cosine,
    "concat": concat,
    "gather_rows": gather_rows,
    "take_pairs": take_pairs,
    "stack_scalars": stack_scalars,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply a named primitive; records on the tape when any input requires grad."""
    if kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive {kind!r}")
    fn = PRIMITIVES[kind]
    if kind == "stack_scalars":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def backward(root: Tensor) -> None:
    """Reverse pass from a scalar root produced on the current tape.

    Clears previous gradients of every tensor on the tape, then seeds
    d(root)/d(root) = 1 and walks the record list once in reverse.  The tape
    is consumed: a new forward build is needed before the next backward.
    """
    if root.values.ndim != 0:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    tape = current_tape()
    produced = any(rec.output is root for rec in tape.records)
    if not produced:
        raise ValueError("backward: root is detached from the tape")
    for rec in tape.records:
        rec.output.grad = None
        for t in rec.inputs:
            t.grad = None
    root.grad = np.asarray(1.0)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float64)
            if not np.all(np.isfinite(gi)):
                raise NumericError(f"backward: non-finite gradient from {rec.op}")
            t.grad = gi if t.grad is None else t.grad + gi
    reset_tape()


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float) -> float:
    """Max relative error between the analytic gradient of scalar f and
    central finite differences: max_i |ga_i - gn_i| / max(1, |ga_i|).
    """
    eps = float(eps)
    if not (0.0 < eps <= 1e-3):
        raise ValueError("grad_check: eps must lie in (0, 1e-3]")
    base = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    leaf = tensor(base.copy(), requires_grad=True)
    reset_tape()
    y = f(leaf)
    if y.values.ndim != 0:
        raise ValueError("grad_check: f must be scalar-valued")
    if not np.isfinite(y.values):
        raise NumericError("grad_check: f produced a non-finite value")
    if y.requires_grad:
        backward(y)
        ga = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    else:
        ga = np.zeros_like(base)  # f does not depend on x
        reset_tape()

    gn = np.zeros_like(base)
    flat = base.reshape(-1)
    gn_flat = gn.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            pert = flat.copy()
            pert[i] += sign * eps
            val = f(tensor(pert.reshape(base.shape))).item()
            if not np.isfinite(val):
                raise NumericError("grad_check: f non-finite near x")
            gn_flat[i] += sign * val / (2.0 * eps)
    reset_tape()
    err = np.abs(ga - gn) / np.maximum(1.0, np.abs(ga))
    return float(err.max()) if err.size else 0.0


# ------------------------------------------------------- checkpoint text IO


def save_tensors(path, items) -> None:
    """Write named arrays as text: per record, line 1 `name dim0 dim1 ...`,
    line 2 the row-major values with 17 significant digits (exact round-trip).
    """
    if hasattr(items, "items"):
        items = list(items.items())
    lines = []
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"invalid tensor name {name!r}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"save_tensors: non-finite values in {name!r}")
        head = " ".join([name] + [str(d) for d in arr.shape])
        body = " ".join(f"{v:.17g}" for v in arr.reshape(-1))
        lines.append(head)
        lines.append(body)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    while lines and not lines[-1]:
        lines.pop()
    if len(lines) % 2 != 0:
        raise ValueError(f"{path}: truncated checkpoint (odd line count)")
    out: dict[str, np.ndarray] = {}
    for k in range(0, len(lines), 2):
        head = lines[k].split()
        name, dims = head[0], tuple(int(d) for d in head[1:])
        vals = np.array([float(v) for v in lines[k + 1].split()], dtype=np.float64)
        size = int(np.prod(dims)) if dims else 1
        if vals.size != size:
            raise ValueError(f"{path}: tensor {name!r} expects {size} values, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"{path}: non-finite values in {name!r}")
        out[name] = vals.reshape(dims)
    return out
