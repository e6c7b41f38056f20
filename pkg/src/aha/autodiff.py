"""Reverse-mode automatic differentiation over dense float64 arrays.

The node vocabulary is closed and small: matmul, add (same shape, or a
row-wise bias), multiply, relu, tanh, softmax, log, exp, gather, sum, mean,
squared L2 norm, concatenate, plus two gradient-shaping nodes --
gradient_reversal and stop_gradient. Everything else in the package is
composed from these. All values are float64 and every node checks its
output for NaN/Inf at construction time.

Calling ``backward`` twice on the same loss recomputes (not accumulates)
gradients, so repeated passes are bit-identical.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Structural problem: incompatible shapes, unbound leaves, empty inputs."""


class NumericError(ArithmeticError):
    """A forward value came out NaN or Inf."""


class StateError(RuntimeError):
    """Operation issued out of order, e.g. backward before evaluate."""


_uid_counter = itertools.count()


class Tensor:
    """A dense float64 array plus its position in the computation graph."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp", "_op", "_uid")

    def __init__(self, values, requires_grad: bool = False, *, parents=(), vjp=None, op="leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._vjp = vjp
        self._op = op
        self._uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ConfigError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self._op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; everything routes through the closed op set.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values) -> Tensor:
    """A leaf that never receives gradient."""
    return Tensor(values, requires_grad=False)


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values produced by op '{op}'")


def _node(op: str, values: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    _check_finite(values, op)
    needs = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=needs, parents=parents, vjp=vjp, op=op)


# ---------------------------------------------------------------------------
# The closed operator set.
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition; also accepts a 1-D row-wise bias as ``b``."""
    bias = b.values.ndim == 1 and a.values.ndim == 2 and b.values.shape[0] == a.values.shape[-1]
    if not bias and a.values.shape != b.values.shape:
        raise ConfigError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    out = a.values + b.values

    def vjp(g):
        gb = g.sum(axis=0) if bias else g
        return g, gb

    return _node("add", out, (a, b), vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape != b.values.shape:
        raise ConfigError(f"multiply: shapes {a.shape} and {b.shape} differ")
    out = a.values * b.values

    def vjp(g):
        return g * b.values, g * a.values

    return _node("multiply", out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """2-D matrix product; ``transpose_b`` multiplies by b's transpose."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ConfigError("matmul expects 2-D operands")
    bv = b.values.T if transpose_b else b.values
    if a.values.shape[1] != bv.shape[0]:
        raise ConfigError(f"matmul: inner dims {a.shape} x {b.shape} (transpose_b={transpose_b})")
    out = a.values @ bv

    def vjp(g):
        if transpose_b:
            return g @ b.values, g.T @ a.values
        return g @ b.values.T, a.values.T @ g

    return _node("matmul", out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0.0)

    def vjp(g):
        return (g * (x.values > 0.0),)

    return _node("relu", out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node("tanh", out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.values)

    def vjp(g):
        return (g * out,)

    return _node("exp", out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.values)

    def vjp(g):
        return (g / x.values,)

    return _node("log", out, (x,), vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted for stability."""
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node("softmax", out, (x,), vjp)


def gather(x: Tensor, indices) -> Tensor:
    """Select rows of ``x`` (axis 0) by integer index; repeats allowed."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ConfigError("gather expects a 1-D index array")
    if x.values.shape[0] == 0:
        raise ConfigError("gather from an empty tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= x.values.shape[0]):
        raise ConfigError("gather index out of range")
    out = x.values[idx]

    def vjp(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node("gather", out, (x,), vjp)


def tensor_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.full_like(x.values, float(g)),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.values.shape).copy(),)

    return _node("sum", out, (x,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.values.size
    out = x.values.mean()

    def vjp(g):
        return (np.full_like(x.values, float(g) / n),)

    return _node("mean", out, (x,), vjp)


def sq_norm(x: Tensor) -> Tensor:
    """Squared L2 norm over all elements (scalar)."""
    out = np.square(x.values).sum()

    def vjp(g):
        return (2.0 * float(g) * x.values,)

    return _node("sq_norm", out, (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ConfigError("concat of zero tensors")
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=axis))

    return _node("concat", out, tuple(parts), vjp)


def gradient_reversal(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    if lam < 0:
        raise ConfigError("gradient_reversal requires lam >= 0")
    out = x.values.copy()

    def vjp(g):
        return ((-lam) * g,)

    return _node("grad_reversal", out, (x,), vjp)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; contributes zero gradient to everything upstream."""
    return Tensor(x.values.copy(), requires_grad=False, op="stop_gradient")


# ---------------------------------------------------------------------------
# Composites (no new node types).
# ---------------------------------------------------------------------------

def scale(x: Tensor, c: float) -> Tensor:
    return multiply(x, constant(np.full(x.shape, float(c))))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return add(x, constant(np.full(x.shape, float(c))))


def sigmoid(x: Tensor) -> Tensor:
    # sigma(x) = (tanh(x/2) + 1) / 2, staying inside the closed op set
    return add_scalar(scale(tanh(scale(x, 0.5)), 0.5), 0.5)


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return mean(multiply(d, d))


_MASK_OFF = -1.0e30  # finite stand-in for -inf; exp underflows to exactly 0


def softmax_cross_entropy_rows(logits: Tensor, targets: np.ndarray,
                               valid: np.ndarray | None = None) -> Tensor:
    """Mean over rows of cross-entropy between row-softmax(logits) and targets.

    ``targets`` rows must sum to 1 over valid columns. ``valid`` is an
    optional boolean mask; invalid columns are excluded from the softmax.
    Computed as mean(logsumexp(row) - sum(targets * row)), which is exact
    for both hard and soft targets and never materializes log(0).
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ConfigError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    if valid is not None:
        masked = add(logits, constant(np.where(valid, 0.0, _MASK_OFF)))
    else:
        masked = logits
    shift_rows = masked.values.max(axis=-1, keepdims=True)
    z = exp(sub(masked, constant(np.broadcast_to(shift_rows, masked.shape).copy())))
    lse = add(log(tensor_sum(z, axis=-1)), constant(shift_rows[:, 0]))
    picked = tensor_sum(multiply(masked, constant(targets)), axis=-1)
    return mean(sub(lse, picked))


# ---------------------------------------------------------------------------
# Backward pass.
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._uid in seen or not node.requires_grad:
            continue
        seen.add(node._uid)
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from loss.

    Gradients are recomputed from scratch each call; a second call on the
    same graph yields bit-identical results.
    """
    if loss.values.size != 1:
        raise ConfigError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {loss._uid: np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(node._uid, None)
        if g is None:
            continue
        node.grad = g
        if node._vjp is None:
            continue
        parts = node._vjp(g)
        for parent, pg in zip(node._parents, parts):
            if not parent.requires_grad:
                continue
            acc = grads.get(parent._uid)
            grads[parent._uid] = pg.copy() if acc is None else acc + pg


# ---------------------------------------------------------------------------
# Named-leaf graph wrapper.
# ---------------------------------------------------------------------------

class Graph:
    """A named computation: bind leaf tensors, read named outputs.

    ``build`` maps a dict of leaf Tensors to a dict of output Tensors; the
    trace produced by one ``evaluate`` is retained so ``backward`` can run
    against it.
    """

    def __init__(self, build: Callable[[dict[str, Tensor]], dict[str, Tensor]],
                 leaf_names: Sequence[str]):
        self.build = build
        self.leaf_names = tuple(leaf_names)
        self._leaves: dict[str, Tensor] | None = None
        self._outputs: dict[str, Tensor] | None = None

    def evaluate(self, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
        missing = [n for n in self.leaf_names if n not in inputs]
        if missing:
            raise ConfigError(f"unbound graph leaves: {missing}")
        self._leaves = {n: inputs[n] for n in self.leaf_names}
        self._outputs = self.build(self._leaves)
        return self._outputs

    def backward(self, loss: str | Tensor) -> dict[str, Tensor]:
        """Gradients for every requires_grad leaf; zeros for unreached leaves."""
        if self._outputs is None:
            raise StateError("backward() called before evaluate()")
        loss_t = self._outputs[loss] if isinstance(loss, str) else loss
        backward(loss_t)
        out: dict[str, Tensor] = {}
        for name, leaf in self._leaves.items():
            if not leaf.requires_grad:
                continue
            g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
            out[name] = Tensor(g)
        return out


# ---------------------------------------------------------------------------
# Finite-difference checking.
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    """Analytic vs central-difference gradients for one scalar function."""

    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    max_rel_error: float
    passed: bool


def _rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_diff_check(fn: Callable[[dict[str, Tensor]], Tensor],
                      point: dict[str, np.ndarray],
                      step: float = 1e-5,
                      tolerance: float = 1e-4) -> GradReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps named leaf Tensors to a scalar Tensor and must be
    deterministic. Failures are recorded in the report, never raised.
    """
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in point.items()}
    out = fn(leaves)
    backward(out)
    analytic = {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
        for k, t in leaves.items()
    }

    def value_at(shifted: dict[str, np.ndarray]) -> float:
        return fn({k: Tensor(v) for k, v in shifted.items()}).item()

    numeric: dict[str, np.ndarray] = {}
    for name, base in point.items():
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            bump = flat[i]
            plus = {k: v.copy() for k, v in point.items()}
            minus = {k: v.copy() for k, v in point.items()}
            plus[name].reshape(-1)[i] = bump + step
            minus[name].reshape(-1)[i] = bump - step
            gflat[i] = (value_at(plus) - value_at(minus)) / (2.0 * step)
        numeric[name] = g

    max_err = max((_rel_error(analytic[k], numeric[k]) for k in point), default=0.0)
    return GradReport(analytic, numeric, max_err, passed=max_err <= tolerance)
