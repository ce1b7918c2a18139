"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations as they execute; ``backward``
replays the records in reverse to accumulate gradients for registered
parameters. The primitive set is exactly what the attention network and its
physics-penalty losses need; there is no broadcasting beyond row vectors and
scalars, no GPU path, and no higher-order derivatives.

Every primitive checks its output for non-finite values and raises
``FloatingPointError`` instead of propagating NaN/inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray


def _as_f64(values) -> Array:
    # Leaves copy their input: tensors must not alias caller-owned buffers.
    return np.array(values, dtype=np.float64)


def _check_finite(values: Array, op: str) -> Array:
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"non-finite values produced by '{op}'")
    return values


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


@dataclass(frozen=True)
class Tensor:
    """Immutable handle to a node on a tape. ``values`` is float64."""

    tape: "Tape" = field(repr=False)
    node: int
    values: Array

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


class Tape:
    """Single-threaded record of primitive ops, in topological order."""

    def __init__(self):
        self._next = 0
        self._records: list[tuple[int, tuple[tuple[int, Callable], ...]]] = []
        self._params: dict[str, Tensor] = {}

    def _leaf(self, values) -> Tensor:
        t = Tensor(self, self._next, _as_f64(values))
        self._next += 1
        return t

    def constant(self, values) -> Tensor:
        """A leaf that receives no gradient of interest."""
        return self._leaf(values)

    def param(self, name: str, values) -> Tensor:
        """A leaf registered for gradient collection under ``name``."""
        if name in self._params:
            raise ValueError(f"parameter '{name}' already registered")
        t = self._leaf(values)
        self._params[name] = t
        return t

    def _record(self, values: Array, op: str,
                vjps: tuple[tuple[Tensor, Callable], ...]) -> Tensor:
        out = Tensor(self, self._next, _check_finite(values, op))
        self._next += 1
        self._records.append((out.node, tuple((t.node, fn) for t, fn in vjps)))
        return out

    def backward(self, loss: Tensor) -> dict[str, Array]:
        """Gradients of a scalar loss for every registered parameter.

        Parameters the loss does not depend on get zero gradients.
        """
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.values.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.values.shape}")
        grads: dict[int, Array] = {loss.node: np.ones(())}
        for out_node, vjps in reversed(self._records):
            g = grads.pop(out_node, None)
            if g is None:
                continue
            for in_node, vjp in vjps:
                contrib = vjp(g)
                held = grads.get(in_node)
                grads[in_node] = contrib if held is None else held + contrib
        return {
            name: grads.get(t.node, np.zeros_like(t.values))
            for name, t in self._params.items()
        }


def _tape_of(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands recorded on different tapes")
    return tape


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    out = a.values + b.values
    return tape._record(out, "add", (
        (a, lambda g: _unbroadcast(g, a.values.shape)),
        (b, lambda g: _unbroadcast(g, b.values.shape)),
    ))


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    out = a.values - b.values
    return tape._record(out, "sub", (
        (a, lambda g: _unbroadcast(g, a.values.shape)),
        (b, lambda g: _unbroadcast(-g, b.values.shape)),
    ))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; operands may broadcast (row vectors, scalars)."""
    tape = _tape_of(a, b)
    out = a.values * b.values
    return tape._record(out, "mul", (
        (a, lambda g: _unbroadcast(g * b.values, a.values.shape)),
        (b, lambda g: _unbroadcast(g * a.values, b.values.shape)),
    ))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record(a.values * c, "scale", ((a, lambda g: g * c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.values @ b.values
    return tape._record(out, "matmul", (
        (a, lambda g: g @ b.values.T),
        (b, lambda g: a.values.T @ g),
    ))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two 2-D tensors along the last dimension."""
    tape = _tape_of(a, b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"concat shape mismatch: {a.shape} vs {b.shape}")
    na = a.shape[1]
    out = np.concatenate([a.values, b.values], axis=1)
    return tape._record(out, "concat", (
        (a, lambda g: g[:, :na]),
        (b, lambda g: g[:, na:]),
    ))


def gather_rows(a: Tensor, index: Array) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into place."""
    index = np.asarray(index, dtype=np.intp)

    def back(g: Array) -> Array:
        out = np.zeros_like(a.values)
        np.add.at(out, index, g)
        return out

    return a.tape._record(a.values[index], "gather_rows", ((a, back),))


def segment_sum(a: Tensor, segments: Array, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets."""
    segments = np.asarray(segments, dtype=np.intp)
    if a.values.ndim != 2 or segments.shape != (a.shape[0],):
        raise ValueError("segment_sum expects (n, d) values and (n,) segments")
    out = np.zeros((num_segments, a.shape[1]))
    np.add.at(out, segments, a.values)
    return a.tape._record(out, "segment_sum", ((a, lambda g: g[segments]),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    # Subgradient at 0 uses the negative-branch slope (deterministic tie-break).
    mask = a.values > 0
    out = np.where(mask, a.values, slope * a.values)
    return a.tape._record(out, "leaky_relu", (
        (a, lambda g: g * np.where(mask, 1.0, slope)),
    ))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return a.tape._record(np.where(mask, a.values, 0.0), "relu", (
        (a, lambda g: g * mask),
    ))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return a.tape._record(out, "exp", ((a, lambda g: g * out),))


def cos(a: Tensor) -> Tensor:
    return a.tape._record(np.cos(a.values), "cos", (
        (a, lambda g: -g * np.sin(a.values)),
    ))


def sin(a: Tensor) -> Tensor:
    return a.tape._record(np.sin(a.values), "sin", (
        (a, lambda g: g * np.cos(a.values)),
    ))


def sqrt(a: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0 (avoids inf*0 in downstream hinge terms).
    out = np.sqrt(a.values)
    return a.tape._record(out, "sqrt", (
        (a, lambda g: g * np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)),
    ))


def segment_softmax(a: Tensor, segments: Array, num_segments: int) -> Tensor:
    """Softmax over rows sharing a segment id, independently per column.

    Numerically stabilized by a per-segment max shift; a segment of length
    one yields exactly 1.0 with zero gradient.
    """
    segments = np.asarray(segments, dtype=np.intp)
    if a.values.ndim != 2 or segments.shape != (a.shape[0],):
        raise ValueError("segment_softmax expects (n, d) values and (n,) segments")
    d = a.shape[1]
    seg_max = np.full((num_segments, d), -np.inf)
    np.maximum.at(seg_max, segments, a.values)
    e = np.exp(a.values - seg_max[segments])
    denom = np.zeros((num_segments, d))
    np.add.at(denom, segments, e)
    out = e / denom[segments]

    def back(g: Array) -> Array:
        dot = np.zeros((num_segments, d))
        np.add.at(dot, segments, g * out)
        return out * (g - dot[segments])

    return a.tape._record(out, "segment_softmax", ((a, back),))


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; ``eps`` on the norm guards zero rows."""
    if a.values.ndim != 2:
        raise ValueError("l2_normalize expects a 2-D tensor")
    norm = np.linalg.norm(a.values, axis=1, keepdims=True)
    out = a.values / (norm + eps)

    def back(g: Array) -> Array:
        safe = np.where(norm > 0, norm, 1.0)
        dots = np.sum(g * a.values, axis=1, keepdims=True)
        return g / (norm + eps) - a.values * (dots / ((norm + eps) ** 2 * safe))

    return a.tape._record(out, "l2_normalize", ((a, back),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements (scalar output)."""
    tape = _tape_of(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.values - b.values
    n = max(diff.size, 1)
    out = np.asarray((diff * diff).sum() / n)
    return tape._record(out, "mse", (
        (a, lambda g: g * (2.0 / n) * diff),
        (b, lambda g: g * (-2.0 / n) * diff),
    ))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.values.sum())
    return a.tape._record(out, "sum", (
        (a, lambda g: np.full(a.values.shape, g)),
    ))


def hinge_sq(a: Tensor, lower, upper) -> Tensor:
    """Elementwise squared band violation: relu(lo - x)^2 + relu(x - hi)^2.

    Bounds are constants (floats or arrays broadcastable to ``a``).
    """
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    below = np.maximum(lo - a.values, 0.0)
    above = np.maximum(a.values - hi, 0.0)
    out = below * below + above * above
    return a.tape._record(out, "hinge_sq", (
        (a, lambda g: g * (2.0 * above - 2.0 * below)),
    ))
