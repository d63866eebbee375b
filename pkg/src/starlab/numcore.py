"""Dense float64 numerics with reverse-mode differentiation.

Everything downstream (encoders, losses, the trainer) builds its math from
the primitives here, so this module is the single source of truth for
normalization, softmax, and gradient correctness.  Tensors are eager numpy
arrays; every operation appends one record to the owning :class:`Tape`,
and ``Tape.backward`` replays the records in reverse to accumulate exact
gradients for every parameter leaf.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12


class DegenerateNormError(ValueError):
    """Raised when asked to normalize a vector of (near-)zero length."""


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving direction."""
    v = _as_f64(v)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot normalize non-finite input")
    norm = float(np.linalg.norm(v))
    if norm <= EPS_NORM:
        raise DegenerateNormError(f"norm {norm!r} <= {EPS_NORM}")
    return v / norm


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax of a 1-D logit vector (max-subtraction form)."""
    logits = _as_f64(logits)
    if logits.size == 0:
        raise ValueError("softmax of empty input")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax requires finite logits")
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / e.sum()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node on a :class:`Tape`: an eager float64 array plus its position
    in the recording.  Build graphs with the overloaded operators; call
    ``tape.backward(scalar)`` to get gradients."""

    def __init__(self, value, tape: "Tape", index: int):
        self.value = _as_f64(value)
        self.tape = tape
        self._index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ValueError("operands recorded on different tapes")
            return other
        return self.tape.constant(other)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        out = self.tape._emit(self.value + other.value)

        def back(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        self.tape._record(out, (self, other), back)
        return out

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._lift(other)
        out = self.tape._emit(self.value - other.value)

        def back(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        self.tape._record(out, (self, other), back)
        return out

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self.value, other.value
        out = self.tape._emit(a * b)

        def back(g):
            return (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape))

        self.tape._record(out, (self, other), back)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self.value, other.value
        out = self.tape._emit(a / b)

        def back(g):
            return (
                _unbroadcast(g / b, self.shape),
                _unbroadcast(-g * a / (b * b), other.shape),
            )

        self.tape._record(out, (self, other), back)
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return self._lift(other).__truediv__(self)

    def __neg__(self) -> "Tensor":
        out = self.tape._emit(-self.value)
        self.tape._record(out, (self,), lambda g: (-g,))
        return out

    def __pow__(self, exponent: float) -> "Tensor":
        p = float(exponent)
        a = self.value
        out = self.tape._emit(a**p)
        self.tape._record(out, (self,), lambda g: (g * p * a ** (p - 1.0),))
        return out

    def __matmul__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul is defined for 2-D operands only")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"inner dimensions do not conform: {a.shape} @ {b.shape}")
        out = self.tape._emit(a @ b)

        def back(g):
            return (g @ b.T, a.T @ g)

        self.tape._record(out, (self, other), back)
        return out

    # -- elementwise functions -------------------------------------------

    def tanh(self) -> "Tensor":
        y = np.tanh(self.value)
        out = self.tape._emit(y)
        self.tape._record(out, (self,), lambda g: (g * (1.0 - y * y),))
        return out

    def exp(self) -> "Tensor":
        y = np.exp(self.value)
        out = self.tape._emit(y)
        self.tape._record(out, (self,), lambda g: (g * y,))
        return out

    def log(self) -> "Tensor":
        a = self.value
        out = self.tape._emit(np.log(a))
        self.tape._record(out, (self,), lambda g: (g / a,))
        return out

    # -- shape ops --------------------------------------------------------

    @property
    def T(self) -> "Tensor":
        if self.value.ndim != 2:
            raise ValueError("transpose expects a matrix")
        out = self.tape._emit(self.value.T)
        self.tape._record(out, (self,), lambda g: (g.T,))
        return out

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.tape._emit(self.value.sum(axis=axis, keepdims=keepdims))

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        self.tape._record(out, (self,), back)
        return out

    def dot(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self.value, other.value
        if a.ndim != 1 or b.ndim != 1:
            raise ValueError("dot expects two vectors")
        out = self.tape._emit(a.dot(b))
        self.tape._record(out, (self, other), lambda g: (g * b, g * a))
        return out

    def item(self) -> float:
        return float(self.value)


class Tape:
    """Ordered record of primitive operations for one logical execution.

    Leaves enter via :meth:`param` (gradients wanted) or :meth:`constant`.
    Creation order is already a topological order, so the backward pass is
    a single reverse sweep over the records.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._params: list[Tensor] = []
        self._count = 0

    def _emit(self, value) -> Tensor:
        node = Tensor(value, self, self._count)
        self._count += 1
        return node

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], back: Callable) -> None:
        self._records.append((out, parents, back))

    def param(self, value) -> Tensor:
        node = self._emit(value)
        self._params.append(node)
        return node

    def constant(self, value) -> Tensor:
        return self._emit(value)

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient of the scalar ``output`` with respect to every param leaf.

        Parameters with no path to the output get an exactly-zero gradient.
        """
        if not isinstance(output, Tensor) or output.tape is not self:
            raise ValueError("output is not recorded on this tape")
        if output.value.shape != ():
            raise ValueError("backward requires a scalar output")
        grads: dict[int, np.ndarray] = {output._index: np.asarray(1.0)}
        for out, parents, back in reversed(self._records):
            g = grads.get(out._index)
            if g is None or out._index > output._index:
                continue
            for parent, pg in zip(parents, back(g)):
                acc = grads.get(parent._index)
                grads[parent._index] = pg if acc is None else acc + pg
        return {
            p: grads.get(p._index, np.zeros_like(p.value)) for p in self._params
        }


# -- differentiable composites (shared by encoders and losses) -------------


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a matrix tensor to unit Euclidean norm."""
    norms = np.sqrt((x.value**2).sum(axis=1))
    if np.any(norms <= EPS_NORM):
        raise DegenerateNormError("matrix has a row with (near-)zero norm")
    sq = (x * x).sum(axis=1, keepdims=True)
    return x / (sq**0.5)


def log_softmax(x: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Row/column log-softmax with max-subtraction for stability.

    With ``mask`` (a constant 0/1 array broadcastable to ``x``), masked-out
    entries are excluded from the normalizer; their output entries are
    finite but meaningless and must be ignored by the caller.  Every slice
    along ``axis`` must retain at least one unmasked entry.
    """
    vals = x.value
    if mask is None:
        shift = np.max(vals, axis=axis, keepdims=True)
    else:
        retained = np.where(mask > 0, vals, -np.inf)
        shift = np.max(retained, axis=axis, keepdims=True)
        if not np.all(np.isfinite(shift)):
            raise ValueError("mask leaves an empty slice along the softmax axis")
    shifted = x - shift  # shift is detached: log-softmax is shift invariant
    e = shifted.exp()
    if mask is not None:
        e = e * mask
    return shifted - e.sum(axis=axis, keepdims=True).log()


def finite_difference_gradients(
    value_fn: Callable[[Sequence[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-6,
) -> list[np.ndarray]:
    """Central-difference gradient of ``value_fn`` over every array entry.

    Independent oracle for the tape: never routes through backward().
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = [a.copy() for a in arrays]
    grads = [np.zeros_like(a) for a in arrays]
    for ai, arr in enumerate(work):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value_fn(work)
            flat[i] = orig - eps
            down = value_fn(work)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("non-finite loss at perturbed point")
            grads[ai].reshape(-1)[i] = (up - down) / (2.0 * eps)
    return grads
