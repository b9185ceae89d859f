"""Dense float-64 tensors with a reverse-mode gradient tape.

Every differentiable step of the detection pipeline goes through the ops
in this module. Shapes are fixed per op (no general broadcasting) and all
storage is float-64: the test suite leans on tight numerical tolerances,
so precision beats throughput here.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "SgdState",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "MissingGradientError",
    "matmul",
    "add",
    "add_bias",
    "broadcast_row",
    "elementwise_mul",
    "grad_check",
    "init_bias",
    "init_weight",
    "mean_rows",
    "mean_scalars",
    "relu",
    "reshape",
    "row",
    "scale",
    "sgd_step",
    "smooth_l1",
    "softmax_cross_entropy",
    "stack_rows",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A tensor received or produced NaN/Inf values."""


class TapeError(RuntimeError):
    """The gradient tape was used outside its contract."""


class MissingGradientError(RuntimeError):
    """An optimizer step found a registered parameter without a gradient."""


class Tensor:
    """A dense float-64 array plus an optional same-shape gradient buffer.

    Values are treated as immutable once a tensor has entered a forward
    pass; parameter updates rebind ``data`` instead of writing in place,
    which is what makes completed tensors safe to share.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        data = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values in tensor of shape {data.shape}")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_BackwardRule = Callable[[np.ndarray], tuple["np.ndarray | None", ...]]

_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of the differentiable ops from one forward pass.

    Used as a context manager around the forward computation; ``backward``
    then replays the records in reverse, visiting each node exactly once.
    A tape is single-use: replaying it twice is an error because the
    forward values it refers to may have moved on (parameter updates).
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], _BackwardRule]] = []
        self._tensors: dict[int, Tensor] = {}
        self._spent = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a gradient tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/dx into ``x.grad`` for recorded tensors.

        Only tensors with ``requires_grad`` receive gradients; leaves
        without it stay untouched.
        """
        if self._spent:
            raise TapeError("backward already ran on this tape; re-record the forward pass")
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._spent = True

        adjoint: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for out, inputs, rule in reversed(self._records):
            out_adj = adjoint.pop(id(out), None)
            if out_adj is None:
                continue
            for tensor, contrib in zip(inputs, rule(out_adj)):
                if contrib is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + contrib
                else:
                    adjoint[key] = contrib
        for key, grad in adjoint.items():
            tensor = self._tensors.get(key)
            if tensor is None or not tensor.requires_grad:
                continue
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule: _BackwardRule) -> None:
    tape = _ACTIVE_TAPE
    if tape is not None and out.requires_grad:
        tape._records.append((out, inputs, rule))
        for tensor in inputs:
            tape._tensors[id(tensor)] = tensor


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_needs_grad(a, b))

    def rule(g: np.ndarray):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    _record(out, (a, b), rule)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    out = Tensor(np.maximum(0.0, x.data), requires_grad=x.requires_grad)

    def rule(g: np.ndarray):
        return (g * (x.data > 0),)

    _record(out, (x,), rule)
    return out


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, requires_grad=_needs_grad(a, b))

    def rule(g: np.ndarray):
        return (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        )

    _record(out, (a, b), rule)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))

    def rule(g: np.ndarray):
        return (
            g if a.requires_grad else None,
            g if b.requires_grad else None,
        )

    _record(out, (a, b), rule)
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D bias to every row of a 2-D tensor."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    out = Tensor(x.data + bias.data[None, :], requires_grad=_needs_grad(x, bias))

    def rule(g: np.ndarray):
        return (
            g if x.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    _record(out, (x, bias), rule)
    return out


def broadcast_row(vec: Tensor, n: int) -> Tensor:
    """Tile a 1-D tensor into n identical rows."""
    if vec.data.ndim != 1:
        raise ShapeError(f"broadcast_row needs a 1-D tensor, got shape {vec.shape}")
    if n < 1:
        raise ShapeError("broadcast_row needs n >= 1")
    out = Tensor(np.tile(vec.data, (n, 1)), requires_grad=vec.requires_grad)

    def rule(g: np.ndarray):
        return (g.sum(axis=0),)

    _record(out, (vec,), rule)
    return out


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-length 1-D tensors into a matrix, one per row."""
    if not rows:
        raise ShapeError("stack_rows of no rows")
    width = rows[0].shape
    for r in rows:
        if r.data.ndim != 1 or r.shape != width:
            raise ShapeError(f"stack_rows needs matching 1-D rows, got {r.shape} vs {width}")
    out = Tensor(np.stack([r.data for r in rows]), requires_grad=_needs_grad(*rows))

    def rule(g: np.ndarray):
        return tuple(g[i] if r.requires_grad else None for i, r in enumerate(rows))

    _record(out, tuple(rows), rule)
    return out


def row(x: Tensor, i: int) -> Tensor:
    """Select row i of a 2-D tensor as a 1-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"row needs a 2-D tensor, got shape {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"row index {i} out of range for shape {x.shape}")
    out = Tensor(x.data[i], requires_grad=x.requires_grad)

    def rule(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[i] = g
        return (full,)

    _record(out, (x,), rule)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """View the same values under a new shape of equal size."""
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)

    def rule(g: np.ndarray):
        return (g.reshape(x.data.shape),)

    _record(out, (x,), rule)
    return out


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean of a nonempty 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows needs a 2-D tensor, got shape {x.shape}")
    n = x.shape[0]
    if n < 1:
        raise ShapeError("mean_rows of an empty tensor")
    out = Tensor(x.data.mean(axis=0), requires_grad=x.requires_grad)

    def rule(g: np.ndarray):
        return (np.tile(g / n, (n, 1)),)

    _record(out, (x,), rule)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a plain (non-differentiated) constant."""
    out = Tensor(x.data * c, requires_grad=x.requires_grad)

    def rule(g: np.ndarray):
        return (g * c,)

    _record(out, (x,), rule)
    return out


def mean_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of scalar tensors as a single recorded op."""
    if not xs:
        raise ShapeError("mean_scalars of no tensors")
    for x in xs:
        if x.data.shape != ():
            raise ShapeError(f"mean_scalars needs scalars, got shape {x.data.shape}")
    n = len(xs)
    out = Tensor(sum(float(x.data) for x in xs) / n, requires_grad=_needs_grad(*xs))

    def rule(g: np.ndarray):
        return tuple(g / n if x.requires_grad else None for x in xs)

    _record(out, tuple(xs), rule)
    return out


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of the target class.

    Computed with max-shift stabilization so saturated logits do not
    overflow; backward is softmax minus the target one-hot.
    """
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy needs 1-D logits, got shape {logits.shape}")
    n_classes = logits.shape[0]
    if not 0 <= target < n_classes:
        raise ValueError(f"target {target} out of range for {n_classes} classes")
    shift = logits.data.max()
    exps = np.exp(logits.data - shift)
    total = exps.sum()
    out = Tensor(math.log(total) + shift - logits.data[target],
                 requires_grad=logits.requires_grad)

    def rule(g: np.ndarray):
        grad = exps / total
        grad[target] -= 1.0
        return (grad * g,)

    _record(out, (logits,), rule)
    return out


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Smooth-L1 box regression loss summed over the 4 coordinates.

    Quadratic (0.5 d^2) inside |d| < 1, linear (|d| - 0.5) outside.
    """
    if pred.shape != (4,) or target.shape != (4,):
        raise ShapeError(f"smooth_l1 needs 4-vectors, got {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    absd = np.abs(diff)
    per_coord = np.where(absd < 1.0, 0.5 * diff * diff, absd - 0.5)
    out = Tensor(per_coord.sum(), requires_grad=_needs_grad(pred, target))

    def rule(g: np.ndarray):
        slope = np.clip(diff, -1.0, 1.0)
        return (
            slope * g if pred.requires_grad else None,
            -slope * g if target.requires_grad else None,
        )

    _record(out, (pred, target), rule)
    return out


class SgdState:
    """Momentum-SGD hyperparameters plus per-parameter velocity buffers."""

    def __init__(self, learning_rate: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}


def sgd_step(params: Mapping[str, Tensor],
             grads: Mapping[str, "np.ndarray | None"],
             state: SgdState) -> None:
    """One momentum-SGD update over named parameters.

    v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    Gradients are cleared afterwards so the next step starts fresh.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise MissingGradientError(f"no gradient for parameter '{name}'")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter '{name}' shape {p.data.shape}")
        v = state._velocity.get(name)
        v = g + state.weight_decay * p.data if v is None \
            else state.momentum * v + g + state.weight_decay * p.data
        state._velocity[name] = v
        p.data = p.data - state.learning_rate * v
        p.grad = None


def grad_check(f: Callable[..., Tensor], tensors: Sequence[Tensor],
               epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of scalar ``f(*tensors)`` to central differences.

    Returns the max over coordinates of |analytic - numeric| / max(1, |analytic|).
    A parameter the loss never touches counts as analytic gradient zero.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f(*tensors)
    if loss.data.shape != ():
        raise ShapeError(f"grad_check needs a scalar loss, got shape {loss.data.shape}")
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for t, a in zip(tensors, analytic):
        base = t.data
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += epsilon
            t.data = plus
            f_plus = f(*tensors).item()
            minus = base.copy()
            minus[idx] -= epsilon
            t.data = minus
            f_minus = f(*tensors).item()
            t.data = base
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(float(a[idx]) - numeric) / max(1.0, abs(float(a[idx])))
            worst = max(worst, err)
        t.grad = None
    return worst


def init_weight(fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    """Seeded uniform(-b, b) weight matrix with b = sqrt(6/(fan_in+fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def init_bias(n: int) -> Tensor:
    """Zero-initialized bias vector."""
    return Tensor(np.zeros(n), requires_grad=True)
