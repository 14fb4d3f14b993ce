"""Reverse-mode autodiff on numpy float32 arrays.

Storage is float32 throughout. Matmul products and scalar reductions accumulate
in float64 and round once on write; everything else runs in float32. Elementwise
ops broadcast only between same-shape operands or a scalar -- anything richer
has to live inside a fused op that brings its own backward closure.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError, StateError

Number = Union[int, float]


class Tensor:
    """A float32 array, an optional grad buffer, and a name for checkpoints."""

    __slots__ = ("data", "grad", "requires_grad", "name", "hi", "aux")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim:  # ascontiguousarray would promote 0-d to (1,)
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        # float64 readout for scalar reductions; oracles and loss logging use
        # it because the float32 copy quantizes away ~1e-7 of signal.
        self.hi: Optional[float] = None
        # fused ops may stash inference-path extras here (e.g. scan state)
        self.aux: Optional[dict] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.data.shape} is not a scalar")
        return float(self.data.reshape(()))

    def scalar(self) -> float:
        """Best-precision scalar readout: float64 accumulation if recorded."""
        return self.hi if self.hi is not None else self.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions do the real work
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(other) if isinstance(other, Tensor) else -other)


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...], bwd: Callable):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Graph:
    """Tape of recorded ops. Backward walks the tape in reverse record order."""

    def __init__(self):
        self._nodes: List[_Node] = []
        self._produced: set = set()

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d leaf into .grad of every requires_grad leaf.

        Grads add onto whatever is already in .grad; call zero_grad between
        steps. Intermediate grads live only for the duration of this call.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss has shape {loss.data.shape}, expected a scalar")
        if id(loss) not in self._produced:
            raise StateError("backward: loss was not produced under this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            gout = grads.pop(id(node.out), None)
            if gout is None:
                continue  # not on any path to the loss
            for t, g in zip(node.inputs, node.bwd(gout)):
                if g is None:
                    continue
                g = np.asarray(g, dtype=np.float32)
                if g.shape != t.data.shape:
                    raise ShapeError(
                        f"backward: grad shape {g.shape} does not match input shape {t.data.shape}"
                    )
                if id(t) in self._produced:
                    if id(t) in grads:
                        grads[id(t)] = grads[id(t)] + g
                    else:
                        grads[id(t)] = g
                elif t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g


_STACK: List[Graph] = []


def active_graph() -> Optional[Graph]:
    return _STACK[-1] if _STACK else None


@contextmanager
def tape():
    """Record ops executed in the body onto a fresh Graph."""
    g = Graph()
    _STACK.append(g)
    try:
        yield g
    finally:
        _STACK.pop()


def record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    """Attach a backward closure to `out` under the active tape, if any.

    `bwd` maps the output grad (float32 ndarray) to a tuple of per-input grads,
    ordered like `inputs`; None entries mean "no gradient for this input".
    Fused layer ops register themselves through this hook.
    """
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g._nodes.append(_Node(out, tuple(inputs), bwd))
        g._produced.add(id(out))
    return out


def sigmoid_f(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid on a raw ndarray (keeps caller's dtype)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def f32(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return np.ascontiguousarray(x) if x.ndim else x


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (k, n) -> (m, n); products accumulate in float64."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: need 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.data.shape} @ {b.data.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = Tensor(a64 @ b64)

    def bwd(g: np.ndarray):
        g64 = g.astype(np.float64)
        ga = f32(g64 @ b64.T) if a.requires_grad else None
        gb = f32(a64.T @ g64) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bwd)


def _scalar_operand(x) -> bool:
    return isinstance(x, Tensor) and x.data.ndim == 0


def _check_elementwise(opname: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    if _scalar_operand(a) or _scalar_operand(b):
        return
    raise ShapeError(
        f"{opname}: shapes {a.data.shape} and {b.data.shape} do not match; "
        "only same-shape or scalar operands broadcast here"
    )


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a full-shape grad down to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return f32(g.astype(np.float64).sum().reshape(shape))


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data + np.float32(b))
        return record(out, (a,), lambda g: (g,))
    _check_elementwise("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g: np.ndarray):
        ga = _reduce_to(g, a.data.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        k = np.float32(b)
        out = Tensor(a.data * k)
        return record(out, (a,), lambda g: (g * k,))
    _check_elementwise("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g: np.ndarray):
        ga = _reduce_to(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return record(out, (a,), lambda g: (g * out.data,))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    s = sigmoid_f(a.data)
    out = Tensor(a.data * s)

    def bwd(g: np.ndarray):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return record(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow for large x."""
    out = Tensor(softplus_f(a.data))

    def bwd(g: np.ndarray):
        return (g * sigmoid_f(a.data),)

    return record(out, (a,), bwd)


def softplus_f(x: np.ndarray) -> np.ndarray:
    # log1p(exp(x)) overflows past ~88 in float32; clamp where exp saturates,
    # the linear branch is exact to float32 there anyway
    safe = np.minimum(x, np.float32(30.0))
    return np.where(x > 30.0, x, np.log1p(np.exp(safe)))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements -> 0-d tensor; accumulates in float64."""
    total = a.data.astype(np.float64).sum()
    out = Tensor(np.float32(total))
    out.hi = float(total)

    def bwd(g: np.ndarray):
        return (np.full_like(a.data, np.float32(g.reshape(()))),)

    return record(out, (a,), bwd)
