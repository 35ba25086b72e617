"""Tensor, Parameter and the tape that records operations for reverse mode.

Operations only record themselves while a :class:`Tape` is active (``with
Tape() as tape:``). Outside a tape every op is a plain numpy computation,
which is what evaluation and finite-difference checks use.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericError, UsageError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "vitiseg_active_tape", default=None
)


class Tensor:
    """n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape):
            raise UsageError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


class Parameter(Tensor):
    """Trainable leaf. ``grad`` always has the value's shape.

    A frozen parameter (``trainable=False``) still takes part in the graph
    but its gradient is forced to zero by backward.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("out", "inputs", "backward", "name")

    def __init__(self, out, inputs, backward, name):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of executed operations.

    Tapes are per-context (``contextvars``), so threads each see their own
    active tape and never share one implicitly.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def op_names(self) -> list[str]:
        return [n.name for n in self._nodes]

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: BackwardFn, name: str):
        self._nodes.append(_Node(out, tuple(inputs), backward, name))

    def clear(self):
        self._nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every leaf that requires a gradient.

        Parameters receive ``.grad`` (zeros when frozen or unreached); other
        leaves created with ``requires_grad=True`` get ``.grad`` as well.
        The tape is cleared afterwards.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.out) for n in self._nodes}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss

        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericError(f"non-finite gradient flowing out of {node.name}")
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi

        for node in self._nodes:
            for inp in node.inputs:
                if isinstance(inp, Parameter) and id(inp) not in produced:
                    leaves.setdefault(id(inp), inp)

        for key, leaf in leaves.items():
            g = grads.get(key)
            if isinstance(leaf, Parameter):
                if g is None or not leaf.trainable:
                    leaf.grad = np.zeros_like(leaf.data)
                else:
                    leaf.grad = np.array(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            elif g is not None:
                leaf.grad = np.array(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        self.clear()


def current_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, name: str = "op") -> Tensor:
    """Wrap ``data`` as the output of an op over ``inputs``.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, already reduced to each input's shape. Raises NumericError when
    ``data`` holds NaN or Inf.
    """
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {name}")
    tape = _ACTIVE_TAPE.get()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape.record(out, inputs, backward_fn, name)
    return out
