"""Tensor, tape and the reverse-mode sweep.

Every differentiable primitive is a :class:`Function` subclass.  Applying a
function to tensors that require gradients appends a node to the active
:class:`Tape`; :func:`backward` walks that tape in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# name -> Function subclass, filled by @register
REGISTRY: dict[str, type["Function"]] = {}


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class DimensionError(ContractError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.tapes: list[Tape] = []
        self.default_tape: Optional[Tape] = None


_state = _State()


class Tensor:
    """Dense float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, name: str = "") -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Function] = None
        self.name = name

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, tape: Optional["Tape"] = None) -> None:
        backward(self, tape)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        from . import functions as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from . import functions as F

        return F.sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        from . import functions as F

        return F.sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        from . import functions as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        from . import functions as F

        return F.div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        from . import functions as F

        return F.div(other, self)

    def __neg__(self) -> "Tensor":
        from . import functions as F

        return F.neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        from . import functions as F

        return F.power(self, exponent)

    def __matmul__(self, other: Any) -> "Tensor":
        from . import functions as F

        return F.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from . import functions as F

        return F.getitem(self, index)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from . import functions as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from . import functions as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        from . import functions as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        from . import functions as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def as_tensor(x: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


class Tape:
    """Ordered record of the operations executed while it was active.

    Nodes are appended in execution order, which is a topological order of
    the forward graph by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[Function] = []

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        popped = _state.tapes.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: "Function") -> None:
        node.tape = self
        node.position = len(self.nodes)
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()


def current_tape() -> Tape:
    if _state.tapes:
        return _state.tapes[-1]
    if _state.default_tape is None:
        _state.default_tape = Tape()
    return _state.default_tape


def reset_default_tape() -> None:
    _state.default_tape = None


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """Base class of differentiable primitives.

    ``forward`` receives raw arrays and may stash whatever ``backward`` needs
    on ``self``.  ``backward`` receives the output gradient and returns one
    gradient (or ``None``) per tensor input.
    """

    name = "function"

    def __init__(self) -> None:
        self.inputs: tuple[Tensor, ...] = ()
        self.output: Optional[Tensor] = None
        self.tape: Optional[Tape] = None
        self.position = -1

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        tensors = []
        like = next((x for x in inputs if isinstance(x, Tensor)), None)
        for x in inputs:
            tensors.append(as_tensor(x, like))
        fn = cls()
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        if _state.grad_enabled and any(t.requires_grad for t in tensors):
            fn.inputs = tuple(tensors)
            fn.output = out
            out.requires_grad = True
            out._node = fn
            current_tape().record(fn)
        return out


def register(cls: type[Function]) -> type[Function]:
    REGISTRY[cls.name] = cls
    return cls


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    if tape is None:
        tape = node.tape
    if tape is None or node.tape is not tape:
        raise ContractError("loss was not recorded on the given tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for fn in reversed(tape.nodes[: node.position + 1]):
        g = grads.pop(id(fn.output), None)
        if g is None:
            continue
        in_grads = fn.backward(g)
        for t, gi in zip(fn.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.dtype != t.dtype:
                gi = gi.astype(t.dtype)
            if t._node is None:
                _accumulate(t, gi)
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def grad_of(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Run ``fn`` on a fresh tape and return gradients for ``params``."""
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return out
