"""Central finite-difference gradient checker and the per-op check suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import functions as F
from .tensor import REGISTRY, Tape, Tensor, backward, no_grad

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass
class CheckResult:
    name: str
    rel_error: float
    passed: bool


# gradients with both norms below this are treated as exactly zero
ZERO_FLOOR = 1e-10


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||).

    When both norms are below ``ZERO_FLOOR`` the gradient is structurally
    zero and only rounding noise is left, so the error is 0.
    """
    diff = np.linalg.norm((analytic - numeric).ravel())
    scale = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()))
    if scale < ZERO_FLOOR:
        return 0.0
    return float(diff / scale)


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3) -> np.ndarray:
    grad = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``tensors`` should hold float64 data; the forward is re-evaluated once
    per perturbed element.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("check_gradients expects float64 tensors")
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_gradient(fn, t, h)))
        t.grad = None
    return worst


# --------------------------------------------------------------------------
# per-op cases
# --------------------------------------------------------------------------
def _t(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return F.sum(F.mul(out, w))


def _unary(op: Callable[[Tensor], Tensor], low: float = -1.0, high: float = 1.0) -> Case:
    def case(rng):
        x = _t(rng, 3, 4, low=low, high=high)
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(op(x), w)), [x]

    return case


def _binary(op: Callable[[Tensor, Tensor], Tensor], low: float = -1.0) -> Case:
    def case(rng):
        a = _t(rng, 2, 3, 4)
        b = _t(rng, 3, 1, low=low)  # broadcast along two axes
        if low > 0:
            b.data += 0.5
        w = rng.normal(size=(2, 3, 4))
        return (lambda: _weighted(op(a, b), w)), [a, b]

    return case


def _relu_case(rng):
    x = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True, dtype=np.float64)
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(F.relu(x), w)), [x]


def _matmul_case(rng):
    a = _t(rng, 2, 3, 4)
    b = _t(rng, 4, 5)
    c = _t(rng, 2, 5, 2)
    w = rng.normal(size=(2, 3, 2))
    return (lambda: _weighted(F.matmul(F.matmul(a, b), c), w)), [a, b, c]


def _reduce(op) -> Case:
    def case(rng):
        x = _t(rng, 2, 3, 4)
        w = rng.normal(size=(2, 1, 4))
        return (lambda: _weighted(op(x, axis=1, keepdims=True), w) + op(x)), [x]

    return case


def _reshape_case(rng):
    x = _t(rng, 2, 6)
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(F.reshape(x, (3, 4)), w)), [x]


def _transpose_case(rng):
    x = _t(rng, 2, 3, 4)
    w = rng.normal(size=(4, 2, 3))
    return (lambda: _weighted(F.transpose(x, (2, 0, 1)), w)), [x]


def _getitem_case(rng):
    x = _t(rng, 4, 5)
    w = rng.normal(size=(2, 3))
    return (lambda: _weighted(x[1:3, ::2], w)), [x]


def _concat_case(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 2)
    w = rng.normal(size=(2, 5))
    return (lambda: _weighted(F.concat([a, b], axis=1), w)), [a, b]


def _softmax_case(rng):
    x = _t(rng, 3, 5, low=-3, high=3)
    w = rng.normal(size=(3, 5))
    return (lambda: _weighted(F.softmax(x, axis=-1), w)), [x]


def _log_softmax_case(rng):
    x = _t(rng, 3, 5, low=-3, high=3)
    w = rng.normal(size=(3, 5))
    return (lambda: _weighted(F.log_softmax(x, axis=-1), w)), [x]


def _layernorm_case(rng):
    x = _t(rng, 3, 6, low=-2, high=2)
    g = _t(rng, 6, low=0.5, high=1.5)
    b = _t(rng, 6)
    w = rng.normal(size=(3, 6))
    return (lambda: _weighted(F.layernorm(x, g, b, 1e-5), w)), [x, g, b]


OP_CASES: dict[str, Case] = {
    "add": _binary(F.add),
    "sub": _binary(F.sub),
    "mul": _binary(F.mul),
    "div": _binary(F.div, low=0.5),
    "neg": _unary(F.neg),
    "power": _unary(lambda x: F.power(x, 3.0)),
    "exp": _unary(F.exp),
    "log": _unary(F.log, low=0.5, high=2.0),
    "sqrt": _unary(F.sqrt, low=0.5, high=2.0),
    "tanh": _unary(F.tanh),
    "relu": _relu_case,
    "gelu": _unary(F.gelu, low=-3, high=3),
    "matmul": _matmul_case,
    "sum": _reduce(F.sum),
    "mean": _reduce(F.mean),
    "reshape": _reshape_case,
    "transpose": _transpose_case,
    "getitem": _getitem_case,
    "concat": _concat_case,
    "softmax": _softmax_case,
    "log_softmax": _log_softmax_case,
    "layernorm": _layernorm_case,
}


def run_suite(
    cases: Optional[dict[str, Case]] = None,
    tol: float = 1e-3,
    h: float = 1e-3,
    seed: int = 0,
) -> list[CheckResult]:
    """Check every case; ``cases`` defaults to one case per registered op."""
    if cases is None:
        missing = set(REGISTRY) - set(OP_CASES)
        if missing:
            raise KeyError(f"registered ops without a gradient case: {sorted(missing)}")
        cases = OP_CASES
    results = []
    for name, case in cases.items():
        rng = np.random.default_rng([seed, len(name)])
        fn, tensors = case(rng)
        err = check_gradients(fn, tensors, h)
        results.append(CheckResult(name, err, bool(err < tol)))
    return results
