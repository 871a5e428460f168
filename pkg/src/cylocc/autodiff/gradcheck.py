"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradcheckReport:
    max_rel_errors: list[float]
    tol: float
    worst_index: list[tuple | None] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_errors)

    def __bool__(self) -> bool:
        return self.passed

    def __str__(self) -> str:
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_errors)
        return f"{'PASS' if self.passed else 'FAIL'} max_rel_err=[{errs}] tol={self.tol:g}"


def rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    step: float = 1e-5,
    tol: float = 1e-4,
    check: Sequence[bool] | None = None,
) -> GradcheckReport:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    ``check`` optionally selects which inputs are differentiated; the others
    are passed as constants.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    if check is None:
        check = [True] * len(arrays)

    leaves = [Tensor(a, requires_grad=c) for a, c in zip(arrays, check)]
    out = fn(*leaves)
    if not isinstance(out, Tensor) or out.data.ndim != 0:
        shape = out.shape if isinstance(out, Tensor) else type(out).__name__
        raise ValueError(f"gradcheck: fn must return a scalar Tensor, got {shape}")
    backward(out)

    def evaluate(args):
        with no_grad():
            return float(fn(*[Tensor(a) for a in args]).data)

    errors, worst = [], []
    for k, (arr, leaf) in enumerate(zip(arrays, leaves)):
        if not check[k]:
            continue
        analytic = leaf.grad if leaf.grad is not None else np.zeros(arr.shape)
        numeric = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += step
            minus[idx] -= step
            args_p = list(arrays)
            args_m = list(arrays)
            args_p[k], args_m[k] = plus, minus
            numeric[idx] = (evaluate(args_p) - evaluate(args_m)) / (2 * step)
        err = rel_error(analytic, numeric)
        if err.size:
            errors.append(float(err.max()))
            worst.append(np.unravel_index(int(err.argmax()), err.shape))
        else:
            errors.append(0.0)
            worst.append(None)
    return GradcheckReport(errors, tol, worst)
