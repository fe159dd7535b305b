"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

# Below this magnitude a gradient is compared in absolute rather than relative terms.
REL_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def ok(self, rel_tol: float = 1e-6) -> bool:
        return self.max_rel_err < rel_tol


def finite_difference_check(
    fn: Callable[..., T.Tensor],
    point: Sequence[np.ndarray],
    step: float = 1e-5,
    reference: Callable[..., T.Tensor] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` receives one Tensor per array in ``point`` and returns a scalar
    Tensor. The differences are taken of ``reference`` when given, for
    functions whose gradient deliberately treats part of the graph as
    constant. Runs in double precision regardless of the current setting.
    """
    reference = reference or fn
    with T.precision("double"):
        arrays = [np.array(p, dtype=np.float64) for p in point]
        leaves = [T.Tensor(a, requires_grad=True, name=f"arg{i}") for i, a in enumerate(arrays)]
        with T.Tape() as tape:
            loss = fn(*leaves)
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("finite_difference_check: function value is not finite")
        T.backward(tape, loss)
        analytic = [
            leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
        ]

        def evaluate(values):
            out = reference(*[T.Tensor(v) for v in values]).data
            if not np.isfinite(out).all():
                raise FloatingPointError("finite_difference_check: function value is not finite")
            return float(out)

        numeric = []
        for i, a in enumerate(arrays):
            est = np.zeros_like(a)
            flat = est.reshape(-1)
            for j in range(a.size):
                plus = [x.copy() for x in arrays]
                minus = [x.copy() for x in arrays]
                plus[i].reshape(-1)[j] += step
                minus[i].reshape(-1)[j] -= step
                flat[j] = (evaluate(plus) - evaluate(minus)) / (2 * step)
            numeric.append(est)

    max_abs = 0.0
    max_rel = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        diff = np.abs(a - n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
        max_abs = max(max_abs, float(diff.max()))
        max_rel = max(max_rel, float((diff / denom).max()))
    return GradCheckReport(max_abs, max_rel, analytic, numeric)
