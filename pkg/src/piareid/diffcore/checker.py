"""Central finite-difference verification of recorded gradients.

``check_gradients`` takes a closure that maps a parameter list to a scalar
loss Tensor.  The closure must be deterministic given the parameter values;
this is probed by evaluating twice and comparing bitwise.  Numeric partials
use the symmetric quotient (f(x+h) - f(x-h)) / 2h and are compared to the
taped gradients with the scale-aware relative error

    |a - n| / max(1e-8, |a| + |n|)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import DiffcoreError, Tape, Tensor, backward

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
ERROR_FLOOR = 1e-8


class NonDeterministicClosureError(DiffcoreError, RuntimeError):
    """Raised when two evaluations of the loss closure disagree bitwise."""


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    passed: bool


@dataclass
class GradCheckReport:
    step: float
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((entry.max_rel_error for entry in self.entries), default=0.0)


def _evaluate(build: Callable, params: Sequence[Tensor]) -> float:
    loss = build(params)
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise DiffcoreError("gradient check closure must return a scalar Tensor")
    return float(loss.data)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    gap = np.abs(analytic - numeric)
    denom = np.maximum(ERROR_FLOOR, np.abs(analytic) + np.abs(numeric))
    return gap / denom


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    *,
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare taped gradients against central finite differences.

    Every tensor in ``params`` is perturbed entry by entry.  A parameter the
    closure ignores legitimately yields zero on both sides.  Gradients left
    on the parameters afterwards are the analytic ones from a single fresh
    tape.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    if len(names) != len(params):
        raise ValueError("names must align with params")

    first = _evaluate(build, params)
    second = _evaluate(build, params)
    if first != second or np.isnan(first):
        raise NonDeterministicClosureError(
            f"closure returned {first!r} then {second!r} on identical inputs"
        )

    for param in params:
        param.grad = None
    with Tape() as tape:
        loss = build(params)
    backward(loss, tape)

    report = GradCheckReport(step=step, tol=tol)
    for name, param in zip(names, params):
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        numeric = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + step
            plus = _evaluate(build, params)
            flat[idx] = saved - step
            minus = _evaluate(build, params)
            flat[idx] = saved
            numeric_flat[idx] = (plus - minus) / (2.0 * step)
        err = relative_error(np.asarray(analytic), numeric)
        if err.size:
            worst_flat = int(err.argmax())
            worst = np.unravel_index(worst_flat, err.shape) if err.ndim else ()
            worst_err = float(err.reshape(-1)[worst_flat])
        else:
            worst, worst_err = (), 0.0
        report.entries.append(
            GradCheckEntry(
                name=name,
                max_rel_error=worst_err,
                worst_index=tuple(int(i) for i in worst),
                passed=worst_err < tol,
            )
        )
    return report
