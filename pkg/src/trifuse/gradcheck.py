"""Verification of tape gradients against central finite differences.

The objective for a checked evaluation is the sum of the output tensor's
elements; its analytic gradient comes from :func:`trifuse.tensor.backward`
with an all-ones seed, and the numeric side perturbs one parameter
coordinate at a time.  Per parameter the two gradient vectors a (analytic)
and f (finite-difference) are compared as

    rel_err = |a - f| / max(|a|, |f|, 1e-8)

with the Euclidean norm, so a handful of near-zero coordinates cannot
dominate the verdict while any systematic error still does.

The analytic side is the production float32 path.  The finite-difference
evaluations run with parameters lifted to float64: at usable step sizes the
difference quotient of a float32 forward is dominated by storage rounding
(the observed error scales like 1/eps), so the oracle itself must be
computed more precisely than the gradients it judges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from trifuse.tensor import Tape, Tensor, _wrap, backward

DEFAULT_THRESHOLD = 1e-3

# Objective evaluation for a parameter set: f(params, tape) -> Tensor.
CheckedFn = Callable[[Mapping[str, Tensor], Tape | None], Tensor]


@dataclass(frozen=True)
class GradReport:
    """Outcome of one finite-difference check.

    ``per_param`` maps parameter names to their relative gradient error;
    ``passed`` is true when every entry is below ``threshold``.
    """

    eps: float
    threshold: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.threshold


def _objective(fn: CheckedFn, params: Mapping[str, Tensor]) -> float:
    out = fn(params, None)
    value = float(np.sum(out.data, dtype=np.float64))
    if not np.isfinite(value):
        raise ValueError("non-finite evaluation during finite-difference check")
    return value


def finite_diff_check(
    fn: CheckedFn,
    params: Mapping[str, Tensor],
    eps: float = 1e-3,
    threshold: float = DEFAULT_THRESHOLD,
    perturb: float = 0.0,
) -> GradReport:
    """Compare analytic gradients of sum(fn(params)) with central differences.

    ``perturb`` is a test-only negative control: the analytic gradients are
    scaled by (1 + perturb) before comparison, so any nonzero value well above
    the threshold must make the check fail.
    """
    if not (1e-6 <= eps <= 1e-2):
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")

    tape = Tape()
    out = fn(params, tape)
    if tape.final_output is not out:
        raise ValueError("checked function must return its tape's final output")
    grads = backward(tape, Tensor.ones(out.shape))

    lifted = {name: _wrap(p.data.astype(np.float64)) for name, p in params.items()}
    per_param: dict[str, float] = {}
    for name, p in params.items():
        analytic = grads.get(p).data.astype(np.float64)
        if perturb:
            analytic = analytic * (1.0 + perturb)
        numeric = np.empty(p.shape, dtype=np.float64)
        base = p.data.astype(np.float64).ravel()
        num_flat = numeric.ravel()
        for i in range(base.size):
            plus = base.copy()
            minus = base.copy()
            plus[i] = base[i] + eps
            minus[i] = base[i] - eps
            step = plus[i] - minus[i]
            shifted_plus = dict(lifted)
            shifted_plus[name] = _wrap(plus.reshape(p.shape))
            shifted_minus = dict(lifted)
            shifted_minus[name] = _wrap(minus.reshape(p.shape))
            num_flat[i] = (_objective(fn, shifted_plus) - _objective(fn, shifted_minus)) / step
        diff = np.linalg.norm(analytic - numeric)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        per_param[name] = float(diff / denom)

    return GradReport(eps=eps, threshold=threshold, per_param=per_param)
