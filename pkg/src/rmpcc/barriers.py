"""Relaxed log-barrier machinery for the safety constraints.

A safety measure h >= 0 (margin already folded in) is kept forward
invariant by constraining its rate: RBF(h(q)) <= grad_q h(q) . qdot, where
RBF is -log(h + 1) above a switch point delta and its second-order Taylor
expansion about delta below (C2 junction, defined for all h).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = ["BarrierKind", "BarrierSpec", "ConstraintRow", "rbf", "cbf_row"]

DEFAULT_DELTA = 0.01


class BarrierKind(Enum):
    SINGULARITY = "singularity"
    SELF_COLLISION = "self_collision"
    ENV_COLLISION = "env_collision"


@dataclass(frozen=True)
class BarrierSpec:
    """Threshold epsilon (subtracted inside h) and relaxation switch point delta."""

    kind: BarrierKind
    epsilon: float
    delta: float = DEFAULT_DELTA
    link: int | None = None  # set for env_collision rows

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class ConstraintRow:
    """One linearized barrier inequality for the horizon QP.

    Encodes coeff_u . u_k + coeff_x . (x_k - x_lin_k) <= rhs, i.e. the
    constraint RBF(h) - grad_q h . qdot <= 0 linearized about the stage's
    nominal state with the second derivative of h dropped:
      coeff_u = [-grad_q h, 0]          (n+1, input multiplies absolute u)
      coeff_x = [dRBF/dh grad_q h, 0, 0] (n+2, state multiplies the deviation)
      rhs     = -RBF(h at the nominal state)
    """

    coeff_u: np.ndarray
    coeff_x: np.ndarray
    rhs: float
    stage: int
    kind: BarrierKind = field(default=BarrierKind.SINGULARITY, compare=False)


def rbf(h: float, delta: float = DEFAULT_DELTA) -> tuple[float, float]:
    """Relaxed barrier value and d(value)/dh.

    -log(h + 1) for h >= delta; below delta, the quadratic that matches
    value, first and second derivative at delta. Strictly decreasing on
    both branches; defined for all real h.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if h >= delta:
        return -np.log1p(h), -1.0 / (1.0 + h)
    # Taylor of -log(1+h) about h = delta
    r = h - delta
    v0 = -np.log1p(delta)
    d1 = -1.0 / (1.0 + delta)
    d2 = 1.0 / (1.0 + delta) ** 2
    return v0 + d1 * r + 0.5 * d2 * r * r, d1 + d2 * r


def cbf_row(h: float, grad_q, delta: float, stage: int, kind: BarrierKind = BarrierKind.SINGULARITY) -> ConstraintRow:
    """Linearized barrier row at a stage's nominal state (see ConstraintRow)."""
    grad_q = np.asarray(grad_q, dtype=float)
    n = grad_q.shape[0]
    value, dvalue = rbf(h, delta)
    coeff_u = np.zeros(n + 1)
    coeff_u[:n] = -grad_q
    coeff_x = np.zeros(n + 2)
    coeff_x[:n] = dvalue * grad_q
    return ConstraintRow(coeff_u=coeff_u, coeff_x=coeff_x, rhs=-value, stage=stage, kind=kind)
