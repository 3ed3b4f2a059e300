"""Dense convex QP solver for the condensed horizon subproblems.

    minimize   0.5 x' H x + g' x
    subject to lower <= A x <= upper        (+/-inf allowed)

Operator-splitting (ADMM) iteration with Ruiz equilibration, a cached
Cholesky factor of the reduced normal matrix, active-set polishing for
tight KKT residuals, warm starting, and primal-infeasibility certificates.
Deterministic: identical inputs and warm start give identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = ["QpProblem", "QpSolution", "QpSolver", "solve_qp"]

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"


@dataclass
class QpProblem:
    h: np.ndarray
    g: np.ndarray
    a: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        m = self.g.shape[0]
        if self.h.shape != (m, m):
            raise ValueError("H/g dimension mismatch")
        if np.max(np.abs(self.h - self.h.T), initial=0.0) > 1e-10:
            raise ValueError("H must be symmetric within 1e-10")
        if self.a.ndim != 2 or self.a.shape[1] != m:
            raise ValueError("A/g dimension mismatch")
        if self.lower.shape != (self.a.shape[0],) or self.upper.shape != self.lower.shape:
            raise ValueError("bounds must match constraint rows")
        if np.any(self.lower > self.upper):
            raise ValueError("lower > upper")

    def validate_convexity(self, tol: float = 1e-8) -> None:
        """Full eigenvalue check of the PSD invariant (test/diagnostic use)."""
        if np.linalg.eigvalsh(0.5 * (self.h + self.h.T)).min() < -tol:
            raise ValueError("H is not positive semidefinite")

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.h @ x + self.g @ x)


@dataclass
class QpSolution:
    primal: np.ndarray
    dual: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    complementarity: float = np.nan
    certificate: np.ndarray | None = field(default=None, repr=False)


@dataclass
class _Scaling:
    d: np.ndarray  # variable scaling, x = d * x_scaled
    e: np.ndarray  # constraint scaling
    c: float  # cost scaling


def _ruiz_equilibrate(h, g, a, lower, upper, iters: int = 10):
    m = g.shape[0]
    c = a.shape[0]
    d = np.ones(m)
    e = np.ones(c)
    cost = 1.0
    h = h.copy()
    g = g.copy()
    a = a.copy()
    lower = lower.copy()
    upper = upper.copy()
    for _ in range(iters):
        col_h = np.max(np.abs(h), axis=0, initial=0.0) if m else np.zeros(0)
        col_a = np.max(np.abs(a), axis=0, initial=0.0) if c else np.zeros(m)
        dv = np.sqrt(np.maximum(np.maximum(col_h, col_a), 1e-12))
        dv = 1.0 / dv
        ev = np.sqrt(np.maximum(np.max(np.abs(a), axis=1, initial=0.0), 1e-12)) if c else np.zeros(0)
        ev = 1.0 / ev if c else ev
        h = h * dv[:, None] * dv[None, :]
        g = g * dv
        if c:
            a = a * ev[:, None] * dv[None, :]
            lower = lower * ev
            upper = upper * ev
        d *= dv
        e *= ev if c else 1.0
        # cost normalization
        norm_h = np.mean(np.max(np.abs(h), axis=0)) if m else 0.0
        gamma = 1.0 / max(norm_h, np.max(np.abs(g), initial=0.0), 1e-12)
        if not np.isfinite(gamma) or gamma <= 0:
            gamma = 1.0
        h *= gamma
        g *= gamma
        cost *= gamma
    return h, g, a, lower, upper, _Scaling(d=d, e=e, c=cost)


@dataclass
class QpSolver:
    """Owns mutable workspace; use one instance per thread."""

    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_pinf: float = 1e-9
    max_iter: int = 4000
    scaling: bool = True
    adaptive_rho: bool = True
    check_interval: int = 25
    polish_reg: float = 1e-9

    def solve(self, prob: QpProblem, warm: QpSolution | None = None) -> QpSolution:
        m = prob.g.shape[0]
        c = prob.a.shape[0]
        if c == 0:
            polished = self._try_polish(prob, QpSolution(
                primal=np.zeros(m), dual=np.zeros(0), status=OPTIMAL, iterations=0,
                primal_residual=0.0, dual_residual=np.inf,
            ))
            if polished is not None:
                return polished
        if self.scaling:
            hs, gs, as_, ls, us, sc = _ruiz_equilibrate(prob.h, prob.g, prob.a, prob.lower, prob.upper)
        else:
            hs, gs, as_, ls, us = prob.h, prob.g, prob.a, prob.lower, prob.upper
            sc = _Scaling(d=np.ones(m), e=np.ones(c), c=1.0)

        if warm is not None and warm.primal.shape == (m,) and warm.dual.shape == (c,):
            x = warm.primal / sc.d
            y = warm.dual * sc.c / np.where(sc.e > 0, sc.e, 1.0) if c else np.zeros(0)
            z = np.clip(as_ @ x, ls, us) if c else np.zeros(0)
        else:
            x = np.zeros(m)
            y = np.zeros(c)
            z = np.zeros(c)

        rho = self.rho
        factor = self._factorize(hs, as_, rho)
        y_prev_check = y.copy()
        best = None

        for it in range(1, self.max_iter + 1):
            rhs = self.sigma * x - gs + (as_.T @ (rho * z - y) if c else 0.0)
            x_tilde = cho_solve(factor, rhs)
            z_tilde = as_ @ x_tilde if c else z
            x = self.alpha * x_tilde + (1.0 - self.alpha) * x
            if c:
                v = self.alpha * z_tilde + (1.0 - self.alpha) * z
                z = np.clip(v + y / rho, ls, us)
                y = y + rho * (v - z)

            if it <= 5 or it % self.check_interval == 0 or it == self.max_iter:
                r_prim, r_dual, comp = self._residuals(prob, sc, x, y, z)
                if r_prim <= self.eps_abs and r_dual <= self.eps_abs:
                    sol = self._assemble(prob, sc, x, y, OPTIMAL, it)
                    return self._try_polish(prob, sol) or sol
                if c:
                    cert = self._infeasibility_certificate(prob, sc, y - y_prev_check)
                    if cert is not None:
                        return QpSolution(
                            primal=sc.d * x,
                            dual=sc.e * y / sc.c if c else y,
                            status=PRIMAL_INFEASIBLE,
                            iterations=it,
                            primal_residual=r_prim,
                            dual_residual=r_dual,
                            certificate=cert,
                        )
                    y_prev_check = y.copy()
                best = (r_prim, r_dual, x.copy(), y.copy())
                # occasionally try polishing early: with a settled active set
                # this cuts straight to machine-precision KKT residuals
                if it >= 100 and it % 100 == 0:
                    sol = self._try_polish(prob, self._assemble(prob, sc, x, y, OPTIMAL, it))
                    if sol is not None:
                        return sol
                if self.adaptive_rho and c and it % 100 == 0 and r_dual > 0:
                    scale = np.sqrt(max(r_prim, 1e-16) / max(r_dual, 1e-16))
                    if scale > 5.0 or scale < 0.2:
                        rho = float(np.clip(rho * scale, 1e-6, 1e6))
                        factor = self._factorize(hs, as_, rho)

        r_prim, r_dual, comp = self._residuals(prob, sc, x, y, z)
        sol = self._assemble(prob, sc, x, y, MAX_ITER, self.max_iter)
        polished = self._try_polish(prob, sol)
        if polished is not None:
            return polished
        return sol

    def _factorize(self, hs, as_, rho):
        reduced = hs + self.sigma * np.eye(hs.shape[0])
        if as_.shape[0]:
            reduced = reduced + rho * (as_.T @ as_)
        try:
            return cho_factor(reduced, lower=True)
        except np.linalg.LinAlgError:
            return cho_factor(reduced + 1e-9 * np.eye(hs.shape[0]), lower=True)

    def _residuals(self, prob, sc, x, y, z):
        xu = sc.d * x
        yu = sc.e * y / sc.c if y.size else y
        zu = z / sc.e if z.size else z
        ax = prob.a @ xu if y.size else np.zeros(0)
        r_prim = float(np.max(np.abs(ax - zu), initial=0.0))
        r_dual = float(np.max(np.abs(prob.h @ xu + prob.g + (prob.a.T @ yu if y.size else 0.0)), initial=0.0))
        comp = _complementarity(prob, xu, yu)
        return r_prim, r_dual, comp

    def _assemble(self, prob, sc, x, y, status, iterations):
        xu = sc.d * x
        yu = sc.e * y / sc.c if y.size else y
        ax = prob.a @ xu if y.size else np.zeros(0)
        r_prim = float(np.max(np.abs(ax - np.clip(ax, prob.lower, prob.upper)), initial=0.0))
        r_dual = float(np.max(np.abs(prob.h @ xu + prob.g + (prob.a.T @ yu if y.size else 0.0)), initial=0.0))
        return QpSolution(
            primal=xu,
            dual=yu,
            status=status,
            iterations=iterations,
            primal_residual=r_prim,
            dual_residual=r_dual,
            complementarity=_complementarity(prob, xu, yu),
        )

    def _infeasibility_certificate(self, prob, sc, dy_scaled):
        if not dy_scaled.size:
            return None
        dy = sc.e * dy_scaled / sc.c
        norm = np.max(np.abs(dy), initial=0.0)
        if norm < 1e-10:
            return None
        dy = dy / norm
        if np.max(np.abs(prob.a.T @ dy), initial=0.0) > self.eps_pinf:
            return None
        pos = np.maximum(dy, 0.0)
        neg = np.minimum(dy, 0.0)
        if np.any(~np.isfinite(prob.upper) & (pos > self.eps_pinf)):
            return None
        if np.any(~np.isfinite(prob.lower) & (neg < -self.eps_pinf)):
            return None
        support = float(
            np.sum(prob.upper[pos > 0] * pos[pos > 0]) + np.sum(prob.lower[neg < 0] * neg[neg < 0])
        )
        if support <= -self.eps_pinf:
            return dy
        return None

    def _try_polish(self, prob: QpProblem, sol: QpSolution) -> QpSolution | None:
        """Equality-KKT refinement on the active set implied by the dual signs."""
        m = prob.g.shape[0]
        cdim = prob.a.shape[0]
        if cdim == 0:
            x = np.linalg.solve(prob.h + self.polish_reg * np.eye(m), -prob.g)
            return QpSolution(
                primal=x,
                dual=sol.dual,
                status=OPTIMAL,
                iterations=sol.iterations,
                primal_residual=0.0,
                dual_residual=float(np.max(np.abs(prob.h @ x + prob.g), initial=0.0)),
                complementarity=0.0,
            )
        low_act = sol.dual < -1e-12
        upp_act = sol.dual > 1e-12
        act = low_act | upp_act
        a_act = prob.a[act]
        b_act = np.where(low_act, prob.lower, prob.upper)[act]
        k = a_act.shape[0]
        kkt = np.zeros((m + k, m + k))
        kkt[:m, :m] = prob.h + self.polish_reg * np.eye(m)
        kkt[:m, m:] = a_act.T
        kkt[m:, :m] = a_act
        kkt[m:, m:] = -self.polish_reg * np.eye(k)
        rhs = np.concatenate([-prob.g, b_act])
        try:
            sol_vec = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            return None
        # one step of iterative refinement against the unregularized KKT
        kkt0 = kkt.copy()
        kkt0[:m, :m] -= self.polish_reg * np.eye(m)
        kkt0[m:, m:] += self.polish_reg * np.eye(k)
        try:
            sol_vec = sol_vec + np.linalg.solve(kkt, rhs - kkt0 @ sol_vec)
        except np.linalg.LinAlgError:
            return None
        x = sol_vec[:m]
        nu = sol_vec[m:]
        dual = np.zeros(cdim)
        dual[act] = nu
        # dual signs must stay consistent with the guessed active sides
        if np.any(dual[low_act] > 1e-9) or np.any(dual[upp_act] < -1e-9):
            return None
        ax = prob.a @ x
        if np.any(ax < prob.lower - 1e-9) or np.any(ax > prob.upper + 1e-9):
            return None
        r_prim = float(np.max(np.abs(ax - np.clip(ax, prob.lower, prob.upper)), initial=0.0))
        r_dual = float(np.max(np.abs(prob.h @ x + prob.g + prob.a.T @ dual), initial=0.0))
        if r_dual > self.eps_abs or r_prim > self.eps_abs:
            return None
        return QpSolution(
            primal=x,
            dual=dual,
            status=OPTIMAL,
            iterations=sol.iterations,
            primal_residual=r_prim,
            dual_residual=r_dual,
            complementarity=_complementarity(prob, x, dual),
        )


def _complementarity(prob: QpProblem, x, y) -> float:
    if not y.size:
        return 0.0
    ax = prob.a @ x
    up = np.maximum(y, 0.0) * np.where(np.isfinite(prob.upper), np.abs(prob.upper - ax), 0.0)
    lo = np.maximum(-y, 0.0) * np.where(np.isfinite(prob.lower), np.abs(ax - prob.lower), 0.0)
    bad_up = np.maximum(y, 0.0) * (~np.isfinite(prob.upper))
    bad_lo = np.maximum(-y, 0.0) * (~np.isfinite(prob.lower))
    return float(np.max(up + lo + bad_up + bad_lo, initial=0.0))


def solve_qp(prob: QpProblem, warm: QpSolution | None = None, **settings) -> QpSolution:
    """One-shot convenience wrapper around QpSolver."""
    return QpSolver(**settings).solve(prob, warm)
