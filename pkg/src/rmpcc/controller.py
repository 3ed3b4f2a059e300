"""Receding-horizon contouring controller.

State x = [q, s, v_s], input u = [qdot, vdot_s]. The progress variable s
rides a double integrator driven by the virtual input vdot_s; joint
velocities drive the arm kinematically. Each control cycle solves a
Gauss-Newton SQP: linearize tracking errors and barrier constraints along
the predicted trajectory, condense over the (exactly linear) dynamics into
a dense QP in the stacked inputs, take full steps.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .barriers import BarrierKind, ConstraintRow, cbf_row
from .distancefield import ObstacleSphere, env_link_distances, self_min_distance
from .kinematics import (
    RobotModel,
    forward_kinematics,
    geometric_jacobian,
    jacobian_partials,
    manipulability,
)
from .liegroup import DomainError, log_map, right_jacobian_inv
from .pathspline import PathSpline
from .qpsolver import MAX_ITER, OPTIMAL, PRIMAL_INFEASIBLE, QpProblem, QpSolution, QpSolver

__all__ = [
    "OcpState",
    "OcpInput",
    "Weights",
    "BarrierConfig",
    "OcpConfig",
    "SolveStats",
    "SolveResult",
    "PathErrors",
    "ErrorJacobians",
    "discrete_dynamics",
    "path_errors",
    "error_jacobians",
    "stage_cost_quadratics",
    "build_stage_constraints",
    "RmpccController",
]


@dataclass(frozen=True)
class OcpState:
    q: np.ndarray
    s: float
    v_s: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, [self.s, self.v_s]])

    @staticmethod
    def from_vector(v) -> "OcpState":
        v = np.asarray(v, dtype=float)
        return OcpState(q=v[:-2].copy(), s=float(v[-2]), v_s=float(v[-1]))


@dataclass(frozen=True)
class OcpInput:
    qd: np.ndarray
    vd_s: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.qd, [self.vd_s]])

    @staticmethod
    def from_vector(v) -> "OcpInput":
        v = np.asarray(v, dtype=float)
        return OcpInput(qd=v[:-1].copy(), vd_s=float(v[-1]))


@dataclass
class Weights:
    """Cost weights and horizon parameters (all weights strictly positive)."""

    w_c: float = 500.0
    w_l: float = 100.0
    w_vs: float = 2.0
    w_o: float = 100.0
    w_qd: float = 0.002
    w_dqd: float = 10.0
    w_vds: float = 0.1
    v_desired: float = 0.05
    horizon: int = 10
    dt: float = 0.01

    def __post_init__(self):
        for name in ("w_c", "w_l", "w_vs", "w_o", "w_qd", "w_dqd", "w_vds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class BarrierConfig:
    eps_sing: float = 0.018
    eps_self: float = 0.01
    eps_env: float = 0.01
    delta_sing: float = 0.01
    delta_self: float = 0.01
    delta_env: float = 0.01
    enabled: bool = True


@dataclass
class OcpConfig:
    weights: Weights = field(default_factory=Weights)
    barriers: BarrierConfig = field(default_factory=BarrierConfig)
    sqp_iters: int = 2
    s_min: float = 0.0
    s_max: float = 1.0
    v_s_min: float = -0.2
    v_s_max: float = 0.2
    vd_s_min: float = -2.0
    vd_s_max: float = 2.0
    mu_gradient_mode: str = "analytic"  # hot loop; "fd" available and FD-checked


@dataclass
class SolveStats:
    """Per-phase wall times in seconds (distance queries, linearization, QP)."""

    t_total: float = 0.0
    t_dist: float = 0.0
    t_lin: float = 0.0
    t_qp: float = 0.0
    qp_iterations: int = 0


@dataclass
class SolveResult:
    u_sequence: list[OcpInput]
    x_prediction: list[OcpState]
    status: str  # optimal | max_iter | infeasible_qp
    stats: SolveStats


@dataclass(frozen=True)
class PathErrors:
    e: np.ndarray
    e_l: np.ndarray
    e_c: np.ndarray
    e_o: np.ndarray


@dataclass(frozen=True)
class ErrorJacobians:
    de_c: np.ndarray  # 3 x (n+2)
    de_l: np.ndarray
    de_o: np.ndarray


def discrete_dynamics(x: OcpState, u: OcpInput, dt: float) -> OcpState:
    """Exact zero-order-hold step of the linear state model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return OcpState(
        q=x.q + u.qd * dt,
        s=x.s + x.v_s * dt + 0.5 * u.vd_s * dt * dt,
        v_s=x.v_s + u.vd_s * dt,
    )


def _stage_geometry(spline: PathSpline, model: RobotModel, x: OcpState):
    ee, frames = forward_kinematics(model, x.q)
    p_r, dp, _ = spline.sample_position(x.s)
    t_hat, dt_hat = spline.unit_tangent(x.s)
    r_r, phi_prime = spline.sample_orientation(x.s)
    return ee, frames, p_r, dp, t_hat, dt_hat, r_r, phi_prime


def path_errors(spline: PathSpline, model: RobotModel, x: OcpState) -> PathErrors:
    """Total, lag, contouring, and orientation errors at a state.

    e = p_r(s) - p_ee; the lag component is the projection onto the unit
    tangent, contouring its orthogonal remainder; e_o = Log(R_r' R_ee).
    """
    ee, _, p_r, _, t_hat, _, r_r, _ = _stage_geometry(spline, model, x)
    e = p_r - ee.position
    e_l = (t_hat @ e) * t_hat
    e_c = e - e_l
    e_o = log_map(r_r.T @ ee.orientation)
    return PathErrors(e=e, e_l=e_l, e_c=e_c, e_o=e_o)


def error_jacobians(
    spline: PathSpline, model: RobotModel, x: OcpState
) -> tuple[PathErrors, ErrorJacobians]:
    """Analytic Jacobians of the contouring/lag/orientation errors w.r.t. x.

    Layout of each Jacobian: columns [q (n), s, v_s]. The orientation block
    uses the inverse right Jacobian at e_o; the s column applies the
    world-frame reference angular rate R_r @ phi_prime.
    """
    ee, frames, p_r, dp, t_hat, dt_hat, r_r, phi_prime = _stage_geometry(spline, model, x)
    n = model.n
    jac = geometric_jacobian(model, x.q, frames)
    j_posi, j_ori = jac[0:3], jac[3:6]

    e = p_r - ee.position
    e_l = (t_hat @ e) * t_hat
    e_c = e - e_l
    rel = r_r.T @ ee.orientation
    e_o = log_map(rel)
    if np.linalg.norm(e_o) >= np.pi - 1e-3:
        raise DomainError("orientation error too close to a half turn")

    de_dx = np.zeros((3, n + 2))
    de_dx[:, :n] = -j_posi
    de_dx[:, n] = dp

    dt_dx = np.zeros((3, n + 2))
    dt_dx[:, n] = dt_hat

    de_l = (t_hat @ e) * dt_dx + np.outer(t_hat, e) @ dt_dx + np.outer(t_hat, t_hat) @ de_dx
    de_c = de_dx - de_l

    jr_inv = right_jacobian_inv(e_o)
    de_o = np.zeros((3, n + 2))
    de_o[:, :n] = jr_inv @ ee.orientation.T @ j_ori
    de_o[:, n] = -jr_inv @ ee.orientation.T @ (r_r @ phi_prime)

    errors = PathErrors(e=e, e_l=e_l, e_c=e_c, e_o=e_o)
    return errors, ErrorJacobians(de_c=de_c, de_l=de_l, de_o=de_o)


def stage_cost_quadratics(
    errors: PathErrors,
    jacs: ErrorJacobians,
    x: OcpState,
    u: OcpInput | None,
    u_prev: OcpInput | None,
    weights: Weights,
):
    """Cost value, gradient and Gauss-Newton Hessian over (x, u) at a stage.

    u=None evaluates the terminal cost (state terms only). u_prev=None
    means the velocity-difference residual is zero for this stage.
    Hessians are sums of 2*w*J'J per residual; residual curvature dropped.
    """
    n = x.q.shape[0]
    nx = n + 2
    w = weights

    r_vs = w.v_desired - x.v_s
    j_vs = np.zeros(nx)
    j_vs[n + 1] = -1.0

    value = (
        w.w_c * errors.e_c @ errors.e_c
        + w.w_l * errors.e_l @ errors.e_l
        + w.w_o * errors.e_o @ errors.e_o
        + w.w_vs * r_vs * r_vs
    )
    grad_x = 2.0 * (
        w.w_c * jacs.de_c.T @ errors.e_c
        + w.w_l * jacs.de_l.T @ errors.e_l
        + w.w_o * jacs.de_o.T @ errors.e_o
        + w.w_vs * r_vs * j_vs
    )
    hess_x = 2.0 * (
        w.w_c * jacs.de_c.T @ jacs.de_c
        + w.w_l * jacs.de_l.T @ jacs.de_l
        + w.w_o * jacs.de_o.T @ jacs.de_o
        + w.w_vs * np.outer(j_vs, j_vs)
    )

    if u is None:
        return float(value), grad_x, hess_x

    nu = n + 1
    grad_u = np.zeros(nu)
    hess_u = np.zeros((nu, nu))
    dqd = u.qd - u_prev.qd if u_prev is not None else np.zeros(n)
    value += w.w_qd * u.qd @ u.qd + w.w_dqd * dqd @ dqd + w.w_vds * u.vd_s**2
    grad_u[:n] = 2.0 * (w.w_qd * u.qd + w.w_dqd * dqd)
    grad_u[n] = 2.0 * w.w_vds * u.vd_s
    hess_u[:n, :n] = 2.0 * (w.w_qd + w.w_dqd) * np.eye(n) if u_prev is not None else 2.0 * w.w_qd * np.eye(n)
    hess_u[n, n] = 2.0 * w.w_vds

    grad = np.concatenate([grad_x, grad_u])
    hess = np.zeros((nx + nu, nx + nu))
    hess[:nx, :nx] = hess_x
    hess[nx:, nx:] = hess_u
    return float(value), grad, hess


def build_stage_constraints(
    model: RobotModel,
    x: OcpState,
    obs: ObstacleSphere | None,
    cfg: BarrierConfig,
    stage: int,
    frames=None,
    mu_gradient_mode: str = "analytic",
    self_distance_fn=None,
    env_distance_fn=None,
) -> list[ConstraintRow]:
    """Barrier rows at a stage's nominal state: singularity, self-collision,
    then one row per capsule against the obstacle (omitted when obs is None).

    Distance backends are injectable; the analytic capsule evaluators are
    the defaults. Rows are ordered deterministically.
    """
    if frames is None:
        _, frames = forward_kinematics(model, x.q)
    rows = []

    mu = manipulability(model, x.q)
    grad_mu = _mu_gradient(model, x.q, frames, mu, mode=mu_gradient_mode)
    rows.append(
        cbf_row(mu - cfg.eps_sing, grad_mu, cfg.delta_sing, stage, BarrierKind.SINGULARITY)
    )

    if self_distance_fn is None:
        d_self, grad_self = self_min_distance(model, x.q, frames=frames)
    else:
        d_self, grad_self = self_distance_fn(x.q, frames)
    rows.append(
        cbf_row(d_self - cfg.eps_self, grad_self, cfg.delta_self, stage, BarrierKind.SELF_COLLISION)
    )

    if obs is not None:
        if env_distance_fn is None:
            dists = env_link_distances(model, x.q, obs, frames=frames)
        else:
            dists = env_distance_fn(x.q, obs, frames)
        for d_env, grad_env in dists:
            rows.append(
                cbf_row(
                    d_env - obs.radius - cfg.eps_env,
                    grad_env,
                    cfg.delta_env,
                    stage,
                    BarrierKind.ENV_COLLISION,
                )
            )
    return rows


def _mu_gradient(model, q, frames, mu, mode):
    if mu <= 1e-12:
        raise ValueError("manipulability gradient at a singularity")
    if mode == "analytic":
        jac = geometric_jacobian(model, q, frames)
        djac = jacobian_partials(model, q, frames)
        minv = np.linalg.inv(jac @ jac.T)
        return np.array([mu * np.trace(minv @ djac[i] @ jac.T) for i in range(model.n)])
    step = 1e-6
    grad = np.zeros(model.n)
    for i in range(model.n):
        e = np.zeros(model.n)
        e[i] = step
        grad[i] = (manipulability(model, q + e) - manipulability(model, q - e)) / (2 * step)
    return grad


class RmpccController:
    """Stateful 100 Hz contouring controller; one instance per control loop."""

    def __init__(
        self,
        model: RobotModel,
        spline: PathSpline,
        config: OcpConfig | None = None,
        self_distance_fn=None,
        env_distance_fn=None,
    ):
        self.model = model
        self.spline = spline
        self.config = config or OcpConfig()
        self.self_distance_fn = self_distance_fn
        self.env_distance_fn = env_distance_fn
        self.qp = QpSolver()
        self._warm_u: np.ndarray | None = None  # (N-1, nu)
        self._warm_qp: QpSolution | None = None
        n = model.n
        self.nx = n + 2
        self.nu = n + 1
        threads = int(os.environ.get("RMPCC_THREADS", "1"))
        self._pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    # -- model matrices -------------------------------------------------
    def _x_bounds(self):
        cfg = self.config
        lo = np.concatenate([self.model.q_min, [cfg.s_min, cfg.v_s_min]])
        hi = np.concatenate([self.model.q_max, [cfg.s_max, cfg.v_s_max]])
        return lo, hi

    def _u_bounds(self):
        cfg = self.config
        lo = np.concatenate([self.model.qd_min, [cfg.vd_s_min]])
        hi = np.concatenate([self.model.qd_max, [cfg.vd_s_max]])
        return lo, hi

    def _b_matrix(self, dt):
        n = self.model.n
        b = np.zeros((self.nx, self.nu))
        b[:n, :n] = dt * np.eye(n)
        b[n, n] = 0.5 * dt * dt
        b[n + 1, n] = dt
        return b

    def _rollout(self, x0: OcpState, u_seq: np.ndarray) -> list[OcpState]:
        dt = self.config.weights.dt
        xs = [x0]
        for uv in u_seq:
            xs.append(discrete_dynamics(xs[-1], OcpInput.from_vector(uv), dt))
        return xs

    # -- solve -----------------------------------------------------------
    def solve(self, x0: OcpState, obs: ObstacleSphere | None = None) -> SolveResult:
        t_start = time.perf_counter()
        cfg = self.config
        w = cfg.weights
        n_stages = w.horizon - 1  # inputs u_1..u_{N-1}
        nu, nx = self.nu, self.nx
        dt = w.dt

        x_lo, x_hi = self._x_bounds()
        u_lo, u_hi = self._u_bounds()
        x0 = OcpState.from_vector(np.clip(x0.as_vector(), x_lo, x_hi))

        if self._warm_u is None or self._warm_u.shape != (n_stages, nu):
            u_seq = np.zeros((n_stages, nu))
        else:
            u_seq = np.vstack([self._warm_u[1:], self._warm_u[-1:]])

        stats = SolveStats()
        status = OPTIMAL
        b_mat = self._b_matrix(dt)

        for _ in range(cfg.sqp_iters):
            xs = self._rollout(x0, u_seq)

            t0 = time.perf_counter()
            rows: list[ConstraintRow] = []
            if cfg.barriers.enabled:
                for k in range(n_stages):
                    rows.extend(
                        build_stage_constraints(
                            self.model,
                            xs[k],
                            obs,
                            cfg.barriers,
                            stage=k,
                            mu_gradient_mode=cfg.mu_gradient_mode,
                            self_distance_fn=self.self_distance_fn,
                            env_distance_fn=self.env_distance_fn,
                        )
                    )
            stats.t_dist += time.perf_counter() - t0

            t0 = time.perf_counter()
            quads = self._stage_quadratics(xs, u_seq)
            prob = self._condense(xs, u_seq, quads, rows, b_mat, x_lo, x_hi, u_lo, u_hi)
            stats.t_lin += time.perf_counter() - t0

            t0 = time.perf_counter()
            sol = self.qp.solve(prob, warm=self._warm_qp)
            stats.t_qp += time.perf_counter() - t0
            stats.qp_iterations += sol.iterations

            if sol.status == PRIMAL_INFEASIBLE:
                status = "infeasible_qp"
                self._warm_qp = None
                break
            if sol.status == MAX_ITER:
                status = MAX_ITER
            self._warm_qp = sol
            u_seq = u_seq + sol.primal.reshape(n_stages, nu)

        xs = self._rollout(x0, u_seq)
        self._warm_u = u_seq.copy()
        stats.t_total = time.perf_counter() - t_start
        return SolveResult(
            u_sequence=[OcpInput.from_vector(uv) for uv in u_seq],
            x_prediction=xs,
            status=status,
            stats=stats,
        )

    def _stage_quadratics(self, xs, u_seq):
        """Errors/Jacobians -> per-stage cost quadratics, terminal entry last."""
        w = self.config.weights
        n_stages = u_seq.shape[0]

        def one(k):
            if k < n_stages:
                u = OcpInput.from_vector(u_seq[k])
                u_prev = OcpInput.from_vector(u_seq[k - 1]) if k >= 1 else None
                errors, jacs = error_jacobians(self.spline, self.model, xs[k])
                return stage_cost_quadratics(errors, jacs, xs[k], u, u_prev, w)
            errors, jacs = error_jacobians(self.spline, self.model, xs[k])
            return stage_cost_quadratics(errors, jacs, xs[k], None, None, w)

        ks = range(n_stages + 1)
        if self._pool is not None:
            return list(self._pool.map(one, ks))
        return [one(k) for k in ks]

    def _condense(self, xs, u_seq, quads, rows, b_mat, x_lo, x_hi, u_lo, u_hi):
        """Eliminate states through the linear dynamics; QP in stacked input deviations."""
        w = self.config.weights
        n = self.model.n
        nu, nx = self.nu, self.nx
        n_stages = u_seq.shape[0]
        nv = n_stages * nu
        dt = w.dt

        # sensitivities E_k = dx_k/dU, built incrementally: E_{k+1} = A E_k + B at block k.
        sens = [np.zeros((nx, nv))]
        for k in range(n_stages):
            e_next = sens[k].copy()
            e_next[n] += dt * e_next[n + 1]  # A's only off-diagonal action: s += dt * v_s
            e_next[:, k * nu : (k + 1) * nu] += b_mat
            sens.append(e_next)

        h = np.zeros((nv, nv))
        g = np.zeros(nv)
        for k in range(1, n_stages + 1):
            quad = quads[k]
            grad, hess = quad[1], quad[2]
            e_k = sens[k]
            gx, hx = grad[:nx], hess[:nx, :nx]
            g += e_k.T @ gx
            h += e_k.T @ hx @ e_k
            if k < n_stages:
                sl = slice(k * nu, (k + 1) * nu)
                g[sl] += grad[nx:]
                h[sl, sl] += hess[nx:, nx:]
        # stage 0 input terms (state cost there is constant)
        grad0, hess0 = quads[0][1], quads[0][2]
        g[:nu] += grad0[nx:]
        h[:nu, :nu] += hess0[nx:, nx:]
        # exact off-diagonal coupling of the velocity-difference cost
        for k in range(1, n_stages):
            dqd = u_seq[k, :n] - u_seq[k - 1, :n]
            prev = slice((k - 1) * nu, (k - 1) * nu + n)
            cur = slice(k * nu, k * nu + n)
            g[prev] += -2.0 * w.w_dqd * dqd
            h[prev, prev] += 2.0 * w.w_dqd * np.eye(n)
            h[prev, cur] += -2.0 * w.w_dqd * np.eye(n)
            h[cur, prev] += -2.0 * w.w_dqd * np.eye(n)
        h = 0.5 * (h + h.T)

        a_blocks, lo_blocks, hi_blocks = [], [], []
        # input boxes (identity rows on each block)
        a_u = np.eye(nv)
        a_blocks.append(a_u)
        lo_blocks.append(np.concatenate([u_lo - u_seq[k] for k in range(n_stages)]))
        hi_blocks.append(np.concatenate([u_hi - u_seq[k] for k in range(n_stages)]))
        # state boxes for k = 2..N
        for k in range(1, n_stages + 1):
            xv = xs[k].as_vector()
            a_blocks.append(sens[k])
            lo_blocks.append(x_lo - xv)
            hi_blocks.append(x_hi - xv)
        # barrier rows: coeff_u . u_k + coeff_x . dx_k <= rhs
        if rows:
            a_bar = np.zeros((len(rows), nv))
            lo_bar = np.full(len(rows), -np.inf)
            hi_bar = np.empty(len(rows))
            for i, row in enumerate(rows):
                k = row.stage
                a_bar[i] = row.coeff_x @ sens[k]
                a_bar[i, k * nu : (k + 1) * nu] += row.coeff_u
                hi_bar[i] = row.rhs - row.coeff_u @ u_seq[k]
            a_blocks.append(a_bar)
            lo_blocks.append(lo_bar)
            hi_blocks.append(hi_bar)

        return QpProblem(
            h=h,
            g=g,
            a=np.vstack(a_blocks),
            lower=np.concatenate(lo_blocks),
            upper=np.concatenate(hi_blocks),
        )
