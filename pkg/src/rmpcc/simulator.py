"""Closed-loop kinematic simulation: scenarios, baseline controller, metrics.

The plant is the kinematic model itself (no dynamics gap); the controller
runs once per tick and its first input is integrated exactly. A
time-parameterized tracking baseline (TT-MPC) shares the barrier
constraints and input costs but follows a clock-indexed reference instead
of optimizing the progress variable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .barriers import ConstraintRow
from .controller import (
    OcpConfig,
    OcpInput,
    OcpState,
    RmpccController,
    SolveResult,
    SolveStats,
    build_stage_constraints,
    discrete_dynamics,
    path_errors,
)
from .distancefield import ObstacleSphere, env_link_distances, self_min_distance
from .kinematics import RobotModel, forward_kinematics, geometric_jacobian, manipulability
from .liegroup import exp_map, log_map, right_jacobian_inv
from .pathspline import PathSpline, ViaPoint, build_spline
from .qpsolver import MAX_ITER, OPTIMAL, PRIMAL_INFEASIBLE, QpProblem, QpSolver

__all__ = [
    "ScenarioError",
    "SimulationAbort",
    "ObstacleTrack",
    "Scenario",
    "TraceRecord",
    "TraceLog",
    "MetricsReport",
    "TtMpcController",
    "run_closed_loop",
    "compute_metrics",
    "ee_accelerations",
    "lemniscate_scenario",
    "crossing_sphere_track",
]


class ScenarioError(ValueError):
    """Scenario fails validation (bad path, missing files, inconsistent data)."""


class SimulationAbort(RuntimeError):
    """Non-finite state mid-run; carries the offending tick index."""

    def __init__(self, tick: int, message: str, trace: "TraceLog | None" = None):
        super().__init__(f"tick {tick}: {message}")
        self.tick = tick
        self.trace = trace


@dataclass
class ObstacleTrack:
    """Piecewise-linear sphere-center schedule, clamped at both ends."""

    times: np.ndarray
    centers: np.ndarray
    radius: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.centers = np.asarray(self.centers, dtype=float)
        if self.times.ndim != 1 or self.centers.shape != (self.times.shape[0], 3):
            raise ScenarioError("obstacle track needs matching times and centers")
        if np.any(np.diff(self.times) <= 0):
            raise ScenarioError("obstacle track times must be strictly increasing")
        if self.radius <= 0:
            raise ScenarioError("obstacle radius must be positive")

    def at(self, t: float) -> ObstacleSphere:
        center = np.array(
            [np.interp(t, self.times, self.centers[:, i]) for i in range(3)]
        )
        return ObstacleSphere(center=center, radius=self.radius)


@dataclass
class Scenario:
    name: str
    via_points: list[ViaPoint]
    q0: np.ndarray
    duration: float
    dt: float = 0.01
    controller: str = "rmpcc"
    robot_path: str | None = None
    obstacle: ObstacleTrack | None = None
    seed: int = 0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")
        if self.controller not in ("rmpcc", "tt_mpc"):
            raise ScenarioError(f"unknown controller {self.controller!r}")


@dataclass
class TraceRecord:
    t: float
    q: np.ndarray
    qd: np.ndarray
    s: float
    vs: float
    vds: float
    ec: float
    eo: float
    mu: float
    dself: float
    denv: float
    ax: float
    status: str
    t_total: float
    t_dist: float
    t_lin: float
    t_qp: float


@dataclass
class TraceLog:
    n: int  # joint count
    records: list[TraceRecord] = field(default_factory=list)

    def header(self) -> str:
        qs = ",".join(f"q{i + 1}" for i in range(self.n))
        qds = ",".join(f"qd{i + 1}" for i in range(self.n))
        return f"t,{qs},{qds},s,vs,vds,ec,eo,mu,dself,denv,ax,status,T_total,T_dist,T_lin,T_qp"

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.header() + "\n")
            for r in self.records:
                fields = (
                    [r.t]
                    + list(r.q)
                    + list(r.qd)
                    + [r.s, r.vs, r.vds, r.ec, r.eo, r.mu, r.dself, r.denv, r.ax]
                )
                fh.write(
                    ",".join(f"{v:.17g}" for v in fields)
                    + f",{r.status}"
                    + "".join(f",{v:.17g}" for v in (r.t_total, r.t_dist, r.t_lin, r.t_qp))
                    + "\n"
                )

    @staticmethod
    def from_csv(path) -> "TraceLog":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            try:
                n = max(int(c[1:]) for c in header if c.startswith("q") and c[1:].isdigit())
            except ValueError as exc:
                raise ScenarioError(f"{path}: malformed trace header") from exc
            expected = 1 + 2 * n + 16
            if len(header) != expected:
                raise ScenarioError(f"{path}: trace header has {len(header)} columns, expected {expected}")
            log = TraceLog(n=n)
            for lineno, line in enumerate(fh, start=2):
                parts = line.strip().split(",")
                if len(parts) != expected:
                    raise ScenarioError(f"{path}:{lineno}: bad field count")
                vals = parts
                log.records.append(
                    TraceRecord(
                        t=float(vals[0]),
                        q=np.array([float(v) for v in vals[1 : 1 + n]]),
                        qd=np.array([float(v) for v in vals[1 + n : 1 + 2 * n]]),
                        s=float(vals[1 + 2 * n]),
                        vs=float(vals[2 + 2 * n]),
                        vds=float(vals[3 + 2 * n]),
                        ec=float(vals[4 + 2 * n]),
                        eo=float(vals[5 + 2 * n]),
                        mu=float(vals[6 + 2 * n]),
                        dself=float(vals[7 + 2 * n]),
                        denv=float(vals[8 + 2 * n]),
                        ax=float(vals[9 + 2 * n]),
                        status=vals[10 + 2 * n],
                        t_total=float(vals[11 + 2 * n]),
                        t_dist=float(vals[12 + 2 * n]),
                        t_lin=float(vals[13 + 2 * n]),
                        t_qp=float(vals[14 + 2 * n]),
                    )
                )
        return log


@dataclass
class MetricsReport:
    controller: str
    ticks: int
    max_vdot_ee: float
    mean_vdot_ee: float
    max_ec_cm: float
    mean_ec_cm: float
    max_eo: float
    mean_eo: float
    min_mu: float
    min_dself: float
    min_denv: float
    timing_ms: dict[str, tuple[float, float, float]]  # phase -> (min, max, mean)

    def to_text(self) -> str:
        lines = [
            f"controller={self.controller}",
            f"ticks={self.ticks}",
            f"max_vdot_ee_ms2={self.max_vdot_ee:.17g}",
            f"mean_vdot_ee_ms2={self.mean_vdot_ee:.17g}",
            f"max_ec_cm={self.max_ec_cm:.17g}",
            f"mean_ec_cm={self.mean_ec_cm:.17g}",
            f"max_eo_rad={self.max_eo:.17g}",
            f"mean_eo_rad={self.mean_eo:.17g}",
            f"min_mu={self.min_mu:.17g}",
            f"min_dself_m={self.min_dself:.17g}",
            f"min_denv_m={self.min_denv:.17g}",
        ]
        for phase, (lo, hi, mean) in self.timing_ms.items():
            lines.append(f"{phase}_min_ms={lo:.17g}")
            lines.append(f"{phase}_max_ms={hi:.17g}")
            lines.append(f"{phase}_mean_ms={mean:.17g}")
        return "\n".join(lines) + "\n"


def ee_accelerations(velocities: np.ndarray, dt: float) -> np.ndarray:
    """Per-tick acceleration magnitudes from end-effector velocity samples."""
    if len(velocities) < 2:
        return np.zeros(len(velocities))
    diffs = np.linalg.norm(np.diff(velocities, axis=0), axis=1) / dt
    return np.concatenate([[0.0], diffs])


def compute_metrics(trace: TraceLog, controller: str | None = None) -> MetricsReport:
    if len(trace.records) < 2:
        raise ValueError("need at least 2 ticks to compute metrics")
    ax = trace.column("ax")
    ec = trace.column("ec")
    eo = trace.column("eo")
    timing = {}
    for phase, col in (
        ("t_total", "t_total"),
        ("t_dist", "t_dist"),
        ("t_lin", "t_lin"),
        ("t_qp", "t_qp"),
    ):
        vals = trace.column(col) * 1e3
        timing[phase] = (float(vals.min()), float(vals.max()), float(vals.mean()))
    return MetricsReport(
        controller=controller or "unknown",
        ticks=len(trace.records),
        max_vdot_ee=float(ax.max()),
        mean_vdot_ee=float(ax.mean()),
        max_ec_cm=float(ec.max() * 100.0),
        mean_ec_cm=float(ec.mean() * 100.0),
        max_eo=float(eo.max()),
        mean_eo=float(eo.mean()),
        min_mu=float(trace.column("mu").min()),
        min_dself=float(trace.column("dself").min()),
        min_denv=float(trace.column("denv").min()),
        timing_ms=timing,
    )


class TtMpcController:
    """Trajectory-tracking baseline: clock-indexed reference, same barriers.

    Decision variables are the joint velocities only; the reference pose is
    sampled at s_ref(t) = clamp(v_desired * t, 0, 1) for each horizon stage.
    """

    def __init__(self, model: RobotModel, spline: PathSpline, config: OcpConfig | None = None,
                 self_distance_fn=None, env_distance_fn=None):
        self.model = model
        self.spline = spline
        self.config = config or OcpConfig()
        self.self_distance_fn = self_distance_fn
        self.env_distance_fn = env_distance_fn
        self.qp = QpSolver()
        self._warm_u: np.ndarray | None = None
        self._warm_qp = None

    def reference_s(self, t: float) -> float:
        return float(np.clip(self.config.weights.v_desired * t, 0.0, 1.0))

    def solve(self, x0: OcpState, t: float, obs: ObstacleSphere | None = None) -> SolveResult:
        t_start = time.perf_counter()
        cfg = self.config
        w = cfg.weights
        n = self.model.n
        n_stages = w.horizon - 1
        dt = w.dt

        q0 = np.clip(x0.q, self.model.q_min, self.model.q_max)
        if self._warm_u is None or self._warm_u.shape != (n_stages, n):
            u_seq = np.zeros((n_stages, n))
        else:
            u_seq = np.vstack([self._warm_u[1:], self._warm_u[-1:]])

        s_refs = [self.reference_s(t + k * dt) for k in range(w.horizon)]
        stats = SolveStats()
        status = OPTIMAL

        for _ in range(cfg.sqp_iters):
            qs = [q0]
            for uv in u_seq:
                qs.append(qs[-1] + uv * dt)

            t0 = time.perf_counter()
            rows: list[ConstraintRow] = []
            if cfg.barriers.enabled:
                for k in range(n_stages):
                    xk = OcpState(q=qs[k], s=s_refs[k], v_s=0.0)
                    rows.extend(
                        build_stage_constraints(
                            self.model,
                            xk,
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
            prob = self._condense(qs, u_seq, s_refs, rows)
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
            u_seq = u_seq + sol.primal.reshape(n_stages, n)

        self._warm_u = u_seq.copy()
        stats.t_total = time.perf_counter() - t_start

        # informational s/v_s fields, kept consistent with the drift dynamics
        horizon_end = t + (w.horizon - 1) * dt
        if w.v_desired * horizon_end <= 1.0:
            vs, s_start = w.v_desired, self.reference_s(t)
        else:
            vs, s_start = 0.0, self.reference_s(t)
        qs = [q0]
        for uv in u_seq:
            qs.append(qs[-1] + uv * dt)
        x_pred = [
            OcpState(q=qs[k], s=min(s_start + vs * k * dt, 1.0) if vs else s_start, v_s=vs)
            for k in range(w.horizon)
        ]
        u_out = [OcpInput(qd=uv.copy(), vd_s=0.0) for uv in u_seq]
        return SolveResult(u_sequence=u_out, x_prediction=x_pred, status=status, stats=stats)

    def _condense(self, qs, u_seq, s_refs, rows) -> QpProblem:
        cfg = self.config
        w = cfg.weights
        n = self.model.n
        n_stages = u_seq.shape[0]
        nv = n_stages * n
        dt = w.dt

        h = np.zeros((nv, nv))
        g = np.zeros(nv)
        # sensitivity of q_k to inputs 0..k-1 is dt * I per block
        for k in range(1, n_stages + 1):
            qk = qs[k]
            ee, frames = forward_kinematics(self.model, qk)
            jac = geometric_jacobian(self.model, qk, frames)
            p_ref, _, _ = self.spline.sample_position(s_refs[k])
            r_ref, _ = self.spline.sample_orientation(s_refs[k])
            r_p = p_ref - ee.position
            e_o = log_map(r_ref.T @ ee.orientation)
            jp = -jac[0:3]
            jo = right_jacobian_inv(e_o) @ ee.orientation.T @ jac[3:6]
            grad_q = 2.0 * (w.w_c * jp.T @ r_p + w.w_o * jo.T @ e_o)
            hess_q = 2.0 * (w.w_c * jp.T @ jp + w.w_o * jo.T @ jo)
            # dq_k/du_j = dt*I for j < k: fold grad/hess through that map
            for j in range(k):
                sj = slice(j * n, (j + 1) * n)
                g[sj] += dt * grad_q
                for i in range(k):
                    si = slice(i * n, (i + 1) * n)
                    h[sj, si] += dt * dt * hess_q
        for k in range(n_stages):
            sk = slice(k * n, (k + 1) * n)
            uk = u_seq[k]
            dqd = uk - u_seq[k - 1] if k >= 1 else np.zeros(n)
            g[sk] += 2.0 * (w.w_qd * uk + w.w_dqd * dqd)
            h[sk, sk] += 2.0 * (w.w_qd + (w.w_dqd if k >= 1 else 0.0)) * np.eye(n)
            if k >= 1:
                sp = slice((k - 1) * n, k * n)
                g[sp] += -2.0 * w.w_dqd * dqd
                h[sp, sp] += 2.0 * w.w_dqd * np.eye(n)
                h[sp, sk] += -2.0 * w.w_dqd * np.eye(n)
                h[sk, sp] += -2.0 * w.w_dqd * np.eye(n)
        h = 0.5 * (h + h.T)

        a_blocks = [np.eye(nv)]
        lo_blocks = [np.concatenate([self.model.qd_min - u_seq[k] for k in range(n_stages)])]
        hi_blocks = [np.concatenate([self.model.qd_max - u_seq[k] for k in range(n_stages)])]
        # joint position boxes for k = 2..N
        for k in range(1, n_stages + 1):
            a_q = np.zeros((n, nv))
            for j in range(k):
                a_q[:, j * n : (j + 1) * n] = dt * np.eye(n)
            a_blocks.append(a_q)
            lo_blocks.append(self.model.q_min - qs[k])
            hi_blocks.append(self.model.q_max - qs[k])
        if rows:
            a_bar = np.zeros((len(rows), nv))
            lo_bar = np.full(len(rows), -np.inf)
            hi_bar = np.empty(len(rows))
            for i, row in enumerate(rows):
                k = row.stage
                cx = row.coeff_x[:n]
                for j in range(k):
                    a_bar[i, j * n : (j + 1) * n] += dt * cx
                a_bar[i, k * n : (k + 1) * n] += row.coeff_u[:n]
                hi_bar[i] = row.rhs - row.coeff_u[:n] @ u_seq[k]
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


def run_closed_loop(
    scenario: Scenario,
    model: RobotModel | None = None,
    ocp_config: OcpConfig | None = None,
) -> TraceLog:
    """Tick-sequential closed loop; the plant is the kinematic model itself.

    On a solver failure the previously applied input is reused. Non-finite
    states abort with the tick index.
    """
    from .fileio import load_robot  # local import to avoid a cycle

    if model is None:
        if scenario.robot_path is None:
            raise ScenarioError("scenario has no robot reference and no model was passed")
        model = load_robot(scenario.robot_path)
    try:
        spline = build_spline(scenario.via_points)
    except ValueError as exc:
        raise ScenarioError(f"invalid path: {exc}") from exc
    cfg = ocp_config or OcpConfig()
    if abs(cfg.weights.dt - scenario.dt) > 1e-12:
        cfg = replace(cfg, weights=replace(cfg.weights, dt=scenario.dt))

    if scenario.controller == "rmpcc":
        ctrl = RmpccController(model, spline, cfg)
    else:
        ctrl = TtMpcController(model, spline, cfg)

    rng = np.random.default_rng(scenario.seed)
    n_ticks = int(round(scenario.duration / scenario.dt)) + 1
    dt = scenario.dt
    trace = TraceLog(n=model.n)

    x = OcpState(q=np.asarray(scenario.q0, dtype=float).copy(), s=0.0, v_s=0.0)
    u_prev = OcpInput(qd=np.zeros(model.n), vd_s=0.0)
    v_ee_prev = np.zeros(3)

    for i in range(n_ticks):
        t = i * dt
        obs = scenario.obstacle.at(t) if scenario.obstacle is not None else None

        if scenario.controller == "rmpcc":
            result = ctrl.solve(x, obs)
        else:
            result = ctrl.solve(x, t, obs)

        if result.status == "infeasible_qp":
            u = u_prev
        else:
            u = result.u_sequence[0]
        if scenario.noise_std > 0:
            u = OcpInput(qd=u.qd + rng.normal(0.0, scenario.noise_std, model.n), vd_s=u.vd_s)

        ee, frames = forward_kinematics(model, x.q)
        jac = geometric_jacobian(model, x.q, frames)
        v_ee = jac[0:3] @ u.qd
        ax = 0.0 if i == 0 else float(np.linalg.norm(v_ee - v_ee_prev) / dt)

        if scenario.controller == "rmpcc":
            s_eval, vs_log, vds_log = x.s, x.v_s, u.vd_s
        else:
            s_eval = ctrl.reference_s(t)
            vs_log = cfg.weights.v_desired if cfg.weights.v_desired * t < 1.0 else 0.0
            vds_log = 0.0
        errs = path_errors(spline, model, OcpState(q=x.q, s=s_eval, v_s=0.0))
        mu = manipulability(model, x.q)
        d_self, _ = self_min_distance(model, x.q, frames=frames)
        if obs is not None:
            d_env = min(d for d, _ in env_link_distances(model, x.q, obs, frames=frames)) - obs.radius
        else:
            d_env = np.inf

        trace.records.append(
            TraceRecord(
                t=t,
                q=x.q.copy(),
                qd=u.qd.copy(),
                s=s_eval,
                vs=vs_log,
                vds=vds_log,
                ec=float(np.linalg.norm(errs.e_c)),
                eo=float(np.linalg.norm(errs.e_o)),
                mu=mu,
                dself=d_self,
                denv=float(d_env),
                ax=ax,
                status=result.status,
                t_total=result.stats.t_total,
                t_dist=result.stats.t_dist,
                t_lin=result.stats.t_lin,
                t_qp=result.stats.t_qp,
            )
        )

        x_next = discrete_dynamics(x, u, dt)
        if not np.all(np.isfinite(x_next.as_vector())):
            raise SimulationAbort(i, "state became non-finite", trace)
        x = x_next
        u_prev = u
        v_ee_prev = v_ee

    return trace


# -- scenario generation -----------------------------------------------

# End-effector pose of the shipped arm at its ready configuration; used as
# the default path center/base orientation so runs start on-path.
READY_Q = np.array([0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785])
READY_EE_POSITION = np.array([0.307019570052226, 0.0, 0.590269558276626])
READY_EE_ORIENTATION = np.array(
    [
        [0.707388269167199, -0.706825181105366, 0.0],
        [-0.706825181105366, -0.707388269167199, 0.0],
        [0.0, 0.0, -1.0],
    ]
)


def _figure_eight_point(u: float, scale: float, depth: float) -> np.ndarray:
    return np.array(
        [
            depth * np.sin(u),
            scale * np.sin(u),
            0.5 * scale * np.sin(2.0 * u),
        ]
    )


def _figure_eight_tangent(u: float, scale: float, depth: float) -> np.ndarray:
    return np.array(
        [
            depth * np.cos(u),
            scale * np.cos(u),
            scale * np.cos(2.0 * u),
        ]
    )


def lemniscate_scenario(
    scale: float = 0.25,
    n_points: int = 16,
    center: np.ndarray | None = None,
    base_orientation: np.ndarray | None = None,
    depth: float = 0.05,
    orientation_gain: float = 0.5,
    duration: float | None = None,
    controller: str = "rmpcc",
    obstacle: ObstacleTrack | None = None,
    robot_path: str | None = None,
    seed: int = 0,
) -> Scenario:
    """Closed figure-eight in a vertical plane with a sinusoidal depth offset.

    Via orientations sway about the world x-axis following the unwrapped
    in-plane tangent angle, scaled by orientation_gain and anchored to the
    base orientation, so the first via pose carries the base orientation
    itself. A figure-eight tangent has winding number zero, hence the
    orientation closes with the position. Deterministic.
    """
    if n_points < 8:
        raise ScenarioError("need at least 8 via points")
    if center is None:
        center = READY_EE_POSITION
    if base_orientation is None:
        base_orientation = READY_EE_ORIENTATION
    center = np.asarray(center, dtype=float)

    us = np.linspace(0.0, 2.0 * np.pi, n_points)
    tangents = [_figure_eight_tangent(float(u), scale, depth) for u in us]
    thetas = np.unwrap(np.arctan2([tg[2] for tg in tangents], [tg[1] for tg in tangents]))
    svals = np.linspace(0.0, 1.0, n_points)
    vias = []
    for u, s, theta in zip(us, svals, thetas):
        pos = center + _figure_eight_point(float(u), scale, depth)
        sway = orientation_gain * (theta - thetas[0])
        ori = exp_map([sway, 0.0, 0.0]) @ base_orientation
        vias.append(ViaPoint(position=pos, orientation=ori, s=float(s)))

    if duration is None:
        duration = 24.0  # nominal traversal at the default progress speed + margin
    return Scenario(
        name="lemniscate",
        via_points=vias,
        q0=READY_Q.copy(),
        duration=duration,
        controller=controller,
        obstacle=obstacle,
        robot_path=robot_path,
        seed=seed,
    )


def crossing_sphere_track(spline: PathSpline, block_s: float = 0.55, radius: float = 0.06,
                          t_approach: float = 6.0, t_blocked: float = 9.0,
                          t_release: float = 17.0, t_gone: float = 18.5,
                          standoff: float = 1.5) -> ObstacleTrack:
    """Obstacle schedule: far away, move onto the path point at block_s,
    dwell, retreat fast. The approach is perpendicular-ish to the path so
    the sphere never chases the waiting end-effector."""
    p_block, _, _ = spline.sample_position(block_s)
    t_hat, _ = spline.unit_tangent(block_s)
    away = np.cross(t_hat, np.array([0.0, 0.0, 1.0]))
    if np.linalg.norm(away) < 1e-6:
        away = np.cross(t_hat, np.array([0.0, 1.0, 0.0]))
    away /= np.linalg.norm(away)
    p_far = p_block + standoff * away
    times = [0.0, t_approach, t_blocked, t_release, t_gone]
    centers = [p_far, p_far, p_block, p_block, p_far]
    return ObstacleTrack(times=np.array(times), centers=np.array(centers), radius=radius)
