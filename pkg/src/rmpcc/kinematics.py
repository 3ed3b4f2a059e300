"""Serial-chain forward kinematics, geometric Jacobian, and manipulability.

A robot is a chain of revolute joints, each placed by, a fixed transform in
its parent frame followed by a rotation about a fixed axis. Link frame i is
the frame after joint i's rotation; capsules attach to link frames (link -1
denotes the static base/world frame). All quantities are world frame; the
angular Jacobian rows satisfy omega_world = J_ori @ qdot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liegroup import exp_map

__all__ = [
    "Joint",
    "Capsule",
    "RobotModel",
    "EePose",
    "FrameSet",
    "forward_kinematics",
    "geometric_jacobian",
    "point_jacobian",
    "manipulability",
    "manipulability_gradient",
    "rpy_matrix",
]


def rpy_matrix(rpy) -> np.ndarray:
    """Fixed-axis roll-pitch-yaw rotation: Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    r, p, y = rpy
    return exp_map([0.0, 0.0, y]) @ exp_map([0.0, p, 0.0]) @ exp_map([r, 0.0, 0.0])


@dataclass(frozen=True)
class Joint:
    """Revolute joint: fixed parent transform (xyz, rpy) then rotation about axis."""

    xyz: np.ndarray
    rpy: np.ndarray
    axis: np.ndarray

    def fixed_transform(self) -> tuple[np.ndarray, np.ndarray]:
        return rpy_matrix(self.rpy), np.asarray(self.xyz, dtype=float)


@dataclass(frozen=True)
class Capsule:
    """Collision capsule in a link frame; link -1 is the static base frame."""

    link: int
    p0: np.ndarray
    p1: np.ndarray
    radius: float


@dataclass(frozen=True)
class RobotModel:
    name: str
    joints: tuple[Joint, ...]
    q_min: np.ndarray
    q_max: np.ndarray
    qd_min: np.ndarray
    qd_max: np.ndarray
    capsules: tuple[Capsule, ...]
    ee_link: int
    ee_xyz: np.ndarray
    ee_rpy: np.ndarray

    def __post_init__(self):
        n = len(self.joints)
        if n < 1:
            raise ValueError("robot needs at least one joint")
        if np.any(np.asarray(self.q_min) >= np.asarray(self.q_max)):
            raise ValueError("q_min must be strictly below q_max")
        for c in self.capsules:
            if c.radius <= 0:
                raise ValueError("capsule radius must be positive")
            if not (-1 <= c.link < n):
                raise ValueError("capsule link index out of range")
        if not (0 <= self.ee_link < n):
            raise ValueError("ee_link out of range")

    @property
    def n(self) -> int:
        return len(self.joints)


@dataclass(frozen=True)
class EePose:
    position: np.ndarray
    orientation: np.ndarray


@dataclass(frozen=True)
class FrameSet:
    """World-frame chain state at a configuration q.

    rotations/origins are the link frames (after each joint's rotation);
    axes[i] is joint i's world-frame rotation axis and joint_origins[i] the
    point it passes through.
    """

    rotations: np.ndarray  # (n, 3, 3)
    origins: np.ndarray  # (n, 3)
    axes: np.ndarray  # (n, 3)
    joint_origins: np.ndarray  # (n, 3)

    def link_pose(self, link: int) -> tuple[np.ndarray, np.ndarray]:
        """World rotation/origin of a link frame; link -1 is the identity base."""
        if link == -1:
            return np.eye(3), np.zeros(3)
        return self.rotations[link], self.origins[link]


def forward_kinematics(model: RobotModel, q) -> tuple[EePose, FrameSet]:
    """Chain product of per-joint transforms; exposes per-link frames."""
    q = np.asarray(q, dtype=float)
    n = model.n
    rotations = np.empty((n, 3, 3))
    origins = np.empty((n, 3))
    axes = np.empty((n, 3))
    joint_origins = np.empty((n, 3))
    r = np.eye(3)
    p = np.zeros(3)
    for i, joint in enumerate(model.joints):
        r_fix, p_fix = joint.fixed_transform()
        p = p + r @ p_fix
        r = r @ r_fix
        axis = np.asarray(joint.axis, dtype=float)
        axes[i] = r @ axis
        joint_origins[i] = p
        r = r @ exp_map(axis * q[i])
        rotations[i] = r
        origins[i] = p
    frames = FrameSet(rotations, origins, axes, joint_origins)
    r_link, p_link = frames.link_pose(model.ee_link)
    ee_r = r_link @ rpy_matrix(model.ee_rpy)
    ee_p = p_link + r_link @ np.asarray(model.ee_xyz, dtype=float)
    return EePose(position=ee_p, orientation=ee_r), frames


def geometric_jacobian(model: RobotModel, q, frames: FrameSet | None = None) -> np.ndarray:
    """World-frame 6 x n Jacobian; rows 0:3 linear, 3:6 angular."""
    if frames is None:
        _, frames = forward_kinematics(model, q)
    ee, _ = _ee_from_frames(model, frames)
    jac = np.zeros((6, model.n))
    for i in range(model.ee_link + 1):
        z = frames.axes[i]
        jac[0:3, i] = np.cross(z, ee - frames.joint_origins[i])
        jac[3:6, i] = z
    return jac


def _ee_from_frames(model: RobotModel, frames: FrameSet) -> tuple[np.ndarray, np.ndarray]:
    r_link, p_link = frames.link_pose(model.ee_link)
    return p_link + r_link @ np.asarray(model.ee_xyz, dtype=float), r_link


def point_jacobian(model: RobotModel, frames: FrameSet, link: int, point_world) -> np.ndarray:
    """3 x n Jacobian of a world point rigidly attached to a link frame."""
    jac = np.zeros((3, model.n))
    if link == -1:
        return jac
    point_world = np.asarray(point_world, dtype=float)
    for i in range(link + 1):
        jac[:, i] = np.cross(frames.axes[i], point_world - frames.joint_origins[i])
    return jac


def manipulability(model: RobotModel, q, rows: tuple[int, ...] | None = None) -> float:
    """sqrt(det(J J^T)) over the selected Jacobian rows (default: all six).

    Returns 0 when rounding drives the determinant negative.
    """
    jac = geometric_jacobian(model, q)
    if rows is not None:
        jac = jac[list(rows)]
    det = np.linalg.det(jac @ jac.T)
    return float(np.sqrt(max(det, 0.0)))


def jacobian_partials(model: RobotModel, q, frames: FrameSet | None = None) -> np.ndarray:
    """d(geometric Jacobian)/dq as an (n, 6, n) array, world-frame cross-product form."""
    if frames is None:
        _, frames = forward_kinematics(model, q)
    ee, _ = _ee_from_frames(model, frames)
    n = model.n
    m = model.ee_link + 1
    z = frames.axes
    o = frames.joint_origins
    djac = np.zeros((n, 6, n))
    for i in range(m):
        dp_i = np.cross(z[i], ee - o[i])
        for j in range(m):
            if i <= j:
                dz = np.cross(z[i], z[j])
                djac[i, 0:3, j] = np.cross(dz, ee - o[j]) + np.cross(z[j], np.cross(z[i], ee - o[j]))
                djac[i, 3:6, j] = dz
            else:
                djac[i, 0:3, j] = np.cross(z[j], dp_i)
    return djac


def manipulability_gradient(
    model: RobotModel,
    q,
    rows: tuple[int, ...] | None = None,
    mode: str = "fd",
    fd_step: float = 1e-6,
) -> np.ndarray:
    """Gradient of the manipulability index.

    mode "fd" (default) uses central differences; mode "analytic" uses
    dmu/dq_i = mu * tr((J J^T)^-1 dJ/dq_i J^T). Raises at singularities
    (mu below 1e-12), where the index is not differentiable.
    """
    q = np.asarray(q, dtype=float)
    mu = manipulability(model, q, rows)
    if mu <= 1e-12:
        raise ValueError("manipulability gradient requested at a singularity")
    if mode == "fd":
        grad = np.zeros(model.n)
        for i in range(model.n):
            e = np.zeros(model.n)
            e[i] = fd_step
            grad[i] = (manipulability(model, q + e, rows) - manipulability(model, q - e, rows)) / (
                2.0 * fd_step
            )
        return grad
    if mode == "analytic":
        jac = geometric_jacobian(model, q)
        djac = jacobian_partials(model, q)
        sel = list(rows) if rows is not None else slice(None)
        jr = jac[sel]
        minv = np.linalg.inv(jr @ jr.T)
        grad = np.empty(model.n)
        for i in range(model.n):
            grad[i] = mu * np.trace(minv @ djac[i][sel] @ jr.T)
        return grad
    raise ValueError(f"unknown gradient mode {mode!r}")
