"""SO(3) exponential/logarithm maps and the inverse right Jacobian.

Rotation matrices are plain (3, 3) float arrays; rotation vectors are
(3,) arrays in radians with the canonical representative ||phi|| <= pi.
All functions are pure and reentrant.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DomainError",
    "hat",
    "vee",
    "exp_map",
    "log_map",
    "right_jacobian_inv",
    "check_rotation",
    "is_rotation",
]

# Switch points below which closed forms are replaced by Taylor series to
# avoid 0/0 cancellation; switch error stays below 1e-12.
_EXP_LOG_EPS = 1e-8
_JRINV_EPS = 1e-4


class DomainError(ValueError):
    """Input outside the domain of a Lie-group map (e.g. rotation angle at pi)."""


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def vee(m) -> np.ndarray:
    """Inverse of hat. Raises ValueError if m is not skew-symmetric (1e-10)."""
    m = np.asarray(m, dtype=float)
    if np.max(np.abs(m + m.T)) > 1e-10:
        raise ValueError("vee expects a skew-symmetric matrix")
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_map(phi) -> np.ndarray:
    """Rotation matrix for a rotation vector (Rodrigues form).

    Falls back to the second-order series below the small-angle switch.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = hat(phi)
    if theta < _EXP_LOG_EPS:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def log_map(r) -> np.ndarray:
    """Rotation vector of a rotation matrix, angle strictly below pi.

    Raises DomainError when trace(R) <= -1 + 1e-9 (angle at pi): the
    canonical representative is not unique there and downstream Jacobians
    are singular.
    """
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr <= -1.0 + 1e-9:
        raise DomainError("log_map: rotation angle at pi is outside the domain")
    c = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    theta = np.arccos(c)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < _EXP_LOG_EPS:
        # 0.5 * (1 + theta^2/6) * vee(R - R^T); leading term suffices here
        return 0.5 * w
    return (theta / (2.0 * np.sin(theta))) * w


def right_jacobian_inv(phi) -> np.ndarray:
    """Inverse right Jacobian of SO(3).

    Maps additive perturbations of a rotation vector to multiplicative
    (right) perturbations: Log(Exp(phi) Exp(d)) ~ phi + right_jacobian_inv(phi) @ d.
    Diverges at ||phi|| = pi; inputs within 1e-6 of pi raise DomainError.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    if theta >= np.pi - 1e-6:
        raise DomainError("right_jacobian_inv: ||phi|| too close to pi")
    k = hat(phi)
    if theta < _JRINV_EPS:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    coeff = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * k + coeff * (k @ k)


def is_rotation(m, tol: float = 1e-10) -> bool:
    """True if m is orthonormal with determinant 1 within tol per entry."""
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        return False
    if np.max(np.abs(m.T @ m - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(m) - 1.0) <= tol


def check_rotation(m, tol: float = 1e-10) -> np.ndarray:
    """Validate and return m as a rotation matrix; raises ValueError otherwise."""
    m = np.asarray(m, dtype=float)
    if not is_rotation(m, tol):
        raise ValueError("matrix is not a valid rotation (orthonormality/det check failed)")
    return m
