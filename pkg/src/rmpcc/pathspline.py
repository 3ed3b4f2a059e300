"""SE(3) reference paths parameterized by a normalized progress variable.

Positions follow a natural cubic spline through the via points; orientation
interpolates each pair of consecutive via rotations along a geodesic with a
cubic blend that has zero angular rate at both knots. The progress variable
s lives in [0, 1] and is not arc length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .liegroup import check_rotation, exp_map, log_map

__all__ = ["ViaPoint", "PathSpline", "build_spline"]

log = logging.getLogger(__name__)

# Tangents with smaller norm than this are treated as degenerate.
_TANGENT_EPS = 1e-9


@dataclass(frozen=True)
class ViaPoint:
    """A reference pose with its progress coordinate."""

    position: np.ndarray
    orientation: np.ndarray
    s: float


@dataclass(frozen=True)
class _OriSegment:
    r_start: np.ndarray  # reference rotation at the left knot
    phi_total: np.ndarray  # Log(R_i^T R_{i+1}), body frame of r_start


def _blend(t: float) -> tuple[float, float]:
    """Cubic blend alpha(t) = 3t^2 - 2t^3 and its t-derivative.

    Unique cubic with alpha(0) = alpha'(0) = alpha'(1) = 0 and alpha(1) = 1.
    """
    return 3.0 * t * t - 2.0 * t**3, 6.0 * t - 6.0 * t * t


@dataclass
class PathSpline:
    """Immutable sampled-pose reference path; safe for concurrent evaluation."""

    knots: np.ndarray  # (P,) strictly increasing, knots[0] = 0, knots[-1] = 1
    positions: np.ndarray  # (P, 3) via positions
    coeffs: np.ndarray  # (4, P-1, 3) cubic coefficients in (s - s_i) powers, c[0] cubic
    ori_segments: list[_OriSegment] = field(repr=False)

    def _segment(self, s: float) -> tuple[int, float]:
        """Active segment index and clamped s; left segment at interior knots."""
        if s < 0.0 or s > 1.0:
            level = logging.DEBUG if min(abs(s), abs(s - 1.0)) < 1e-6 else logging.WARNING
            log.log(level, "path parameter %.6g outside [0, 1]; clamped", s)
            s = min(max(s, 0.0), 1.0)
        i = int(np.searchsorted(self.knots, s, side="left")) - 1
        return max(i, 0), s

    def sample_position(self, s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position and its first/second s-derivatives on the active segment."""
        i, s = self._segment(s)
        u = s - self.knots[i]
        c3, c2, c1, c0 = self.coeffs[0, i], self.coeffs[1, i], self.coeffs[2, i], self.coeffs[3, i]
        p = ((c3 * u + c2) * u + c1) * u + c0
        dp = (3.0 * c3 * u + 2.0 * c2) * u + c1
        ddp = 6.0 * c3 * u + 2.0 * c2
        return p, dp, ddp

    def unit_tangent(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Unit tangent and its analytic s-derivative."""
        _, dp, ddp = self.sample_position(s)
        speed = np.linalg.norm(dp)
        if speed <= _TANGENT_EPS:
            raise ValueError("degenerate tangent: ||dp/ds|| ~ 0")
        t_hat = dp / speed
        dt_hat = (ddp - t_hat * (t_hat @ ddp)) / speed
        return t_hat, dt_hat

    def sample_orientation(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Reference rotation and the body-frame angular rate d(phi_i)/ds."""
        i, s = self._segment(s)
        seg = self.ori_segments[i]
        ds = self.knots[i + 1] - self.knots[i]
        t = (s - self.knots[i]) / ds
        a, da = _blend(t)
        r = seg.r_start @ exp_map(a * seg.phi_total)
        phi_prime = (da / ds) * seg.phi_total
        return r, phi_prime


def build_spline(via_points: list[ViaPoint]) -> PathSpline:
    """Natural cubic position spline + geodesic orientation blend through via poses.

    Rejects fewer than two via points, consecutive rotations within 1e-3 of a
    half turn, and paths containing a (near-)stationary tangent.
    """
    if len(via_points) < 2:
        raise ValueError("need at least 2 via points")
    knots = np.array([v.s for v in via_points], dtype=float)
    if np.any(np.diff(knots) <= 0):
        raise ValueError("via-point s values must be strictly increasing")
    if abs(knots[0]) > 1e-12 or abs(knots[-1] - 1.0) > 1e-12:
        raise ValueError("via-point s values must span [0, 1]")
    positions = np.array([np.asarray(v.position, dtype=float) for v in via_points])

    cs = CubicSpline(knots, positions, axis=0, bc_type="natural")
    coeffs = cs.c.copy()  # (4, P-1, 3)
    # Pin the left-knot value of each segment to the via position exactly.
    coeffs[3] = positions[:-1]

    ori_segments = []
    for a, b in zip(via_points[:-1], via_points[1:]):
        ra = check_rotation(a.orientation)
        rb = check_rotation(b.orientation)
        phi = log_map(ra.T @ rb)
        if np.linalg.norm(phi) >= np.pi - 1e-3:
            raise ValueError("consecutive via orientations too close to a half turn")
        ori_segments.append(_OriSegment(r_start=ra, phi_total=phi))

    spline = PathSpline(knots=knots, positions=positions, coeffs=coeffs, ori_segments=ori_segments)
    for i in range(len(knots) - 1):
        for u in np.linspace(knots[i], knots[i + 1], 50):
            _, dp, _ = spline.sample_position(float(u))
            if np.linalg.norm(dp) <= _TANGENT_EPS:
                raise ValueError("path has a stationary point (zero tangent)")
    return spline
