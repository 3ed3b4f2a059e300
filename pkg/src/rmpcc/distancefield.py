"""Differentiable minimum-distance evaluators for collision constraints.

Two backends share one interface: the default analytic capsule backend
(exact segment geometry, envelope-theorem gradients) and an MLP inference
backend for drop-in learned distance predictors. Distances are signed:
penetration is reported as a negative value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import FrameSet, RobotModel, forward_kinematics, point_jacobian

__all__ = [
    "ObstacleSphere",
    "segment_segment_distance",
    "point_segment_distance",
    "self_min_distance",
    "env_link_distances",
    "mlp_forward",
]

_PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class ObstacleSphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")


def segment_segment_distance(a0, a1, b0, b1):
    """Minimum distance between segments [a0, a1] and [b0, b1] with witness points.

    Degenerate (point) segments and parallel lines fall out of the clamped
    parametric solution.
    """
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    b0 = np.asarray(b0, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    u = a1 - a0
    v = b1 - b0
    w = a0 - b0
    a = u @ u
    b = u @ v
    c = v @ v
    d = u @ w
    e = v @ w

    if a <= _PARALLEL_EPS and c <= _PARALLEL_EPS:
        s, t = 0.0, 0.0
    elif a <= _PARALLEL_EPS:
        s, t = 0.0, float(np.clip(e / c, 0.0, 1.0))
    elif c <= _PARALLEL_EPS:
        s, t = float(np.clip(-d / a, 0.0, 1.0)), 0.0
    else:
        denom = a * c - b * b
        s = float(np.clip((b * e - c * d) / denom, 0.0, 1.0)) if denom > _PARALLEL_EPS else 0.0
        # closest t on line B for this s, then clamp and re-derive s
        t = (b * s + e) / c
        if t < 0.0:
            t = 0.0
            s = float(np.clip(-d / a, 0.0, 1.0))
        elif t > 1.0:
            t = 1.0
            s = float(np.clip((b - d) / a, 0.0, 1.0))
    wa = a0 + s * u
    wb = b0 + t * v
    return float(np.linalg.norm(wa - wb)), wa, wb


def point_segment_distance(p, b0, b1):
    """Distance from a point to segment [b0, b1] with the witness point on the segment."""
    p = np.asarray(p, dtype=float)
    b0 = np.asarray(b0, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    v = b1 - b0
    c = v @ v
    t = np.clip(((p - b0) @ v) / c, 0.0, 1.0) if c > _PARALLEL_EPS else 0.0
    wb = b0 + t * v
    return float(np.linalg.norm(p - wb)), wb


def _world_capsules(model: RobotModel, frames: FrameSet):
    caps = []
    for c in model.capsules:
        r, p = frames.link_pose(c.link)
        caps.append((c.link, p + r @ c.p0, p + r @ c.p1, c.radius))
    return caps


def _witness_direction(wa, wb):
    diff = wa - wb
    dist = np.linalg.norm(diff)
    if dist < 1e-12:
        # coincident witness points (deep penetration); gradient direction is
        # ill-defined, pick a fixed one to stay deterministic
        return np.array([1.0, 0.0, 0.0]), 0.0
    return diff / dist, dist


def self_min_distance(model: RobotModel, q, frames: FrameSet | None = None, softmin_temp: float = 0.0):
    """Minimum surface distance over non-adjacent capsule pairs and its q-gradient.

    The gradient treats the witness points as frozen (envelope theorem);
    ties on the minimum are broken by the lowest pair index. With
    softmin_temp > 0 the hard min is replaced by -T*logsumexp(-d/T) for
    smooth behavior near ties.
    """
    if frames is None:
        _, frames = forward_kinematics(model, q)
    caps = _world_capsules(model, frames)
    if not caps:
        raise ValueError("robot has no capsules")
    entries = []  # (distance, grad)
    for i in range(len(caps)):
        for j in range(i + 1, len(caps)):
            la, pa0, pa1, ra = caps[i]
            lb, pb0, pb1, rb = caps[j]
            if abs(la - lb) <= 1:
                continue  # adjacent links touch by construction
            _, wa, wb = segment_segment_distance(pa0, pa1, pb0, pb1)
            n, dist = _witness_direction(wa, wb)
            d = dist - ra - rb
            grad = n @ (point_jacobian(model, frames, la, wa) - point_jacobian(model, frames, lb, wb))
            entries.append((d, grad))
    if not entries:
        raise ValueError("no non-adjacent capsule pairs")
    if softmin_temp > 0.0:
        # -T log sum exp(-d/T), stabilized around the minimum
        dvals = np.array([d for d, _ in entries])
        wgt = np.exp(-(dvals - dvals.min()) / softmin_temp)
        wgt /= wgt.sum()
        d_soft = float(dvals.min() - softmin_temp * np.log(np.sum(np.exp(-(dvals - dvals.min()) / softmin_temp))))
        grad = np.sum([w * g for w, (_, g) in zip(wgt, entries)], axis=0)
        return d_soft, grad
    best = min(range(len(entries)), key=lambda k: (entries[k][0], k))
    return entries[best][0], entries[best][1]


def env_link_distances(model: RobotModel, q, obs: ObstacleSphere, frames: FrameSet | None = None):
    """Per-capsule distance from the obstacle sphere CENTER to the capsule surface.

    The sphere radius is not subtracted here; the barrier constraint carries
    it. Returns a list of (distance, q-gradient) in capsule order.
    """
    if frames is None:
        _, frames = forward_kinematics(model, q)
    center = np.asarray(obs.center, dtype=float)
    out = []
    for link, p0, p1, radius in _world_capsules(model, frames):
        _, wb = point_segment_distance(center, p0, p1)
        n, dist = _witness_direction(wb, center)
        d = dist - radius
        grad = n @ point_jacobian(model, frames, link, wb)
        out.append((d, grad))
    return out


def mlp_forward(layers, q):
    """Forward pass and input gradient of a rectifier MLP over [q, cos q, sin q].

    layers: ordered (weight, bias) pairs, hidden activations rectified,
    identity output. Returns (value, grad) with value shape (out,) and grad
    shape (out, n) by reverse accumulation through the piecewise-linear net
    and the feature-map Jacobian.
    """
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    if not layers:
        raise ValueError("empty MLP")
    if layers[0][0].shape[1] != 3 * n:
        raise ValueError(f"first layer expects input dim {layers[0][0].shape[1]}, feature dim is {3 * n}")
    x = np.concatenate([q, np.cos(q), np.sin(q)])
    jac = np.vstack([np.eye(n), -np.diag(np.sin(q)), np.diag(np.cos(q))])  # d(features)/dq
    for k, (w, b) in enumerate(layers):
        if w.shape[1] != x.shape[0]:
            raise ValueError(f"layer {k}: weight shape {w.shape} does not chain with input {x.shape}")
        x = w @ x + b
        jac = w @ jac
        if k < len(layers) - 1:
            mask = x > 0
            x = np.where(mask, x, 0.0)
            jac = jac * mask[:, None]
    return x, jac
