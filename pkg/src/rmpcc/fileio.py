"""Loaders and writers for the on-disk formats.

Formats (grammar in docs/file_formats.md):
  robot description  TOML: joints (xyz/rpy/axis/limits), capsules, ee offset
  via-point file     text, one pose per line: px py pz qw qx qy qz
  scenario           TOML: robot + via file refs, obstacle track, timing
  OCP config         TOML: weights, bounds, barrier deltas, solver knobs
  MLP weights        JSON: versioned ordered dense layers (row-major)
  trace CSV          fixed header, one closed-loop tick per row
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .kinematics import Capsule, Joint, RobotModel
from .liegroup import check_rotation
from .pathspline import ViaPoint

__all__ = [
    "load_robot",
    "load_via_points",
    "save_via_points",
    "quat_to_rotation",
    "rotation_to_quat",
    "load_mlp",
    "save_mlp",
    "load_toml",
]


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion (normalized internally)."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(r) -> np.ndarray:
    """(w, x, y, z) quaternion with nonnegative w from a rotation matrix."""
    r = check_rotation(r, tol=1e-8)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] >= r[2, 2]:
        s = np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def load_robot(path) -> RobotModel:
    """Parse a TOML robot description into a RobotModel."""
    path = Path(path)
    data = load_toml(path)
    joints = []
    q_min, q_max, qd_min, qd_max = [], [], [], []
    for j in data["joints"]:
        joints.append(
            Joint(
                xyz=np.asarray(j["xyz"], dtype=float),
                rpy=np.asarray(j["rpy"], dtype=float),
                axis=np.asarray(j["axis"], dtype=float),
            )
        )
        q_min.append(float(j["q_min"]))
        q_max.append(float(j["q_max"]))
        qd_max.append(float(j["qd_max"]))
        qd_min.append(float(j.get("qd_min", -j["qd_max"])))
    capsules = tuple(
        Capsule(
            link=int(c["link"]),
            p0=np.asarray(c["p0"], dtype=float),
            p1=np.asarray(c["p1"], dtype=float),
            radius=float(c["radius"]),
        )
        for c in data.get("capsules", [])
    )
    return RobotModel(
        name=data.get("name", path.stem),
        joints=tuple(joints),
        q_min=np.array(q_min),
        q_max=np.array(q_max),
        qd_min=np.array(qd_min),
        qd_max=np.array(qd_max),
        capsules=capsules,
        ee_link=int(data.get("ee_link", len(joints) - 1)),
        ee_xyz=np.asarray(data.get("ee_xyz", [0.0, 0.0, 0.0]), dtype=float),
        ee_rpy=np.asarray(data.get("ee_rpy", [0.0, 0.0, 0.0]), dtype=float),
    )


def load_via_points(path) -> list[ViaPoint]:
    """Read `px py pz qw qx qy qz` lines; s coordinates equally spaced on [0, 1]."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            rows.append([float(v) for v in parts])
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least 2 via points")
    svals = np.linspace(0.0, 1.0, len(rows))
    return [
        ViaPoint(position=np.array(row[:3]), orientation=quat_to_rotation(row[3:]), s=float(s))
        for row, s in zip(rows, svals)
    ]


def save_via_points(path, via_points) -> None:
    with open(path, "w") as fh:
        fh.write("# px py pz qw qx qy qz\n")
        for v in via_points:
            q = rotation_to_quat(v.orientation)
            fields = list(v.position) + list(q)
            fh.write(" ".join(f"{x:.17g}" for x in fields) + "\n")


_MLP_VERSION = 1


def load_mlp(path):
    """Load MLP weights (JSON container) into (layers, meta) for mlp_forward."""
    with open(path) as fh:
        data = json.load(fh)
    if data.get("version") != _MLP_VERSION:
        raise ValueError(f"unsupported MLP container version {data.get('version')!r}")
    layers = [
        (np.asarray(layer["weight"], dtype=float), np.asarray(layer["bias"], dtype=float))
        for layer in data["layers"]
    ]
    for w, b in layers:
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError("malformed MLP layer: weight must be (out, in), bias (out,)")
    if layers and layers[0][0].shape[1] != int(data["input_dim"]):
        raise ValueError("declared input_dim does not match first layer")
    if layers and layers[-1][0].shape[0] != int(data["output_dim"]):
        raise ValueError("declared output_dim does not match last layer")
    return layers


def save_mlp(path, layers) -> None:
    data = {
        "version": _MLP_VERSION,
        "input_dim": int(layers[0][0].shape[1]),
        "output_dim": int(layers[-1][0].shape[0]),
        "layers": [{"weight": np.asarray(w).tolist(), "bias": np.asarray(b).tolist()} for w, b in layers],
    }
    with open(path, "w") as fh:
        json.dump(data, fh)
