"""Pinhole camera model and camera-set JSON I/O.

Camera space is +z forward, y down. world_to_camera is a 4x4 rigid
transform in row-major order; its rotation block must be orthonormal.
A world point p maps to pixel (fx * x/z + cx, fy * y/z + cy) where
(x, y, z) = R p + t in camera space. Pixel (row r, col c) has its center
at continuous coordinates (c + 0.5, r + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera,
                                          dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise DataError("world_to_camera rotation block is not orthonormal")
        if not (self.near > 0 and self.far > self.near):
            raise DataError(f"invalid clip range near={self.near} far={self.far}")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def to_camera_space(self, points: np.ndarray) -> np.ndarray:
        """(N, 3) world points -> (N, 3) camera-space points."""
        return points @ self.rotation.T + self.translation

    def project(self, cam_points: np.ndarray) -> np.ndarray:
        """(N, 3) camera-space points -> (N, 2) continuous pixel coords."""
        z = cam_points[:, 2]
        return np.stack([
            self.fx * cam_points[:, 0] / z + self.cx,
            self.fy * cam_points[:, 1] / z + self.cy,
        ], axis=1)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """world_to_camera matrix for a camera at `eye` looking at `target`.

    `up` defaults to -y because camera y points down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(upv, fwd) * -1.0
    if np.linalg.norm(right) < 1e-12:
        upv = np.array([0.0, 0.0, 1.0])
        right = np.cross(upv, fwd) * -1.0
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    t = -R @ eye
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def load_cameras(path) -> list[Camera]:
    """Read a JSON array of camera objects."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read camera file {path}: {exc}") from exc
    if not isinstance(raw, list):
        raise DataError(f"camera file {path} must hold a JSON array")
    cams = []
    required = {"fx", "fy", "cx", "cy", "width", "height", "world_to_camera",
                "near", "far"}
    for i, obj in enumerate(raw):
        missing = required - set(obj)
        if missing:
            raise DataError(f"camera {i} missing keys: {sorted(missing)}")
        m = np.asarray(obj["world_to_camera"], dtype=np.float64)
        if m.size != 16:
            raise DataError(f"camera {i}: world_to_camera must have 16 entries")
        cams.append(Camera(
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            width=int(obj["width"]), height=int(obj["height"]),
            world_to_camera=m.reshape(4, 4),
            near=float(obj["near"]), far=float(obj["far"]),
        ))
    return cams


def save_cameras(cameras: list[Camera], path) -> None:
    out = [{
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "world_to_camera": [float(v) for v in cam.world_to_camera.reshape(-1)],
        "near": cam.near, "far": cam.far,
    } for cam in cameras]
    Path(path).write_text(json.dumps(out, indent=2))
