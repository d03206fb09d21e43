"""Pinhole camera with a rigid world-to-camera transform.

Convention: camera looks down +z, x right, y down; pixel centers sit at
integer coordinates plus 0.5; the principal point is the image center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError


@dataclass(frozen=True)
class Camera:
    pose: np.ndarray  # (4, 4) world -> camera rigid transform
    focal: float  # pixels
    resolution: tuple  # (width, height)
    near_clip: float = 0.05

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise StructuralError("pose must be a 4x4 matrix")
        w, h = self.resolution
        if w < 8 or h < 8:
            raise StructuralError("resolution components must be >= 8")
        if self.focal <= 0:
            raise StructuralError("focal must be positive")
        pose = pose.copy()
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "resolution", (int(w), int(h)))

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.tolist(),
            "focal": self.focal,
            "resolution": list(self.resolution),
            "near_clip": self.near_clip,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            pose=np.array(d["pose"], dtype=np.float64),
            focal=float(d["focal"]),
            resolution=tuple(d["resolution"]),
            near_clip=float(d.get("near_clip", 0.05)),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0), focal=64.0, resolution=(64, 64), near_clip=0.05) -> Camera:
    """Camera at ``eye`` looking toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm == 0:
        raise StructuralError("eye and target coincide")
    fwd = fwd / norm
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        # up parallel to forward; pick another axis
        upv = np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, upv)
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera axes in world coords
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = -rot @ eye
    return Camera(pose=pose, focal=focal, resolution=resolution, near_clip=near_clip)


def ring_rig(count, radius, center=(0.0, 0.0, 0.0), height=0.0, focal=64.0, resolution=(64, 64)):
    """Evenly spaced cameras on a circle, all aimed at ``center``."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(count):
        ang = 2.0 * np.pi * i / max(count, 1)
        eye = center + np.array([radius * np.sin(ang), height, -radius * np.cos(ang)])
        cams.append(look_at(eye, center, focal=focal, resolution=resolution))
    return cams
