"""Synthetic ground-truth scene generation.

Scenes are sets of well-separated Gaussian blobs: a configurable fraction
of them drift smoothly over time (movers) while the rest stay bit-exactly
static, and optional appearance events insert a new blob overlapping an
existing one part-way through the sequence. Separation and overlap are
what make these scenes trainable from scratch at desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .camera import Camera, ring_rig
from .errors import ValidationError
from .model import GaussianFrame, logit, param_dim, save_scene

DEFAULT_BOUNDS = ((-0.6, -0.6, -0.6), (0.6, 0.6, 0.6))


@dataclass(frozen=True)
class SceneSpec:
    num_blobs: int = 4
    num_frames: int = 6
    mover_fraction: float = 0.25
    motion_amplitude: float = 0.08
    appearance_frames: tuple = ()
    bounds: tuple = DEFAULT_BOUNDS
    min_separation: float = 0.45
    blob_scale: float = 0.2
    sh_degree: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_blobs < 1 or self.num_frames < 1:
            raise ValidationError("need at least one blob and one frame")
        if not 0.0 <= self.mover_fraction <= 1.0:
            raise ValidationError("mover_fraction must be in [0, 1]")
        if any(f < 1 or f >= self.num_frames for f in self.appearance_frames):
            raise ValidationError("appearance frames must fall inside (0, num_frames)")
        object.__setattr__(self, "appearance_frames", tuple(sorted(self.appearance_frames)))
        object.__setattr__(self, "bounds", (tuple(self.bounds[0]), tuple(self.bounds[1])))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        obj = json.loads(text)
        obj["appearance_frames"] = tuple(obj.get("appearance_frames", ()))
        obj["bounds"] = tuple(tuple(b) for b in obj["bounds"])
        return SceneSpec(**obj)


def _separated_positions(rng, n, bounds, min_sep, margin):
    """Rejection-sample blob centers with pairwise minimum distance."""
    lo = np.asarray(bounds[0]) + margin
    hi = np.asarray(bounds[1]) - margin
    positions = []
    for _ in range(20000):
        cand = rng.uniform(lo, hi)
        if all(np.linalg.norm(cand - p) >= min_sep for p in positions):
            positions.append(cand)
            if len(positions) == n:
                return np.array(positions)
    raise ValidationError(
        f"could not place {n} blobs {min_sep} apart inside {bounds}; "
        "loosen the separation or enlarge the bounds"
    )


def _blob_params(rng, position, scale, width):
    row = np.zeros(width)
    row[0:3] = position
    row[3] = 1.0  # identity rotation
    row[7:10] = math.log(scale) + rng.uniform(-0.25, 0.25, 3)
    row[10] = 2.5  # opacity ~0.92
    row[11:14] = logit(rng.uniform(0.3, 0.95, 3))
    return row


def gen_scene(spec: SceneSpec):
    """Build the ground-truth frame sequence for a scene spec."""
    rng = np.random.default_rng(spec.seed)
    width = param_dim(spec.sh_degree)
    margin = 0.5 * spec.blob_scale
    centers = _separated_positions(rng, spec.num_blobs, spec.bounds, spec.min_separation, margin)
    base = np.array([_blob_params(rng, c, spec.blob_scale, width) for c in centers])

    n_movers = int(round(spec.mover_fraction * spec.num_blobs))
    directions = rng.normal(size=(n_movers, 3))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    directions = np.divide(directions, norms, out=np.zeros_like(directions), where=norms > 0)
    per_frame = spec.motion_amplitude / max(spec.num_frames - 1, 1)

    # each appearance event spawns one blob overlapping an existing one so
    # the new mass sits where gradients already flow
    events = []
    for f in spec.appearance_frames:
        host = int(rng.integers(spec.num_blobs))
        offset = rng.normal(size=3)
        offset *= 0.7 * spec.blob_scale / np.linalg.norm(offset)
        row = _blob_params(rng, base[host, 0:3] + offset, spec.blob_scale, width)
        events.append((f, row))

    frames = []
    for t in range(spec.num_frames):
        params = base.copy()
        params[:n_movers, 0:3] += directions * (per_frame * t)
        for f, row in events:
            if t >= f:  # spawned blobs stay static; only base movers drift
                params = np.vstack([params, row[None, :]])
        frames.append(GaussianFrame(params=params, frame_index=t, group_key=0))
    return frames


def default_rig(count: int = 3, resolution=(48, 48)) -> tuple:
    """Inward-looking ring of cameras around the scene origin; wide enough
    that every blob projects inside every view."""
    return ring_rig(count=count, radius=3.0, center=(0.0, 0.0, 0.0), height=0.3,
                    focal=float(resolution[0]) * 40.0 / 48.0, resolution=resolution)


def write_scene(directory, spec: SceneSpec, cams=None) -> dict:
    """Materialize a scene on disk: spec, ground-truth frames and cameras.

    Returns the paths written: scene.gssc, spec.json, cameras.json.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = gen_scene(spec)
    cams = list(cams) if cams is not None else list(default_rig())
    scene_path = directory / "scene.gssc"
    save_scene(scene_path, frames)
    spec_path = directory / "spec.json"
    spec_path.write_text(spec.to_json())
    cam_path = directory / "cameras.json"
    cam_path.write_text(json.dumps([c.to_dict() for c in cams], indent=2))
    return {"scene": str(scene_path), "spec": str(spec_path), "cameras": str(cam_path)}


def load_cameras(path) -> list:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]
