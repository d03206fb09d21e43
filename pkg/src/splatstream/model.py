"""Core domain types: Gaussian primitives, frames, canonical spaces and the
sparse delta algebra.

Frames store every primitive as a row of pre-activation parameters so that
delta addition is closed and exactly invertible.  Activation (quaternion
normalization, exp/sigmoid mappings) happens on read.  Row layout:

    position(3) | quaternion(4) | log-scale(3) | opacity-logit(1) |
    color-logit(3) | sh coefficients (3 * (degree + 1)**2)

Primitive ordering is append-only within a group; culling tombstones a row
(opacity logit forced to ``TOMBSTONE_LOGIT``) instead of reindexing, so the
pixel <-> primitive correspondence of attribute images never shifts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError, ValidationError

# Column slices of the parameter matrix.
POS = slice(0, 3)
QUAT = slice(3, 7)
LOG_SCALE = slice(7, 10)
OPACITY = 10
COLOR = slice(11, 14)
SH_START = 14

# Deltas whose components are all below this are dropped; keeps the monoid
# laws exact at double precision.
EPS_SPARSE = 1e-9

# Opacity logit used for tombstoned (culled) primitives. sigmoid(-100) is a
# hard zero in float64 rendering terms.
TOMBSTONE_LOGIT = -100.0
LIVE_LOGIT_FLOOR = -50.0

SCENE_MAGIC = b"GSSC"
SCENE_VERSION = 1


def sh_dim(degree: int) -> int:
    if degree not in (0, 1):
        raise ValidationError(f"sh degree must be 0 or 1, got {degree}")
    return 3 * (degree + 1) ** 2


def param_dim(degree: int) -> int:
    return SH_START + sh_dim(degree)


def degree_from_param_dim(dim: int) -> int:
    for degree in (0, 1):
        if param_dim(degree) == dim:
            return degree
    raise StructuralError(f"no sh degree yields parameter width {dim}")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for an (n, 4) array of unit quaternions (w,x,y,z)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


@dataclass(frozen=True)
class GaussianPrimitive:
    """Activated view of one anisotropic Gaussian ellipsoid."""

    position: np.ndarray  # (3,) scene units
    rotation: np.ndarray  # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray  # (3,) strictly positive lengths
    opacity: float  # in [0, 1]
    color: np.ndarray  # (3,) RGB in [0, 1]
    sh: np.ndarray  # (3 * (degree+1)**2,) raw coefficients

    def __post_init__(self):
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValidationError("quaternion not unit-norm")
        if not np.all(self.scale > 0):
            raise ValidationError("scale components must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValidationError("opacity outside [0, 1]")
        if not np.all((self.color >= 0) & (self.color <= 1)):
            raise ValidationError("color outside [0, 1]")

    @property
    def sh_degree(self) -> int:
        return degree_from_param_dim(SH_START + self.sh.shape[0])

    def to_params(self) -> np.ndarray:
        """Pre-activation parameter row for this primitive."""
        row = np.empty(SH_START + self.sh.shape[0], dtype=np.float64)
        row[POS] = self.position
        row[QUAT] = self.rotation
        row[LOG_SCALE] = np.log(self.scale)
        row[OPACITY] = float(logit(np.clip(self.opacity, 1e-12, 1 - 1e-12)))
        row[COLOR] = logit(np.clip(self.color, 1e-12, 1 - 1e-12))
        row[SH_START:] = self.sh
        return row


@dataclass(frozen=True)
class GaussianFrame:
    """Ordered primitive set for one frame, stored in parameter space."""

    params: np.ndarray  # (n, param_dim) float64, pre-activation
    frame_index: int = 0
    group_key: int = 0

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.ndim != 2:
            raise StructuralError("params must be (n, param_dim)")
        degree_from_param_dim(p.shape[1])  # validates width
        if self.frame_index < 0:
            raise StructuralError("frame_index must be non-negative")
        p = np.array(p, dtype=np.float64, order="C")  # private copy
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def count(self) -> int:
        return self.params.shape[0]

    @property
    def sh_degree(self) -> int:
        return degree_from_param_dim(self.params.shape[1])

    def live_mask(self) -> np.ndarray:
        return self.params[:, OPACITY] > LIVE_LOGIT_FLOOR

    def live_count(self) -> int:
        return int(np.count_nonzero(self.live_mask()))

    def primitive(self, i: int) -> GaussianPrimitive:
        row = self.params[i]
        q = row[QUAT]
        n = np.linalg.norm(q)
        if n == 0 or not np.all(np.isfinite(row)):
            raise ValidationError(f"primitive {i} has invalid parameters")
        return GaussianPrimitive(
            position=row[POS].copy(),
            rotation=q / n,
            scale=np.exp(row[LOG_SCALE]),
            opacity=float(sigmoid(row[OPACITY])),
            color=np.asarray(sigmoid(row[COLOR])),
            sh=row[SH_START:].copy(),
        )

    def with_params(self, params: np.ndarray, frame_index=None, group_key=None) -> "GaussianFrame":
        return GaussianFrame(
            params=params,
            frame_index=self.frame_index if frame_index is None else frame_index,
            group_key=self.group_key if group_key is None else group_key,
        )

    @staticmethod
    def from_primitives(prims, frame_index=0, group_key=0) -> "GaussianFrame":
        if not prims:
            raise StructuralError("frame needs at least one primitive")
        rows = np.stack([p.to_params() for p in prims])
        return GaussianFrame(params=rows, frame_index=frame_index, group_key=group_key)


@dataclass(frozen=True)
class CanonicalSpace:
    """The keyframe's primitive set; anchor of a group."""

    frame: GaussianFrame
    capacity_U: int

    def __post_init__(self):
        if self.frame.frame_index != self.frame.group_key:
            raise StructuralError("a keyframe must anchor itself")
        if self.capacity_U < self.frame.live_count():
            raise StructuralError("capacity_U below live primitive count")

    @property
    def key_index(self) -> int:
        return self.frame.frame_index


@dataclass(frozen=True)
class DeltaTensor:
    """Sparse per-primitive parameter differences; a commutative monoid
    under :func:`compose_deltas`."""

    base_count: int
    param_width: int
    entries: dict = field(default_factory=dict)  # index -> (param_width,) array

    def __post_init__(self):
        frozen = {}
        for idx, block in self.entries.items():
            idx = int(idx)
            if not 0 <= idx < self.base_count:
                raise StructuralError(f"delta index {idx} out of range")
            block = np.asarray(block, dtype=np.float64)
            if block.shape != (self.param_width,):
                raise StructuralError("delta block width mismatch")
            if not np.all(np.isfinite(block)):
                raise ValidationError(f"non-finite delta component at {idx}")
            block = block.copy()
            block.setflags(write=False)
            frozen[idx] = block
        object.__setattr__(self, "entries", frozen)

    @property
    def entry_count(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.entries

    def indices(self) -> np.ndarray:
        return np.array(sorted(self.entries), dtype=np.int64)

    def negate(self) -> "DeltaTensor":
        return DeltaTensor(
            base_count=self.base_count,
            param_width=self.param_width,
            entries={i: -b for i, b in self.entries.items()},
        )

    def dense(self) -> np.ndarray:
        out = np.zeros((self.base_count, self.param_width), dtype=np.float64)
        for i, b in self.entries.items():
            out[i] = b
        return out

    def l1_norm(self) -> float:
        return float(sum(np.abs(b).sum() for b in self.entries.values()))

    @staticmethod
    def empty(base_count: int, param_width: int) -> "DeltaTensor":
        return DeltaTensor(base_count=base_count, param_width=param_width)

    @staticmethod
    def from_dense(dense: np.ndarray, eps: float = EPS_SPARSE) -> "DeltaTensor":
        dense = np.asarray(dense, dtype=np.float64)
        keep = np.max(np.abs(dense), axis=1) > eps
        entries = {int(i): dense[i] for i in np.nonzero(keep)[0]}
        return DeltaTensor(base_count=dense.shape[0], param_width=dense.shape[1], entries=entries)


def apply_delta(space: CanonicalSpace, delta: DeltaTensor, frame_index=None) -> GaussianFrame:
    """Reconstruct a frame from a canonical space plus an accumulated delta."""
    if delta.base_count != space.frame.count:
        raise StructuralError(
            f"delta base_count {delta.base_count} != space count {space.frame.count}"
        )
    if delta.param_width != space.frame.params.shape[1]:
        raise StructuralError("delta parameter width mismatch")
    params = space.frame.params.copy()
    for i, b in delta.entries.items():
        params[i] += b
    return GaussianFrame(
        params=params,
        frame_index=space.key_index if frame_index is None else frame_index,
        group_key=space.key_index,
    )


def diff_frames(a: GaussianFrame, b: GaussianFrame, eps: float = EPS_SPARSE) -> DeltaTensor:
    """Delta such that ``apply_delta`` over ``a`` reproduces ``b`` exactly."""
    if a.count != b.count or a.params.shape[1] != b.params.shape[1]:
        raise StructuralError("frames must share primitive count and layout")
    return DeltaTensor.from_dense(b.params - a.params, eps=eps)


def compose_deltas(deltas, eps: float = EPS_SPARSE) -> DeltaTensor:
    """Componentwise sum over the union of indices; exact and commutative."""
    deltas = list(deltas)
    if not deltas:
        return DeltaTensor.empty(0, param_dim(0))
    base = deltas[0].base_count
    width = deltas[0].param_width
    acc: dict = {}
    for d in deltas:
        if d.base_count != base or d.param_width != width:
            raise StructuralError("cannot compose deltas over different bases")
        for i, b in d.entries.items():
            if i in acc:
                acc[i] = acc[i] + b
            else:
                acc[i] = b.copy()
    entries = {i: b for i, b in acc.items() if np.max(np.abs(b)) > eps}
    return DeltaTensor(base_count=base, param_width=width, entries=entries)


# ---------------------------------------------------------------------------
# Scene container I/O ("GSSC"): little-endian, header then packed f64 rows.


def save_scene(path, frames) -> None:
    frames = list(frames)
    if not frames:
        raise StructuralError("cannot save an empty scene")
    degree = frames[0].sh_degree
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<HIB", SCENE_VERSION, len(frames), degree))
        for fr in frames:
            if fr.sh_degree != degree:
                raise StructuralError("mixed sh degrees in one scene")
            fh.write(struct.pack("<I", fr.count))
            fh.write(fr.params.astype("<f8").tobytes())


def load_scene(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SCENE_MAGIC:
            raise ValidationError(f"bad scene magic {magic!r}")
        version, frame_count, degree = struct.unpack("<HIB", fh.read(7))
        if version != SCENE_VERSION:
            raise ValidationError(f"unsupported scene version {version}")
        width = param_dim(degree)
        frames = []
        for t in range(frame_count):
            (n,) = struct.unpack("<I", fh.read(4))
            raw = fh.read(8 * n * width)
            if len(raw) != 8 * n * width:
                raise ValidationError("truncated scene file")
            params = np.frombuffer(raw, dtype="<f8").reshape(n, width)
            frames.append(GaussianFrame(params=params, frame_index=t, group_key=0))
    return frames
