"""Quality-driven grouping of a frame sequence into keyframe-anchored
groups.

Frame 0 always opens a group. Every later frame is first fit as a motion
delta against the current group's canonical space; if the probed
reconstruction quality falls below the threshold tau the frame is re-fit
as a new keyframe instead. A keyframe is accepted even when it misses tau
(with a warning) because there is no cheaper fallback.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics, rasterizer, train
from .errors import StructuralError, ValidationError
from .model import CanonicalSpace, DeltaTensor, GaussianFrame, apply_delta, compose_deltas

log = logging.getLogger(__name__)

DEFAULT_TAU_DB = 30.0


@dataclass(frozen=True)
class GroupSpan:
    key: int  # keyframe index, also the group key
    start: int
    end: int  # inclusive

    def __post_init__(self):
        if not self.key == self.start <= self.end:
            raise StructuralError(f"bad group span ({self.key}, {self.start}, {self.end})")


@dataclass(frozen=True)
class GroupPlan:
    tau_db: float
    groups: tuple  # of GroupSpan, contiguous and ordered

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups or groups[0].start != 0:
            raise StructuralError("group plan must start at frame 0")
        for a, b in zip(groups, groups[1:]):
            if b.start != a.end + 1:
                raise StructuralError("group spans must be contiguous")
        object.__setattr__(self, "groups", groups)

    @property
    def frame_count(self) -> int:
        return self.groups[-1].end + 1

    def group_of(self, frame_index: int) -> GroupSpan:
        for g in self.groups:
            if g.start <= frame_index <= g.end:
                return g
        raise ValidationError(f"frame {frame_index} outside the plan")

    def to_json(self) -> str:
        return json.dumps(
            {
                "tau": self.tau_db,
                "groups": [{"key": g.key, "start": g.start, "end": g.end} for g in self.groups],
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "GroupPlan":
        obj = json.loads(text)
        return GroupPlan(
            tau_db=float(obj["tau"]),
            groups=tuple(GroupSpan(g["key"], g["start"], g["end"]) for g in obj["groups"]),
        )


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    group_key: int
    is_keyframe: bool
    step_delta: DeltaTensor  # vs. previous frame (empty for keyframes)
    cumulative_delta: DeltaTensor  # vs. the group's canonical space
    quality_db: float


@dataclass(frozen=True)
class TrainedStream:
    """Full training output: one canonical space per group plus per-frame
    deltas and the grouping decisions that produced them."""

    plan: GroupPlan
    spaces: dict  # group key -> CanonicalSpace
    records: tuple  # of FrameRecord, indexed by frame

    def reconstruct(self, frame_index: int):
        rec = self.records[frame_index]
        return apply_delta(self.spaces[rec.group_key], rec.cumulative_delta, frame_index=frame_index)

    def qualities(self):
        return [r.quality_db for r in self.records]


def save_stream(path, stream: TrainedStream) -> None:
    """Persist a trained stream as one .npz plus the plan embedded as JSON."""
    arrays = {
        "plan_json": np.frombuffer(stream.plan.to_json().encode(), dtype=np.uint8),
        "group_keys": np.array(sorted(stream.spaces), dtype=np.int64),
        "frame_group": np.array([r.group_key for r in stream.records], dtype=np.int64),
        "frame_iskey": np.array([r.is_keyframe for r in stream.records], dtype=np.bool_),
        "frame_quality": np.array([r.quality_db for r in stream.records]),
    }
    for k, sp in stream.spaces.items():
        arrays[f"space_{k}"] = sp.frame.params
        arrays[f"capacity_{k}"] = np.array(sp.capacity_U, dtype=np.int64)
    for r in stream.records:
        arrays[f"cumulative_{r.frame_index}"] = r.cumulative_delta.dense()
        arrays[f"step_{r.frame_index}"] = r.step_delta.dense()
    np.savez_compressed(path, **arrays)


def load_stream(path) -> TrainedStream:
    with np.load(path) as z:
        plan = GroupPlan.from_json(bytes(z["plan_json"]).decode())
        spaces = {
            int(k): CanonicalSpace(
                frame=GaussianFrame(params=z[f"space_{int(k)}"], frame_index=int(k), group_key=int(k)),
                capacity_U=int(z[f"capacity_{int(k)}"]),
            )
            for k in z["group_keys"]
        }
        records = []
        for t in range(len(z["frame_group"])):
            cum = DeltaTensor.from_dense(z[f"cumulative_{t}"])
            step = DeltaTensor.from_dense(z[f"step_{t}"])
            records.append(
                FrameRecord(
                    frame_index=t,
                    group_key=int(z["frame_group"][t]),
                    is_keyframe=bool(z["frame_iskey"][t]),
                    step_delta=step,
                    cumulative_delta=cum,
                    quality_db=float(z["frame_quality"][t]),
                )
            )
    return TrainedStream(plan=plan, spaces=spaces, records=tuple(records))


def frame_quality(frame, cams, target: train.GroundTruth) -> float:
    """Arithmetic-mean PSNR of the frame's renders against ground truth."""
    target.check_cameras(cams)
    return float(
        np.mean([metrics.psnr(rasterizer.render(frame, cam), img)
                 for cam, img in zip(cams, target.images)])
    )


def quality_probe(space: CanonicalSpace, delta: DeltaTensor, target: train.GroundTruth,
                  cams) -> float:
    """Reconstruction quality of ``space`` + ``delta``: arithmetic-mean PSNR
    over the evaluation cameras."""
    return frame_quality(apply_delta(space, delta), cams, target)


def build_groups(targets, cams, weights: train.LossWeights, cfg: train.TrainConfig,
                 first_cfg: train.TrainConfig, bounds, init_count: int,
                 tau_db: float = DEFAULT_TAU_DB, sh_degree: int = 0, seed: int = 0,
                 key_cfg: train.TrainConfig = None, progress=None) -> TrainedStream:
    """Train the whole sequence, opening a new group whenever the in-group
    motion fit drops below ``tau_db``.

    ``targets`` is one GroundTruth per frame (all over the same ``cams``);
    ``first_cfg`` configures the from-scratch frame 0 fit, ``cfg`` the
    per-frame fits and ``key_cfg`` (default ``cfg``) the mid-sequence
    keyframe refits, which usually warrant more iterations and capacity
    headroom than routine motion fits.
    """
    targets = list(targets)
    if not targets:
        raise ValidationError("need at least one frame to group")
    if key_cfg is None:
        key_cfg = cfg

    def note(msg):
        log.info(msg)
        if progress is not None:
            progress(msg)

    space = train.fit_first_frame(
        targets[0], cams, weights, first_cfg, bounds, init_count,
        sh_degree=sh_degree, seed=seed,
    )
    spaces = {space.key_index: space}
    width = space.frame.params.shape[1]
    cumulative = DeltaTensor.empty(space.frame.count, width)
    q0 = frame_quality(space.frame, cams, targets[0])
    if q0 < tau_db:
        log.warning("frame 0 keyframe below threshold: %.2f dB < %.2f dB", q0, tau_db)
    records = [FrameRecord(0, space.key_index, True, DeltaTensor.empty(space.frame.count, width),
                           cumulative, q0)]
    spans = [[0, 0, 0]]  # key, start, end
    note(f"frame 0: keyframe, {q0:.2f} dB, {space.frame.live_count()} live")

    for t in range(1, len(targets)):
        step = train.fit_group_frame(space, cumulative, targets[t], cams, weights, cfg)
        trial = compose_deltas([cumulative, step])
        frame = apply_delta(space, trial, frame_index=t)
        q = frame_quality(frame, cams, targets[t])
        if q >= tau_db:
            cumulative = trial
            records.append(FrameRecord(t, space.key_index, False, step, cumulative, q))
            spans[-1][2] = t
            note(f"frame {t}: delta, {q:.2f} dB")
            continue
        # quality collapsed: open a new group anchored at this frame
        previous = records[-1]
        prev_frame = apply_delta(spaces[previous.group_key], previous.cumulative_delta,
                                 frame_index=t - 1)
        space = train.fit_keyframe(prev_frame, targets[t], cams, weights, key_cfg, frame_index=t)
        spaces[space.key_index] = space
        cumulative = DeltaTensor.empty(space.frame.count, width)
        qk = frame_quality(space.frame, cams, targets[t])
        if qk < tau_db:
            log.warning("frame %d keyframe below threshold: %.2f dB < %.2f dB", t, qk, tau_db)
        records.append(FrameRecord(t, space.key_index, True,
                                   DeltaTensor.empty(space.frame.count, width), cumulative, qk))
        spans.append([t, t, t])
        note(f"frame {t}: new keyframe ({q:.2f} dB delta fit), {qk:.2f} dB")

    plan = GroupPlan(tau_db=tau_db, groups=tuple(GroupSpan(*s) for s in spans))
    return TrainedStream(plan=plan, spaces=spaces, records=tuple(records))
