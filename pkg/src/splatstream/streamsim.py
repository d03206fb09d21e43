"""Differential streaming simulation over a recorded bandwidth trace.

Each delta frame transmits only the gap between the server's cumulative
motion and what the client has already applied; the server mirrors the
client by updating its record with the *decoded* (quantized, pruned)
payload, so quantization error cannot accumulate across frames. Keyframes
transmit the full attribute-image container and reset both records.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import codec, metrics, pruning, rasterizer
from .errors import (
    ProtocolError,
    StructuralError,
    TraceExhaustedError,
    ValidationError,
)
from .grouping import TrainedStream
from .model import CanonicalSpace, DeltaTensor, apply_delta, compose_deltas

DEFAULT_RATIOS = tuple(i / 10 for i in range(10))  # 0% .. 90%
STALL_PERCENTILES = (50, 90, 95, 99)


@dataclass(frozen=True)
class BandwidthTrace:
    """Step-function bandwidth samples; values hold until the next sample."""

    times_s: np.ndarray
    bandwidth_bps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times_s, dtype=np.float64)
        b = np.asarray(self.bandwidth_bps, dtype=np.float64)
        if t.ndim != 1 or t.shape != b.shape or t.size == 0:
            raise StructuralError("trace needs matching 1-D time and bandwidth arrays")
        if np.any(np.diff(t) <= 0):
            raise StructuralError("trace times must be strictly increasing")
        if np.any(b <= 0):
            raise ValidationError("trace bandwidths must be positive")
        object.__setattr__(self, "times_s", t)
        object.__setattr__(self, "bandwidth_bps", b)

    @property
    def duration_s(self) -> float:
        return float(self.times_s[-1])

    def bandwidth_at(self, t: float) -> float:
        if t < self.times_s[0]:
            raise ValidationError(f"time {t} precedes the first trace sample")
        if t > self.times_s[-1]:
            raise TraceExhaustedError(f"time {t} past the end of the trace ({self.duration_s}s)")
        i = int(np.searchsorted(self.times_s, t, side="right")) - 1
        return float(self.bandwidth_bps[i])

    @staticmethod
    def constant(bandwidth_bps: float, duration_s: float) -> "BandwidthTrace":
        return BandwidthTrace(np.array([0.0, duration_s]),
                              np.array([bandwidth_bps, bandwidth_bps]))

    @staticmethod
    def from_csv(text: str) -> "BandwidthTrace":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["time_s", "bandwidth_mbps"]:
            raise StructuralError("trace CSV must have header 'time_s,bandwidth_mbps'")
        times, bws = [], []
        for row in reader:
            times.append(float(row["time_s"]))
            bws.append(float(row["bandwidth_mbps"]) * 1e6)
        return BandwidthTrace(np.asarray(times), np.asarray(bws))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["time_s", "bandwidth_mbps"])
        for t, b in zip(self.times_s, self.bandwidth_bps):
            writer.writerow([f"{t:g}", f"{b / 1e6:g}"])
        return buf.getvalue()


@dataclass(frozen=True)
class SimConfig:
    target_rate_R: float = 1.0  # frames per second
    quant_step: float = 1e-4
    ratios: tuple = DEFAULT_RATIOS
    cliff_beta: float = 2.0

    def __post_init__(self):
        if self.target_rate_R <= 0 or self.quant_step <= 0:
            raise ValidationError("rate and quantization step must be positive")


@dataclass
class SessionState:
    """Mirrored server/client view of one streaming session."""

    space: object = None  # client's decoded CanonicalSpace
    applied: DeltaTensor = None  # D'_{t-1}: cumulative decoded delta

    def client_frame(self, frame_index: int):
        if self.space is None:
            raise StructuralError("no keyframe received yet")
        return apply_delta(self.space, self.applied, frame_index=frame_index)


@dataclass(frozen=True)
class FrameStats:
    frame_index: int
    is_keyframe: bool
    sent_bytes: int
    bandwidth_bps: float
    transmission_time_s: float
    stall_s: float
    level: int  # -1 for keyframes
    prune_ratio: float
    client_quality_db: float  # client render vs. server reconstruction


@dataclass(frozen=True)
class StreamReport:
    frames: tuple  # of FrameStats
    target_rate_R: float

    @property
    def total_bytes(self) -> int:
        return sum(f.sent_bytes for f in self.frames)

    @property
    def total_stall_s(self) -> float:
        return sum(f.stall_s for f in self.frames)

    @property
    def mean_transmission_time_s(self) -> float:
        return float(np.mean([f.transmission_time_s for f in self.frames]))

    @property
    def max_transmission_time_s(self) -> float:
        return float(max(f.transmission_time_s for f in self.frames))

    @property
    def frames_per_minute(self) -> float:
        """Average transmission rate: frames deliverable per minute at the
        observed mean transmission time."""
        mean = self.mean_transmission_time_s
        return float("inf") if mean == 0 else 60.0 / mean

    def stall_cdf(self) -> dict:
        stalls = np.array([f.stall_s for f in self.frames])
        out = {f"p{p}": float(np.percentile(stalls, p)) for p in STALL_PERCENTILES}
        out["max"] = float(stalls.max()) if stalls.size else 0.0
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "target_rate_R": self.target_rate_R,
                "total_bytes": self.total_bytes,
                "total_stall_s": self.total_stall_s,
                "mean_transmission_time_s": self.mean_transmission_time_s,
                "max_transmission_time_s": self.max_transmission_time_s,
                "frames_per_minute": self.frames_per_minute,
                "stall_cdf": self.stall_cdf(),
                "mean_quality_db": float(np.mean([f.client_quality_db for f in self.frames])),
                "frames": [vars(f) for f in self.frames],
            },
            indent=2,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["frame_index", "is_keyframe", "sent_bytes", "bandwidth_bps",
                  "transmission_time_s", "stall_s", "level", "prune_ratio",
                  "client_quality_db"]
        writer = csv.DictWriter(buf, fieldnames=fields)
        writer.writeheader()
        for f in self.frames:
            writer.writerow({k: vars(f)[k] for k in fields})
        return buf.getvalue()


def transmit_delta(cumulative: DeltaTensor, applied: DeltaTensor, quant_step: float,
                   frame_index: int, base_key: int):
    """Encode only the gap between the server target and the client state.

    Returns (payload, decoded_gap); the caller must advance its record by
    the decoded gap, never the exact one."""
    gap = compose_deltas([cumulative, applied.negate()])
    payload = codec.encode_delta(gap, quant_step, frame_index, base_key)
    decoded = codec.decode_delta(payload, gap.base_count, gap.param_width)
    return payload, decoded


def step_frame(stream: TrainedStream, state: SessionState, frame_index: int, cams,
               cfg: SimConfig, bandwidth_bps: float) -> tuple:
    """Advance one frame: pick a payload under the current bandwidth, apply
    it to the client state, and account transmission time and stall.

    Returns ``(stats, payload)`` — the payload is the keyframe container
    bytes or the DeltaPayload actually sent. Because every delta payload
    carries the whole residual against the client state, calling this on a
    non-adjacent frame implements frame skipping in one payload.
    """
    rec = stream.records[frame_index]
    server_frame = stream.reconstruct(frame_index)
    levels = None
    if rec.is_keyframe:
        space = stream.spaces[rec.group_key]
        image_set = codec.encode_frame(space.frame)
        blob = image_set.to_bytes()
        decoded_frame = codec.decode_frame(codec.AttributeImageSet.from_bytes(blob))
        state.space = CanonicalSpace(frame=decoded_frame, capacity_U=space.capacity_U)
        state.applied = DeltaTensor.empty(decoded_frame.count, decoded_frame.params.shape[1])
        payload = blob
        sent, level, ratio = len(blob), -1, 0.0
    else:
        gap = compose_deltas([rec.cumulative_delta, state.applied.negate()])
        _, usage = rasterizer.render_with_usage(server_frame, cams)
        levels = pruning.build_level_space(
            gap, state.space, cams, cfg.ratios, usage, cfg.quant_step,
            base=state.applied, frame_index=frame_index,
        )
        ctx = pruning.SelectionContext(bandwidth_B=bandwidth_bps,
                                       target_rate_R=cfg.target_rate_R,
                                       cliff_beta=cfg.cliff_beta)
        level = pruning.select_pruning_level(levels, ctx)
        chosen = levels.levels[level]
        kept, _ = pruning.prune_delta(gap, usage.counts, chosen.ratio)
        payload = codec.encode_delta(kept, cfg.quant_step, frame_index, state.space.key_index)
        decoded = codec.decode_delta(payload, gap.base_count, gap.param_width)
        state.applied = compose_deltas([state.applied, decoded])
        sent, ratio = payload.payload_bytes, chosen.ratio

    tt = sent * 8.0 / bandwidth_bps
    stall = max(0.0, tt - 1.0 / cfg.target_rate_R)
    client = state.client_frame(frame_index)
    quality = float(np.mean([
        metrics.psnr(rasterizer.render(client, cam), rasterizer.render(server_frame, cam))
        for cam in cams
    ]))
    stats = FrameStats(
        frame_index=frame_index, is_keyframe=rec.is_keyframe, sent_bytes=sent,
        bandwidth_bps=bandwidth_bps, transmission_time_s=tt, stall_s=stall,
        level=level, prune_ratio=ratio, client_quality_db=quality,
    )
    return stats, payload, levels


@dataclass(frozen=True)
class SessionLog:
    """Everything a session produced beyond the report: raw payloads and
    the pruning level spaces built along the way."""

    payloads: tuple  # bytes (keyframes) or DeltaPayload (deltas), per frame
    level_spaces: tuple  # PruningLevelSpace or None, per frame


def run_session(stream: TrainedStream, cams, trace: BandwidthTrace,
                cfg: SimConfig = None, progress=None) -> tuple:
    """Stream every trained frame in order; frame t is sent at time t / R.

    Returns (report, final session state, session log)."""
    cfg = cfg or SimConfig()
    state = SessionState()
    stats, payloads, spaces = [], [], []
    for t in range(len(stream.records)):
        bw = trace.bandwidth_at(t / cfg.target_rate_R)
        fs, payload, levels = step_frame(stream, state, t, cams, cfg, bw)
        stats.append(fs)
        payloads.append(payload)
        spaces.append(levels)
        if progress is not None:
            progress(f"frame {t}: {fs.sent_bytes} B at {bw / 1e6:.2f} Mbps, "
                     f"stall {fs.stall_s:.3f}s, {fs.client_quality_db:.2f} dB")
    report = StreamReport(frames=tuple(stats), target_rate_R=cfg.target_rate_R)
    return report, state, SessionLog(payloads=tuple(payloads), level_spaces=tuple(spaces))


def client_reconstruct(keyframe_blob, delta_payloads, frame_index=None):
    """Pure client-side reconstruction from received bytes.

    Decodes the keyframe attribute images, decodes and composes every
    received delta payload (composition is commutative, so payload order
    does not matter), and applies the sum to the decoded canonical space.
    """
    if keyframe_blob is None:
        raise ProtocolError("cannot reconstruct before the group keyframe arrives")
    frame = codec.decode_frame(codec.AttributeImageSet.from_bytes(keyframe_blob))
    space = CanonicalSpace(frame=frame, capacity_U=frame.live_count())
    width = frame.params.shape[1]
    total = DeltaTensor.empty(frame.count, width)
    for payload in delta_payloads:
        total = compose_deltas([total, codec.decode_delta(payload, frame.count, width)])
    return apply_delta(space, total, frame_index=frame_index)
