"""Usage-frequency pruning: dense level spaces, cliff-aware level selection
and an exact per-frame optimizer used as a verification oracle.

Quality of a pruning level is measured against the *unpruned* (but
quantized) reconstruction of the same frame, isolating pruning damage from
training error; the ratio-0 level therefore always scores the 100 dB cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import codec, metrics, rasterizer
from .errors import StructuralError, ValidationError
from .model import CanonicalSpace, DeltaTensor, compose_deltas, apply_delta

# Guard for a zero previous quality drop in the cliff scan.
MIN_DROP = 1e-12


@dataclass(frozen=True)
class PruningLevel:
    ratio: float
    quality_db: float
    size_bytes: int
    pruned_indices: tuple  # primitive indices whose delta entries were removed


@dataclass(frozen=True)
class PruningLevelSpace:
    levels: tuple  # of PruningLevel, ratios strictly increasing from 0
    frame_index: int

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels or levels[0].ratio != 0.0:
            raise StructuralError("level space must start at ratio 0")
        ratios = [lv.ratio for lv in levels]
        if any(b <= a for a, b in zip(ratios, ratios[1:])):
            raise StructuralError("ratios must be strictly increasing")
        sizes = [lv.size_bytes for lv in levels]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise StructuralError("sizes must be strictly decreasing")
        object.__setattr__(self, "levels", levels)

    def qualities(self):
        return [lv.quality_db for lv in self.levels]

    def sizes(self):
        return [lv.size_bytes for lv in self.levels]


@dataclass(frozen=True)
class SelectionContext:
    bandwidth_B: float  # bits/second
    target_rate_R: float  # frames/second
    cliff_beta: float = 2.0

    def __post_init__(self):
        if self.bandwidth_B <= 0 or self.target_rate_R <= 0 or self.cliff_beta <= 0:
            raise ValidationError("selection context values must be positive")

    @property
    def budget_bytes(self) -> float:
        """Per-frame byte budget C = B / R (bits -> bytes)."""
        return self.bandwidth_B / self.target_rate_R / 8.0


def prune_order(delta: DeltaTensor, usage_counts: np.ndarray) -> list:
    """Delta entry indices ordered lowest usage first; ties broken by
    pruning the higher primitive index first."""
    idx = sorted(delta.entries)
    return sorted(idx, key=lambda i: (int(usage_counts[i]), -i))


def prune_delta(delta: DeltaTensor, usage_counts: np.ndarray, ratio: float):
    """Remove the ``ratio`` fraction of lowest-usage entries."""
    order = prune_order(delta, usage_counts)
    k = int(math.floor(ratio * len(order) + 0.5))
    removed = order[:k]
    keep = set(order[k:])
    kept = DeltaTensor(
        base_count=delta.base_count,
        param_width=delta.param_width,
        entries={i: b for i, b in delta.entries.items() if i in keep},
    )
    return kept, tuple(sorted(removed))


def build_level_space(delta: DeltaTensor, space: CanonicalSpace, cams, ratios,
                      usage, quant_step: float, base: DeltaTensor = None,
                      frame_index: int = 0) -> PruningLevelSpace:
    """Dense (quality, size) space over pruning ratios.

    ``delta`` is what would be transmitted; ``base`` is the already-applied
    cumulative delta (the anti-drift record). Quality compares the pruned
    reconstruction against the unpruned quantized one over ``cams``.
    """
    ratios = sorted(set(float(r) for r in ratios))
    if not ratios or ratios[0] != 0.0:
        raise StructuralError("ratios must include 0")
    counts = usage.counts if hasattr(usage, "counts") else np.asarray(usage)
    if counts.shape[0] < space.frame.count:
        raise StructuralError("usage counts do not cover the primitive set")
    if base is None:
        base = DeltaTensor.empty(delta.base_count, delta.param_width)

    def reconstruct(d):
        applied = compose_deltas([base, d]) if not base.is_empty() else d
        return apply_delta(space, applied, frame_index=frame_index)

    full_payload = codec.encode_delta(delta, quant_step, frame_index, space.key_index)
    full_decoded = codec.decode_delta(full_payload, delta.base_count, delta.param_width)
    ref_frame = reconstruct(full_decoded)
    ref_images = [rasterizer.render(ref_frame, cam) for cam in cams]

    levels = []
    last_size = None
    for r in ratios:
        kept, removed = prune_delta(delta, counts, r)
        payload = codec.encode_delta(kept, quant_step, frame_index, space.key_index)
        if last_size is not None and payload.payload_bytes >= last_size:
            continue  # duplicate level; drop it
        decoded = codec.decode_delta(payload, delta.base_count, delta.param_width)
        frame = reconstruct(decoded)
        quality = float(
            np.mean([metrics.psnr(rasterizer.render(frame, cam), ref) for cam, ref in zip(cams, ref_images)])
        )
        levels.append(
            PruningLevel(ratio=r, quality_db=quality, size_bytes=payload.payload_bytes,
                         pruned_indices=removed)
        )
        last_size = payload.payload_bytes
    return PruningLevelSpace(levels=tuple(levels), frame_index=frame_index)


def select_pruning_level(space: PruningLevelSpace, ctx: SelectionContext) -> int:
    """Cliff scan plus binary search over the retained candidate set.

    Scans quality drops between adjacent levels; the first level whose drop
    exceeds beta times the previous drop is the cliff, and only preceding
    levels remain candidates. Binary search (sizes decrease with index)
    returns the smallest pruning index whose size fits the budget
    C = B / R. If nothing in the candidate set fits, falls back to the
    smallest-size level of the full space.
    """
    levels = space.levels
    if len(levels) == 1:
        # a degenerate space (e.g. an empty delta) offers no choice
        return 0
    q = [lv.quality_db for lv in levels]
    previous = q[0] - q[1]
    candidates = [0]
    for i in range(1, len(levels)):
        drop = q[i - 1] - q[i]
        if drop / max(previous, MIN_DROP) > ctx.cliff_beta:
            break
        candidates.append(i)
        previous = drop
    budget = ctx.budget_bytes
    lo, hi = 0, len(candidates) - 1
    chosen = None
    while lo <= hi:
        mid = (lo + hi) // 2
        idx = candidates[mid]
        if levels[idx].size_bytes <= budget:
            chosen = idx
            hi = mid - 1
        else:
            lo = mid + 1
    if chosen is not None:
        return chosen
    # nothing in the candidate set fits: smallest-size level of the dense
    # space (sizes strictly decrease, so that is the last level)
    return len(levels) - 1


@dataclass(frozen=True)
class FrameSelection:
    frame_index: int
    level: int | None  # None when infeasible
    quality_db: float
    feasible: bool


def ilp_optimal(level_spaces, budgets_bytes) -> list:
    """Exact optimum of the per-group selection program.

    The program is separable (one budget constraint and one choice per
    frame), so the exact optimum is the per-frame argmax of quality among
    levels fitting the budget. Infeasible frames are reported explicitly.
    """
    level_spaces = list(level_spaces)
    budgets = list(budgets_bytes)
    if len(level_spaces) != len(budgets):
        raise StructuralError("one budget per frame required")
    out = []
    for sp, budget in zip(level_spaces, budgets):
        best = None
        for j, lv in enumerate(sp.levels):
            if lv.size_bytes <= budget and (best is None or lv.quality_db > sp.levels[best].quality_db):
                best = j
        if best is None:
            out.append(FrameSelection(sp.frame_index, None, float("-inf"), False))
        else:
            out.append(FrameSelection(sp.frame_index, best, sp.levels[best].quality_db, True))
    return out


def levels_to_csv_rows(spaces) -> list:
    """Rows {frame, ratio, quality_db, size_bytes} for plotting."""
    rows = []
    for sp in spaces:
        for lv in sp.levels:
            rows.append(
                {
                    "frame": sp.frame_index,
                    "ratio": lv.ratio,
                    "quality_db": lv.quality_db,
                    "size_bytes": lv.size_bytes,
                }
            )
    return rows
