"""One JSON-serializable bundle of every knob a run needs, plus helpers
that project it onto the training and simulation config types."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

from .errors import ValidationError
from .streamsim import SimConfig, DEFAULT_RATIOS
from .train import LossWeights, TrainConfig

THREADS_ENV = "SPLATSTREAM_THREADS"


def thread_count() -> int:
    """Worker thread budget for numeric backends, from SPLATSTREAM_THREADS."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


@dataclass(frozen=True)
class RunConfig:
    # grouping
    tau_db: float = 30.0
    sh_degree: int = 0
    seed: int = 0
    init_count: int = 24
    # from-scratch first-frame fit
    first_iterations: int = 400
    first_step_size: float = 0.3
    first_densify_interval: int = 50
    # per-frame fits
    iterations: int = 80
    step_size: float = 0.05
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 20
    cull_opacity: float = 0.005
    # mid-sequence keyframe refits (new-group openings)
    key_iterations: int = 300
    key_step_size: float = 0.2
    key_densify_interval: int = 30
    key_capacity: int = 0  # 0 = inherit the previous space's live count
    # loss weights
    lambda_dssim: float = 0.2
    lambda_temp: float = 1e-3
    lambda_inf: float = 1e-5
    # streaming
    target_rate_R: float = 1.0
    quant_step: float = 1e-4
    ratios: tuple = DEFAULT_RATIOS
    cliff_beta: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))

    def weights(self) -> LossWeights:
        return LossWeights(lambda_dssim=self.lambda_dssim, lambda_temp=self.lambda_temp,
                           lambda_inf=self.lambda_inf)

    def first_frame_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.first_iterations, step_size=self.first_step_size,
                           densify_grad_threshold=self.densify_grad_threshold,
                           densify_interval=self.first_densify_interval,
                           cull_opacity=self.cull_opacity)

    def frame_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, step_size=self.step_size,
                           densify_grad_threshold=self.densify_grad_threshold,
                           densify_interval=self.densify_interval,
                           cull_opacity=self.cull_opacity)

    def keyframe_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.key_iterations, step_size=self.key_step_size,
                           densify_grad_threshold=self.densify_grad_threshold,
                           densify_interval=self.key_densify_interval,
                           cull_opacity=self.cull_opacity,
                           capacity_U=self.key_capacity)

    def sim_config(self) -> SimConfig:
        return SimConfig(target_rate_R=self.target_rate_R, quant_step=self.quant_step,
                         ratios=self.ratios, cliff_beta=self.cliff_beta)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        obj = json.loads(text)
        known = set(RunConfig.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**obj)
