"""Desk-scale time-varying Gaussian splatting: training-side keyframe
grouping and delta optimization, plus streaming-side differential
transmission with bandwidth-adaptive usage-frequency pruning."""

__version__ = "0.1.0"
