"""Verifiable-rewards engine, GRPO math, and reflective CoT data forge."""

__version__ = "0.1.0"

from .rewards import (  # noqa: F401
    BoundingBox,
    FormatSpec,
    GroundTruth,
    RewardBreakdown,
    RewardWeights,
    TaskKind,
    total_reward,
)
