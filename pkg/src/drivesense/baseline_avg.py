"""Population-average features and the personal adjustment function.

The plain baseline predicts from the channel-wise mean of every pair's
features on a segment.  The adjustment refines that: a per-channel
quadratic, fitted on (average, personal) value pairs from the target's
history, converts population averages into personalized estimates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateDesignError, MissingDataError, ValidationError
from .features import CHANNELS, NON_NEGATIVE_CHANNELS, SegmentFeatures


def segment_average(dataset, segment_id: str) -> SegmentFeatures:
    """Channel-wise mean of all pairs' features observed on the segment."""
    pairs = dataset.pairs_on(segment_id)
    if not pairs:
        raise MissingDataError(f"no pair observed segment {segment_id!r}")
    sums = {name: 0.0 for name in CHANNELS}
    for pair in pairs:
        channels = dataset.get(pair, segment_id).features.as_channels()
        for name in CHANNELS:
            sums[name] += channels[name]
    return SegmentFeatures.from_channels(
        {name: value / len(pairs) for name, value in sums.items()}
    )


@dataclass(frozen=True)
class AdjustmentFn:
    """Quadratic map from an average data value to a personal one."""

    eta1: float
    eta2: float
    eta3: float
    channel: str

    def __post_init__(self) -> None:
        if not all(math.isfinite(x) for x in (self.eta1, self.eta2, self.eta3)):
            raise ValidationError("adjustment coefficients must be finite")


def identity_adjustment(channel: str) -> AdjustmentFn:
    return AdjustmentFn(0.0, 1.0, 0.0, channel)


def fit_adjustment(
    pairs: Sequence[tuple[float, float]],
    channel: str,
) -> AdjustmentFn:
    """Least-squares quadratic fit of personal values on average values.

    Needs at least 3 (average, personal) pairs spanning 3 distinct average
    values; otherwise the quadratic is not identifiable and a
    DegenerateDesignError is raised.
    """
    if len(pairs) < 3:
        raise ValidationError(f"channel {channel}: need at least 3 pairs, got {len(pairs)}")
    avg = np.asarray([a for a, _ in pairs], dtype=float)
    personal = np.asarray([p for _, p in pairs], dtype=float)
    design = np.column_stack((avg ** 2, avg, np.ones_like(avg)))
    coeffs, _, rank, _ = np.linalg.lstsq(design, personal, rcond=None)
    if rank < 3:
        raise DegenerateDesignError(
            f"channel {channel}: average values span fewer than 3 distinct points"
        )
    return AdjustmentFn(float(coeffs[0]), float(coeffs[1]), float(coeffs[2]), channel)


def apply_adjustment(fn: AdjustmentFn, average: float) -> float:
    """Evaluate the quadratic, clamping non-negative channels at zero."""
    value = fn.eta1 * average * average + fn.eta2 * average + fn.eta3
    if fn.channel in NON_NEGATIVE_CHANNELS and value < 0.0:
        warnings.warn(
            f"adjusted {fn.channel} was {value:.4g}; clamped to 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return value
