"""Similarity between (driver, vehicle) pairs.

Two complementary signals are implemented: speed-profile matching, which
warps two speed-vs-distance profiles of the same road segment onto each
other and scores the alignment cost (dynamic time warping), and
driving-habit matching, which compares speed-binned average acceleration
and deceleration magnitudes.  Both feed k-nearest-neighbour selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .features import SegmentFeatures
from .trip_data import SpeedSample

PairKey = tuple[str, str]

# Speed profiles are compared on a uniform distance grid: duration drops out,
# so slow and fast drives of the same road stay comparable point-for-point.
PROFILE_GRID_M = 10.0

# Driving-habit binning: speed bins of 10 km/h, bins with fewer than 10
# points ignored, low/high split at 80 km/h (roughly highway vs suburban).
SPEED_BIN_KMH = 10.0
MIN_BIN_POINTS = 10
HIGH_SPEED_SPLIT_KMH = 80.0


@dataclass(frozen=True)
class WarpPath:
    """Monotone alignment between two series, 1-based index pairs.

    A valid path starts at (1, 1), ends at (n_x, n_y), and each step
    advances each index by 0 or 1 with at least one advancing.
    """

    steps: tuple[tuple[int, int], ...]
    total_distance: float


def check_warp_path(path: WarpPath, n_x: int, n_y: int) -> None:
    """Raise ValidationError unless the path satisfies all warp constraints."""
    steps = path.steps
    if not steps:
        raise ValidationError("warp path is empty")
    if steps[0] != (1, 1):
        raise ValidationError(f"warp path starts at {steps[0]}, not (1, 1)")
    if steps[-1] != (n_x, n_y):
        raise ValidationError(f"warp path ends at {steps[-1]}, not ({n_x}, {n_y})")
    if not max(n_x, n_y) <= len(steps) < n_x + n_y:
        raise ValidationError(f"warp path length {len(steps)} outside [max, n_x+n_y)")
    for (i, j), (i2, j2) in zip(steps, steps[1:]):
        if not (i <= i2 <= i + 1 and j <= j2 <= j + 1):
            raise ValidationError(f"non-monotone warp step {(i, j)} -> {(i2, j2)}")
        if i2 == i and j2 == j:
            raise ValidationError(f"stationary warp step at {(i, j)}")


def dtw_distance(x: Sequence[float], y: Sequence[float]) -> tuple[float, WarpPath]:
    """Exact dynamic-programming DTW under absolute-difference point cost.

    Returns the minimum total alignment cost and one optimal warp path
    (ties broken diagonal-first during backtracking).
    """
    xv = np.asarray(x, dtype=float)
    yv = np.asarray(y, dtype=float)
    if xv.ndim != 1 or yv.ndim != 1:
        raise ValidationError("dtw_distance expects 1-d series")
    n, m = xv.size, yv.size
    if n == 0 or m == 0:
        raise ValidationError("dtw_distance needs non-empty series")

    cost = np.abs(xv[:, None] - yv[None, :])
    acc = np.empty((n, m), dtype=float)
    acc[0, :] = np.cumsum(cost[0, :])
    acc[:, 0] = np.cumsum(cost[:, 0])
    # Anti-diagonal wavefront: cells on i+j = d depend only on d-1 and d-2.
    for d in range(2, n + m - 1):
        lo = max(1, d - (m - 1))
        hi = min(n - 1, d - 1)
        if lo > hi:
            continue
        ii = np.arange(lo, hi + 1)
        jj = d - ii
        best = np.minimum(acc[ii - 1, jj], acc[ii, jj - 1])
        np.minimum(best, acc[ii - 1, jj - 1], out=best)
        acc[ii, jj] = cost[ii, jj] + best

    i, j = n - 1, m - 1
    rev = [(i + 1, j + 1)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            if diag <= up and diag <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        rev.append((i + 1, j + 1))
    rev.reverse()
    total = float(acc[n - 1, m - 1])
    return total, WarpPath(steps=tuple(rev), total_distance=total)


def profile_from_samples(
    samples: Sequence[SpeedSample], step_m: float = PROFILE_GRID_M
) -> np.ndarray:
    """Speed (km/h) sampled on a uniform distance grid along the segment.

    Dwell points (zero-speed plateaus where distance does not advance)
    collapse onto a single grid location.
    """
    if len(samples) < 2:
        raise ValidationError("profile needs at least 2 samples")
    t = np.asarray([s.t for s in samples])
    v = np.asarray([s.speed for s in samples])
    meters = np.concatenate(
        ([0.0], np.cumsum((v[:-1] + v[1:]) / 2.0 * np.diff(t) / 3.6))
    )
    dist_u, first = np.unique(meters, return_index=True)
    grid = np.arange(0.0, dist_u[-1] + 1e-9, step_m)
    if grid.size == 0:
        grid = np.asarray([0.0])
    return np.interp(grid, dist_u, v[first])


def pair_similarity(
    a: PairKey,
    b: PairKey,
    dataset,
    exclude: frozenset[str] = frozenset(),
) -> float:
    """Mean per-segment warp-path cost between two pairs.

    For every segment both pairs drove, the DTW cost of their distance-grid
    profiles is divided by the warp-path length (so long segments do not
    dominate) and the results are averaged.  Returns +inf when the pairs
    share no segments.  `exclude` removes segments from consideration.
    """
    shared = sorted(
        (set(dataset.segments_of(a)) & set(dataset.segments_of(b))) - set(exclude)
    )
    if not shared:
        return math.inf
    total = 0.0
    for seg in shared:
        dist, path = dtw_distance(dataset.profile(a, seg), dataset.profile(b, seg))
        total += dist / len(path.steps)
    return total / len(shared)


@dataclass(frozen=True)
class NeighborList:
    """Ranked neighbours (ascending distance); shortfall flags fewer than k."""

    neighbors: tuple[tuple[PairKey, float], ...]
    shortfall: bool


def knn_by_profile(
    target: PairKey,
    candidates: Iterable[PairKey],
    k: int,
    dataset,
    exclude: frozenset[str] = frozenset(),
) -> NeighborList:
    """k candidates with the smallest finite profile distance to target."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    scored = []
    for cand in candidates:
        if cand == target:
            continue
        chi = pair_similarity(target, cand, dataset, exclude=exclude)
        if math.isfinite(chi):
            scored.append((cand, chi))
    scored.sort(key=lambda item: (item[1], item[0]))
    top = tuple(scored[:k])
    return NeighborList(neighbors=top, shortfall=len(top) < k)


@dataclass(frozen=True)
class HabitTuple:
    """Speed-binned average accel/decel magnitudes, split at 80 km/h.

    A side is None when no speed bin on that side reaches MIN_BIN_POINTS.
    """

    a_low: Optional[float]
    a_high: Optional[float]
    d_low: Optional[float]
    d_high: Optional[float]

    def components(self) -> tuple[Optional[float], ...]:
        return (self.a_low, self.a_high, self.d_low, self.d_high)


def habit_tuple(history: Iterable[SegmentFeatures]) -> HabitTuple:
    """Aggregate one pair's per-segment (mean accel, mean decel, speed) points.

    Points are binned by continuous average speed into 10 km/h intervals;
    bins with fewer than 10 points are ignored, and each qualifying bin
    contributes its mean with equal weight (not pooled), which removes the
    bias from unevenly sampled speeds.
    """
    bins: dict[int, list[tuple[float, float]]] = {}
    count = 0
    for f in history:
        count += 1
        bins.setdefault(int(f.v // SPEED_BIN_KMH), []).append((f.acc.mean, f.dec.mean))
    if count == 0:
        raise ValidationError("habit_tuple needs a non-empty history")

    split_bin = int(HIGH_SPEED_SPLIT_KMH // SPEED_BIN_KMH)
    sides: dict[str, list[tuple[float, float]]] = {"low": [], "high": []}
    for idx, points in bins.items():
        if len(points) < MIN_BIN_POINTS:
            continue
        accs = sum(p[0] for p in points) / len(points)
        decs = sum(p[1] for p in points) / len(points)
        sides["low" if idx < split_bin else "high"].append((accs, decs))

    def side_mean(side: str, which: int) -> Optional[float]:
        vals = [p[which] for p in sides[side]]
        return sum(vals) / len(vals) if vals else None

    return HabitTuple(
        a_low=side_mean("low", 0),
        a_high=side_mean("high", 0),
        d_low=side_mean("low", 1),
        d_high=side_mean("high", 1),
    )


def habit_distance(
    target: HabitTuple,
    candidate: HabitTuple,
    scales: Sequence[float],
) -> float:
    """Standardized Euclidean distance over the shared habit components.

    Components unset on either side are excluded pairwise and the squared
    distance is rescaled by 4/n_used so partially comparable tuples remain
    on the same footing.  No shared components gives +inf.
    """
    diffs = []
    for tc, cc, scale in zip(target.components(), candidate.components(), scales):
        if tc is None or cc is None:
            continue
        diffs.append(((tc - cc) / scale) ** 2)
    if not diffs:
        return math.inf
    return math.sqrt(sum(diffs) * (4.0 / len(diffs)))


def habit_scales(candidates: Iterable[HabitTuple]) -> tuple[float, float, float, float]:
    """Per-component population standard deviation over the candidates.

    Components with no spread (or no data) get scale 1 so they contribute
    raw differences instead of dividing by zero.
    """
    columns: list[list[float]] = [[], [], [], []]
    for habit in candidates:
        for idx, value in enumerate(habit.components()):
            if value is not None:
                columns[idx].append(value)
    scales = []
    for col in columns:
        if len(col) >= 2:
            std = float(np.std(np.asarray(col)))
            scales.append(std if std > 1e-12 else 1.0)
        else:
            scales.append(1.0)
    return tuple(scales)  # type: ignore[return-value]


def knn_by_habit(
    target: HabitTuple,
    candidates: Mapping[PairKey, HabitTuple],
    k: int,
) -> NeighborList:
    """k candidates nearest to target in the 4-d habit space."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    scales = habit_scales(candidates.values())
    scored = []
    for pair, habit in candidates.items():
        d = habit_distance(target, habit, scales)
        if math.isfinite(d):
            scored.append((pair, d))
    scored.sort(key=lambda item: (item[1], item[0]))
    top = tuple(scored[:k])
    return NeighborList(neighbors=top, shortfall=len(top) < k)
