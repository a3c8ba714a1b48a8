"""Per-segment feature extraction from speed profiles.

The moving-energy regressors are the continuous average speed (idling
excluded), the deceleration and acceleration tuples (duration, mean
magnitude, standard deviation of the finite-difference acceleration
series), the mean absolute gyro rate, and the auxiliary load; the idle
regressors are total idle duration and outdoor temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import DegenerateSegmentError, ValidationError
from .trip_data import Segment, SpeedSample

# A vehicle is considered idle below this speed, sustained at least this long.
IDLE_SPEED_KMH = 1.0
IDLE_MIN_DURATION_S = 3.0

KMH_TO_MS = 1.0 / 3.6


@dataclass(frozen=True)
class AccelTuple:
    """(duration s, mean magnitude m/s^2, std m/s^2) of one sign of accel."""

    duration: float
    mean: float
    std: float

    def __post_init__(self) -> None:
        if self.duration < 0 or self.mean < 0 or self.std < 0:
            raise ValidationError("accel tuple components must be non-negative")
        if self.duration == 0 and (self.mean != 0 or self.std != 0):
            raise ValidationError("zero-duration accel tuple must be all zero")

    @staticmethod
    def zero() -> "AccelTuple":
        return AccelTuple(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SegmentFeatures:
    """The measurable inputs of the energy model for one segment."""

    v: float                 # continuous average speed, km/h
    dec: AccelTuple
    acc: AccelTuple
    g: float                 # mean |gyro| while moving, rad/s
    aux_load: float          # auxiliary idle load, kW
    idle_duration: float     # total idle time, s
    temp: float              # outdoor temperature, deg C

    def as_channels(self) -> dict[str, float]:
        return {
            "v": self.v,
            "tau_d": self.dec.duration,
            "mu_d": self.dec.mean,
            "sigma_d": self.dec.std,
            "tau_a": self.acc.duration,
            "mu_a": self.acc.mean,
            "sigma_a": self.acc.std,
            "g": self.g,
            "mu_idle": self.idle_duration,
            "ell": self.aux_load,
            "omega": self.temp,
        }

    @staticmethod
    def from_channels(values: dict[str, float]) -> "SegmentFeatures":
        return SegmentFeatures(
            v=values["v"],
            dec=AccelTuple(values["tau_d"], values["mu_d"], values["sigma_d"]),
            acc=AccelTuple(values["tau_a"], values["mu_a"], values["sigma_a"]),
            g=values["g"],
            aux_load=values["ell"],
            idle_duration=values["mu_idle"],
            temp=values["omega"],
        )


# Channel order used everywhere a feature vector is serialized.
CHANNELS = (
    "v", "tau_d", "mu_d", "sigma_d", "tau_a", "mu_a", "sigma_a",
    "g", "mu_idle", "ell", "omega",
)

# Channels that can be substituted from other pairs' observations.
DYNAMIC_CHANNELS = ("v", "tau_d", "mu_d", "sigma_d", "tau_a", "mu_a", "sigma_a", "g", "mu_idle")

# Everything except temperature has a physical floor at zero.
NON_NEGATIVE_CHANNELS = frozenset(CHANNELS) - {"omega"}


@dataclass(frozen=True)
class FeatureDefaults:
    """Fill-ins for absent optional channels, echoed into output metadata."""

    idle_load_kw: float = 0.5
    temp_c: float = 25.0
    gyro: float = 0.0


DEFAULT_FEATURES = FeatureDefaults()


def idle_runs(samples: Sequence[SpeedSample]) -> list[tuple[int, int, float]]:
    """Maximal sustained-idle runs as (first, last, duration) index triples.

    Each sample owns the interval up to its successor; a run of samples below
    IDLE_SPEED_KMH qualifies when its owned time reaches IDLE_MIN_DURATION_S.
    """
    runs: list[tuple[int, int, float]] = []
    n = len(samples)
    i = 0
    while i < n:
        if samples[i].speed < IDLE_SPEED_KMH:
            j = i
            while j + 1 < n and samples[j + 1].speed < IDLE_SPEED_KMH:
                j += 1
            end_t = samples[j + 1].t if j + 1 < n else samples[j].t
            duration = end_t - samples[i].t
            if duration >= IDLE_MIN_DURATION_S:
                runs.append((i, j, duration))
            i = j + 1
        else:
            i += 1
    return runs


def _signed_tuple(
    values: list[tuple[float, float]],
) -> AccelTuple:
    """Time-weighted (duration, mean, std) of (|a|, dt) observations."""
    if not values:
        return AccelTuple.zero()
    duration = sum(dt for _, dt in values)
    if duration <= 0:
        return AccelTuple.zero()
    mean = sum(a * dt for a, dt in values) / duration
    var = sum(dt * (a - mean) ** 2 for a, dt in values) / duration
    return AccelTuple(duration, mean, math.sqrt(max(var, 0.0)))


def extract_features(
    seg: Segment,
    defaults: FeatureDefaults = DEFAULT_FEATURES,
    ambient_temp: Optional[float] = None,
) -> SegmentFeatures:
    """Compute the energy-model inputs for one segment.

    Acceleration is the first difference of speed over each sample interval
    (no smoothing; the regression absorbs measurement noise).  Raises
    DegenerateSegmentError when the segment has no moving time.
    """
    samples = seg.samples
    if len(samples) < 2:
        raise ValidationError("feature extraction needs at least 2 samples")

    runs = idle_runs(samples)
    mu_idle = sum(duration for _, _, duration in runs)
    wall = samples[-1].t - samples[0].t
    moving_time_s = wall - mu_idle
    if moving_time_s <= 0:
        raise DegenerateSegmentError(
            f"segment {seg.key.segment_id} has no moving time over {wall:.1f} s"
        )
    v = seg.distance / (moving_time_s / 3600.0)

    accel: list[tuple[float, float]] = []
    decel: list[tuple[float, float]] = []
    for a, b in zip(samples, samples[1:]):
        dt = b.t - a.t
        if dt <= 0:
            continue
        rate = (b.speed - a.speed) * KMH_TO_MS / dt
        if rate > 0:
            accel.append((rate, dt))
        elif rate < 0:
            decel.append((-rate, dt))

    moving = [s for s in samples if s.speed >= IDLE_SPEED_KMH]
    gyro_src = [s.gyro for s in (moving or samples) if s.gyro is not None]
    g = sum(abs(x) for x in gyro_src) / len(gyro_src) if gyro_src else defaults.gyro

    aux_src = [s.aux_load for s in samples if s.aux_load is not None]
    aux = sum(aux_src) / len(aux_src) if aux_src else defaults.idle_load_kw

    temp = ambient_temp if ambient_temp is not None else defaults.temp_c

    return SegmentFeatures(
        v=v,
        dec=_signed_tuple(decel),
        acc=_signed_tuple(accel),
        g=g,
        aux_load=aux,
        idle_duration=mu_idle,
        temp=temp,
    )


def split_measured_energy(seg: Segment) -> Optional[tuple[float, float, float]]:
    """(total, moving, idle) kWh from the cumulative-energy channel.

    Idle energy is the consumption during sustained-idle runs; the rest is
    moving energy.  Returns None when the channel is absent.
    """
    cum = [s.energy_cum for s in seg.samples]
    if cum[0] is None or cum[-1] is None or any(c is None for c in cum):
        return None
    total = cum[-1] - cum[0]
    idle = 0.0
    n = len(seg.samples)
    for first, last, _ in idle_runs(seg.samples):
        end = last + 1 if last + 1 < n else last
        idle += cum[end] - cum[first]
    return total, total - idle, idle
