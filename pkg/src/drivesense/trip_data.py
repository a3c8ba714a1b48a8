"""Domain types for driving traces plus ingestion and 1-km segmentation.

A trip is an ordered sequence of timestamped speed samples (optionally with
gyroscope, auxiliary-load, and cumulative-energy channels).  Trips are cut
into 1-km segments keyed by (driver, vehicle, segment_id); a sample interval
that straddles a kilometre boundary is split by linear interpolation of time
and speed so that distance and measured energy stay additive across segments.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .errors import SchemaError, TraceParseError, ValidationError

# Segment tails shorter than this are dropped instead of emitted as partials.
MIN_PARTIAL_KM = 0.1

# Distance remainders below this are floating-point dust, not real tails.
_DIST_EPS_KM = 1e-9


@dataclass(frozen=True)
class SpeedSample:
    """One telemetry point: time since trip start (s) and speed (km/h).

    Optional channels: gyro is the absolute angular rate about the moving
    axis (rad/s), aux_load the auxiliary electrical load (kW), energy_cum
    the cumulative energy consumed since trip start (kWh).
    """

    t: float
    speed: float
    gyro: Optional[float] = None
    aux_load: Optional[float] = None
    energy_cum: Optional[float] = None


@dataclass(frozen=True, order=True)
class DataPointKey:
    """(driver, vehicle, segment_id) identifying one observation."""

    driver: str
    vehicle: str
    segment_id: str

    def __post_init__(self) -> None:
        if not (self.driver and self.vehicle and self.segment_id):
            raise ValidationError("all components of a data-point key must be non-empty")

    @property
    def pair(self) -> tuple[str, str]:
        return (self.driver, self.vehicle)


@dataclass(frozen=True)
class Trip:
    """An ingested trace for one (driver, vehicle) drive.

    route_points, when present, is a sequence of (lat, lon) aligned
    one-to-one with samples.  ambient_temp is the outdoor temperature
    (deg C) for the whole trip.
    """

    driver: str
    vehicle: str
    samples: tuple[SpeedSample, ...]
    ambient_temp: Optional[float] = None
    route_points: Optional[tuple[tuple[float, float], ...]] = None

    def __post_init__(self) -> None:
        if len(self.samples) < 2:
            raise ValidationError("a trip needs at least 2 samples")
        prev = None
        for s in self.samples:
            if prev is not None and s.t <= prev.t:
                raise ValidationError(f"timestamps must strictly increase (t={s.t})")
            if s.speed < 0:
                raise ValidationError(f"negative speed at t={s.t}")
            if (
                prev is not None
                and s.energy_cum is not None
                and prev.energy_cum is not None
                and s.energy_cum < prev.energy_cum
            ):
                raise ValidationError(f"cumulative energy decreases at t={s.t}")
            prev = s
        if self.route_points is not None and len(self.route_points) != len(self.samples):
            raise ValidationError("route_points must align one-to-one with samples")

    @property
    def distance_km(self) -> float:
        return _trapezoid_km(self.samples)


@dataclass(frozen=True)
class Segment:
    """A contiguous slice of one trip covering up to 1 km."""

    key: DataPointKey
    samples: tuple[SpeedSample, ...]
    distance: float
    is_partial: bool
    measured_energy: Optional[float] = None

    def __post_init__(self) -> None:
        if not (0.0 < self.distance <= 1.0 + _DIST_EPS_KM):
            raise ValidationError(f"segment distance {self.distance} outside (0, 1] km")
        if len(self.samples) < 2:
            raise ValidationError("a segment needs at least 2 samples")


@dataclass(frozen=True)
class ColumnSchema:
    """Maps trace-file column names onto sample fields; t and speed required."""

    t: str = "t_s"
    speed: str = "speed_kmh"
    gyro: str = "gyro_rads"
    aux_load: str = "aux_kw"
    energy_cum: str = "energy_kwh"
    lat: str = "lat"
    lon: str = "lon"


DEFAULT_SCHEMA = ColumnSchema()


def _trapezoid_km(samples: Sequence[SpeedSample]) -> float:
    total = 0.0
    for a, b in zip(samples, samples[1:]):
        total += (a.speed + b.speed) / 2.0 * (b.t - a.t) / 3600.0
    return total


def ingest_trip(
    path: str | Path,
    schema: ColumnSchema = DEFAULT_SCHEMA,
    driver: str = "",
    vehicle: str = "",
    ambient_temp: Optional[float] = None,
) -> Trip:
    """Read a UTF-8 CSV trace into a Trip.

    Required columns are the schema's t and speed; optional channels are
    picked up when their columns exist.  Raises SchemaError for missing
    required columns and TraceParseError (naming the 1-based data row) for
    non-numeric values or non-increasing timestamps.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for required in (schema.t, schema.speed):
            if required not in header:
                raise SchemaError(f"{path}: missing required column {required!r}")
        has = {name: (getattr(schema, name) in header) for name in
               ("gyro", "aux_load", "energy_cum", "lat", "lon")}

        samples: list[SpeedSample] = []
        points: list[tuple[float, float]] = []
        prev_t = None
        for row_no, row in enumerate(reader, start=1):
            def num(col: str, optional: bool = False) -> Optional[float]:
                raw = row.get(col)
                if raw is None or raw == "":
                    if optional:
                        return None
                    raise TraceParseError(f"{path}: missing value for {col!r} at row {row_no}")
                try:
                    value = float(raw)
                except ValueError:
                    raise TraceParseError(
                        f"{path}: non-numeric {col!r}={raw!r} at row {row_no}"
                    ) from None
                if not math.isfinite(value):
                    raise TraceParseError(f"{path}: non-finite {col!r} at row {row_no}")
                return value

            t = num(schema.t)
            speed = num(schema.speed)
            if prev_t is not None and t <= prev_t:
                raise TraceParseError(f"{path}: timestamp not increasing at row {row_no}")
            if speed < 0:
                raise TraceParseError(f"{path}: negative speed at row {row_no}")
            prev_t = t
            samples.append(
                SpeedSample(
                    t=t,
                    speed=speed,
                    gyro=num(schema.gyro, optional=True) if has["gyro"] else None,
                    aux_load=num(schema.aux_load, optional=True) if has["aux_load"] else None,
                    energy_cum=num(schema.energy_cum, optional=True) if has["energy_cum"] else None,
                )
            )
            if has["lat"] and has["lon"]:
                lat = num(schema.lat, optional=True)
                lon = num(schema.lon, optional=True)
                if lat is not None and lon is not None:
                    points.append((lat, lon))

    if len(samples) < 2:
        raise TraceParseError(f"{path}: trace has fewer than 2 rows")
    route_points = tuple(points) if len(points) == len(samples) else None
    return Trip(
        driver=driver,
        vehicle=vehicle,
        samples=tuple(samples),
        ambient_temp=ambient_temp,
        route_points=route_points,
    )


def export_trip(trip: Trip, path: str | Path, schema: ColumnSchema = DEFAULT_SCHEMA) -> None:
    """Write a trip back out in the trace CSV schema (inverse of ingest)."""
    path = Path(path)
    has_gyro = any(s.gyro is not None for s in trip.samples)
    has_aux = any(s.aux_load is not None for s in trip.samples)
    has_energy = any(s.energy_cum is not None for s in trip.samples)
    has_geo = trip.route_points is not None

    header = [schema.t, schema.speed]
    if has_gyro:
        header.append(schema.gyro)
    if has_aux:
        header.append(schema.aux_load)
    if has_energy:
        header.append(schema.energy_cum)
    if has_geo:
        header += [schema.lat, schema.lon]

    def fmt(x: Optional[float]) -> str:
        return "" if x is None else repr(float(x))

    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, s in enumerate(trip.samples):
            row = [fmt(s.t), fmt(s.speed)]
            if has_gyro:
                row.append(fmt(s.gyro))
            if has_aux:
                row.append(fmt(s.aux_load))
            if has_energy:
                row.append(fmt(s.energy_cum))
            if has_geo:
                lat, lon = trip.route_points[i]
                row += [fmt(lat), fmt(lon)]
            writer.writerow(row)


def _interp_sample(a: SpeedSample, b: SpeedSample, theta: float) -> SpeedSample:
    """Sample at fraction theta of the interval [a, b], channels linear in t."""

    def lerp(x: Optional[float], y: Optional[float]) -> Optional[float]:
        if x is None or y is None:
            return None
        return x + (y - x) * theta

    return SpeedSample(
        t=a.t + (b.t - a.t) * theta,
        speed=a.speed + (b.speed - a.speed) * theta,
        gyro=lerp(a.gyro, b.gyro),
        aux_load=lerp(a.aux_load, b.aux_load),
        energy_cum=lerp(a.energy_cum, b.energy_cum),
    )


def _split_fraction(v0: float, v1: float, dt: float, want_km: float) -> float:
    """Fraction theta of [0, dt] at which trapezoidal distance reaches want_km.

    Distance under linear speed is dt*(v0*theta + (v1-v0)*theta^2/2)/3600.
    """
    target = want_km * 3600.0 / dt
    dv = v1 - v0
    if abs(dv) < 1e-12:
        theta = target / v0 if v0 > 0 else 1.0
    else:
        disc = v0 * v0 + 2.0 * dv * target
        theta = (-v0 + math.sqrt(max(disc, 0.0))) / dv
    return min(max(theta, 0.0), 1.0)


def segment_trip(
    trip: Trip,
    segment_ids: Optional[Sequence[str]] = None,
) -> list[Segment]:
    """Cut a trip into 1-km segments at exact cumulative-distance boundaries.

    A final remainder of at least MIN_PARTIAL_KM is emitted with
    is_partial=True; shorter tails are dropped.  Labels come from
    segment_ids when given, from rounded route coordinates when the trip
    has route_points, otherwise from the trip identity plus running index.
    A zero-distance trip yields an empty list.
    """
    samples = list(trip.samples)
    total = _trapezoid_km(samples)
    if total <= _DIST_EPS_KM:
        return []

    segments: list[list[SpeedSample]] = []
    current: list[SpeedSample] = [samples[0]]
    acc = 0.0  # distance accumulated inside the current segment
    i = 0
    while i < len(samples) - 1:
        a, b = current[-1], samples[i + 1]
        step = (a.speed + b.speed) / 2.0 * (b.t - a.t) / 3600.0
        if acc + step < 1.0 - _DIST_EPS_KM:
            acc += step
            current.append(b)
            i += 1
            continue
        # Boundary falls inside [a, b]: cut there and restart from the cut.
        theta = _split_fraction(a.speed, b.speed, b.t - a.t, 1.0 - acc)
        cut = _interp_sample(a, b, theta)
        if b.t - cut.t < 1e-9:
            # Boundary (numerically) at b: reuse the sample, no sliver interval.
            cut = b
            i += 1
        current.append(cut)
        segments.append(current)
        current = [cut]
        acc = 0.0
    if len(current) >= 2:
        segments.append(current)

    out: list[Segment] = []
    emitted = 0
    for idx, seg_samples in enumerate(segments):
        dist = _trapezoid_km(seg_samples)
        is_last = idx == len(segments) - 1
        if is_last and dist < 1.0 - _DIST_EPS_KM:
            if dist < MIN_PARTIAL_KM:
                continue
            partial = True
        else:
            partial = False
            dist = min(dist, 1.0)
        label = _segment_label(trip, seg_samples, emitted, segment_ids)
        energy = _segment_energy(seg_samples)
        out.append(
            Segment(
                key=DataPointKey(
                    driver=trip.driver or "unknown",
                    vehicle=trip.vehicle or "unknown",
                    segment_id=label,
                ),
                samples=tuple(seg_samples),
                distance=dist,
                is_partial=partial,
                measured_energy=energy,
            )
        )
        emitted += 1
    return out


def _segment_label(
    trip: Trip,
    seg_samples: Sequence[SpeedSample],
    index: int,
    segment_ids: Optional[Sequence[str]],
) -> str:
    if segment_ids is not None:
        if index >= len(segment_ids):
            raise ValidationError(
                f"segment_ids supplies {len(segment_ids)} labels but segment {index} was produced"
            )
        return segment_ids[index]
    if trip.route_points is not None:
        # Naive map-matched label: rounded coordinates of the segment start.
        # Millidegree rounding keeps repeated drives of a road on one label.
        t0 = seg_samples[0].t
        j = min(
            range(len(trip.samples)),
            key=lambda n: abs(trip.samples[n].t - t0),
        )
        lat, lon = trip.route_points[j]
        return f"geo_{lat:.3f}_{lon:.3f}"
    return f"{trip.driver or 'trip'}_{trip.vehicle or 'x'}_seg{index:04d}"


def _segment_energy(seg_samples: Sequence[SpeedSample]) -> Optional[float]:
    first, last = seg_samples[0].energy_cum, seg_samples[-1].energy_cum
    if first is None or last is None:
        return None
    return last - first
