"""Synthetic fleets with planted ground truth.

Every test oracle in the suite comes from here: driver personas with known
aggression, vehicles with known coefficient sets, and routes with known
speed limits, stops, and temperatures.  Speed profiles are synthesized per
(persona, segment), features are extracted through the same pipeline the
production code uses, and ground-truth energy is the planted model
evaluated on those features (plus optional multiplicative noise), written
back into the trace as a cumulative-energy channel.

Profiles depend on persona values rather than driver identity, so two
drivers configured with the same persona produce identical drives; energy
noise is keyed by (driver, vehicle, segment) and stays independent.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .energy_model import EnergyModel, ModelOrder, model_to_dict, predict_idle, predict_moving
from .errors import ValidationError
from .features import DEFAULT_FEATURES, FeatureDefaults, extract_features, idle_runs
from .similarity import PairKey
from .store import SegmentStore
from .trip_data import SpeedSample, Trip, export_trip, segment_trip

_KMH_PER_MS2 = 3.6  # speed change per second at 1 m/s^2, in km/h


def _seeded_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


@dataclass(frozen=True)
class DriverPersona:
    """Driving style: ramp magnitudes, cruise bias, dwell, and aux usage."""

    accel_low: float      # m/s^2, typical acceleration below the speed split
    accel_high: float     # m/s^2, above the split
    decel_low: float
    decel_high: float
    speed_bias: float     # cruise speed as a fraction of the limit
    dwell_s: float        # typical stop dwell
    aux_base_kw: float
    aux_spread_kw: float

    def fingerprint(self) -> str:
        return "|".join(
            repr(x)
            for x in (
                self.accel_low, self.accel_high, self.decel_low, self.decel_high,
                self.speed_bias, self.dwell_s, self.aux_base_kw, self.aux_spread_kw,
            )
        )

    def accel(self, limit_kmh: float) -> float:
        return self.accel_low if limit_kmh < 80 else self.accel_high

    def decel(self, limit_kmh: float) -> float:
        return self.decel_low if limit_kmh < 80 else self.decel_high


@dataclass(frozen=True)
class RouteSegmentSpec:
    """Planted properties of one 1-km road segment."""

    segment_id: str
    limit_kmh: float
    n_stops: int
    curviness: float     # scales the gyro channel
    temp_c: float        # outdoor temperature while driving this chunk


@dataclass(frozen=True)
class FleetSpec:
    drivers: tuple[tuple[str, DriverPersona], ...]
    vehicles: tuple[tuple[str, EnergyModel], ...]
    pairs: tuple[PairKey, ...]
    route: tuple[RouteSegmentSpec, ...]
    density: float
    noise: float
    seed: int
    misspec_v3: float = 0.0   # optional v^3 term in the truth, absent from the model family
    chunk_size: int = 20      # route segments per trip

    def __post_init__(self) -> None:
        if not 0.0 < self.density <= 1.0:
            raise ValidationError("density must be in (0, 1]")
        if self.noise < 0:
            raise ValidationError("noise must be non-negative")
        drivers = dict(self.drivers)
        vehicles = dict(self.vehicles)
        for d, v in self.pairs:
            if d not in drivers or v not in vehicles:
                raise ValidationError(f"pair ({d}, {v}) references unknown driver or vehicle")


@dataclass
class GeneratedFleet:
    spec: FleetSpec
    trips: list[tuple[Trip, list[str]]]
    store: SegmentStore
    manifest: dict


# ---------------------------------------------------------------------------
# Speed-profile synthesis
# ---------------------------------------------------------------------------

def _synthesize_leg(
    rng: np.random.Generator,
    persona: DriverPersona,
    seg: RouteSegmentSpec,
    entry_speed: float,
    t0: float,
) -> tuple[list[tuple[float, float]], float]:
    """1-km leg as (t, speed) samples at 1 Hz, ending exactly at 1.0 km.

    Returns the samples (the first is at t0 with entry_speed) and the exit
    speed at the interpolated kilometre boundary.
    """
    # Per-segment spread (traffic, mood) is deliberately wide, and each
    # inter-stop interval draws its own cruise target and ramp slopes, so
    # that within one pair the regressors and their squares do not collapse
    # onto a low-dimensional latent and stay jointly identifiable.
    base_cruise = max(seg.limit_kmh * persona.speed_bias * (1 + 0.7 * (rng.uniform() - 0.5)), 16.0)

    n_stops = seg.n_stops + int(rng.uniform() < 0.4)
    stops: list[tuple[float, float]] = []
    if n_stops > 0:
        marks = np.sort(rng.uniform(0.14, 0.72, size=n_stops))
        # Keep stop events apart so dwells never merge.
        for idx in range(1, len(marks)):
            marks[idx] = max(marks[idx], marks[idx - 1] + 0.18)
        for mark in marks:
            dwell = max(persona.dwell_s * (0.5 + 1.0 * rng.uniform()), 3.5)
            stops.append((float(min(mark, 0.8)), dwell))

    n_intervals = n_stops + 1
    cruises = [max(base_cruise * (0.55 + 0.6 * rng.uniform()), 14.0) for _ in range(n_intervals)]
    a_ramps = [
        persona.accel(seg.limit_kmh) * (0.55 + 0.9 * rng.uniform())
        for _ in range(n_intervals)
    ]
    d_ramps = [
        persona.decel(seg.limit_kmh) * (0.55 + 0.9 * rng.uniform())
        for _ in range(n_intervals)
    ]
    ramp_idx = 0
    cruise = cruises[0]
    a_ramp = a_ramps[0]
    d_ramp = d_ramps[0]

    samples: list[tuple[float, float]] = [(t0, entry_speed)]
    v = entry_speed
    s = 0.0
    t = t0
    dwell_left = 0.0
    pending = list(stops)

    # Cruise is a step-hold process: the target stays flat for a stretch,
    # then jumps.  Flat stretches put moving time in neither acceleration
    # nor deceleration, keeping average speed a free axis of variation.
    hold_left = 0.0
    target = cruise

    while True:
        if dwell_left > 0:
            v_new = 0.0
            dwell_left -= 1.0
        else:
            v_new = None
            if pending:
                target_s, dwell = pending[0]
                rem_m = (target_s - s) * 1000.0
                v_ms = v / 3.6
                if rem_m <= 1.0:
                    if v < 2.0:
                        v_new = 0.0
                    else:
                        v_new = max(v - 3.5 * _KMH_PER_MS2, 0.0)
                elif v_ms * v_ms / (2 * rem_m) >= 0.9 * d_ramp:
                    d_req = min(v_ms * v_ms / (2 * rem_m), 3.5)
                    v_new = max(v - d_req * _KMH_PER_MS2, 0.0)
                if v_new is not None and v_new < 1.0:
                    v_new = 0.0
                    dwell_left = dwell
                    pending.pop(0)
                    ramp_idx = min(ramp_idx + 1, n_intervals - 1)
                    cruise = cruises[ramp_idx]
                    a_ramp = a_ramps[ramp_idx]
                    d_ramp = d_ramps[ramp_idx]
                    hold_left = 0.0
            if v_new is None:
                if hold_left <= 0:
                    hold_left = 12.0 + 23.0 * rng.uniform()
                    target = max(cruise * (0.85 + 0.3 * rng.uniform()), 12.0)
                hold_left -= 1.0
                if v < target:
                    v_new = min(v + a_ramp * _KMH_PER_MS2, target)
                elif v > target:
                    v_new = max(v - 0.5 * d_ramp * _KMH_PER_MS2, target)
                else:
                    v_new = target

        step_km = (v + v_new) / 2.0 / 3600.0
        if s + step_km >= 1.0 - 1e-12:
            want = 1.0 - s
            dv = v_new - v
            target_area = want * 3600.0
            if abs(dv) < 1e-12:
                theta = target_area / v if v > 0 else 1.0
            else:
                disc = v * v + 2.0 * dv * target_area
                theta = (-v + math.sqrt(max(disc, 0.0))) / dv
            theta = min(max(theta, 1e-9), 1.0)
            v_exit = v + dv * theta
            samples.append((t + theta, v_exit))
            return samples, v_exit

        s += step_km
        t += 1.0
        v = v_new
        samples.append((t, v))
        if t - t0 > 3600.0:
            raise ValidationError(
                f"leg for segment {seg.segment_id} failed to cover 1 km within an hour"
            )


def _synthesize_trip(
    spec: FleetSpec,
    persona: DriverPersona,
    legs: Sequence[RouteSegmentSpec],
) -> tuple[list[SpeedSample], list[tuple[int, int]]]:
    """Concatenated legs as raw samples plus per-leg sample index ranges."""
    all_points: list[tuple[float, float]] = []
    ranges: list[tuple[int, int]] = []
    entry = 0.0
    t0 = 0.0
    for seg in legs:
        rng = _seeded_rng(spec.seed, "profile", persona.fingerprint(), seg.segment_id)
        points, exit_speed = _synthesize_leg(rng, persona, seg, entry, t0)
        start = len(all_points)
        if all_points:
            points = points[1:]  # boundary sample already present
            start -= 1
        all_points.extend(points)
        ranges.append((start, len(all_points) - 1))
        entry = exit_speed
        t0 = all_points[-1][0]
    return all_points, ranges


def _attach_channels(
    spec: FleetSpec,
    persona: DriverPersona,
    legs: Sequence[RouteSegmentSpec],
    points: Sequence[tuple[float, float]],
    ranges: Sequence[tuple[int, int]],
) -> list[SpeedSample]:
    """Add gyro and auxiliary-load channels per leg."""
    gyro = np.zeros(len(points))
    aux = np.zeros(len(points))
    for seg, (start, end) in zip(legs, ranges):
        rng = _seeded_rng(spec.seed, "channels", persona.fingerprint(), seg.segment_id)
        ell = persona.aux_base_kw + persona.aux_spread_kw * rng.uniform()
        count = end - start + 1
        magnitudes = seg.curviness * (0.6 + 0.8 * rng.uniform(size=count))
        signs = np.where(rng.uniform(size=count) < 0.5, -1.0, 1.0)
        gyro[start : end + 1] = magnitudes * signs
        aux[start : end + 1] = ell
    return [
        SpeedSample(t=t, speed=v, gyro=float(gy), aux_load=float(ax))
        for (t, v), gy, ax in zip(points, gyro, aux)
    ]


# ---------------------------------------------------------------------------
# Energy injection
# ---------------------------------------------------------------------------

def _planted_energies(
    spec: FleetSpec,
    model: EnergyModel,
    pair: PairKey,
    seg_id: str,
    features,
) -> tuple[float, float]:
    e_mv = predict_moving(model, features)
    if spec.misspec_v3:
        e_mv += spec.misspec_v3 * features.v ** 3
    e_id = predict_idle(model, features)
    if e_mv <= 1e-4 or e_id <= 1e-6:
        raise ValidationError(
            f"planted model yields non-positive energy on {seg_id} "
            f"(mv={e_mv:.4g}, id={e_id:.4g}); adjust the planted coefficients"
        )
    if spec.noise > 0:
        rng = _seeded_rng(spec.seed, "noise", pair[0], pair[1], seg_id)
        z = rng.standard_normal(2)
        e_mv *= 1.0 + spec.noise * float(z[0])
        e_id *= 1.0 + spec.noise * float(z[1])
        e_mv = max(e_mv, 1e-6)
        e_id = max(e_id, 1e-9)
    return e_mv, e_id


def _allocate_energy(
    segments,
    energies: Sequence[tuple[float, float]],
) -> list[float]:
    """Cumulative energy at every trip sample, idle/moving split preserved.

    Within a segment, idle energy is spread over the sustained-idle
    intervals (proportional to their duration) and moving energy over the
    rest, so the ingestion split recovers the planted values exactly.
    """
    cum = [0.0]
    total = 0.0
    for seg, (e_mv, e_id) in zip(segments, energies):
        runs = idle_runs(seg.samples)
        n = len(seg.samples)
        idle_intervals = set()
        for first, last, _ in runs:
            for i in range(first, min(last + 1, n - 1)):
                idle_intervals.add(i)
        idle_dt = sum(
            seg.samples[i + 1].t - seg.samples[i].t for i in idle_intervals
        )
        move_dt = sum(
            seg.samples[i + 1].t - seg.samples[i].t
            for i in range(n - 1)
            if i not in idle_intervals
        )
        if idle_dt <= 0 or move_dt <= 0:
            raise ValidationError(
                f"segment {seg.key.segment_id} lacks an idle or moving phase; "
                "the planted energy split is undefined"
            )
        for i in range(n - 1):
            dt = seg.samples[i + 1].t - seg.samples[i].t
            if i in idle_intervals:
                total += e_id * dt / idle_dt
            else:
                total += e_mv * dt / move_dt
            cum.append(total)
    return cum


# ---------------------------------------------------------------------------
# Fleet generation
# ---------------------------------------------------------------------------

def generate(spec: FleetSpec, defaults: FeatureDefaults = DEFAULT_FEATURES) -> GeneratedFleet:
    """Build the full fleet: trips with ground-truth energy plus a loaded store.

    Deterministic in spec.seed down to the byte level of exported traces.
    """
    drivers = dict(spec.drivers)
    vehicles = dict(spec.vehicles)
    store = SegmentStore()
    trips: list[tuple[Trip, list[str]]] = []

    for pair in sorted(spec.pairs):
        driver, vehicle = pair
        persona = drivers[driver]
        model = vehicles[vehicle]
        observed = []
        for seg in spec.route:
            if spec.density >= 1.0:
                observed.append(seg)
            else:
                u = _seeded_rng(spec.seed, "obs", driver, vehicle, seg.segment_id).uniform()
                if u < spec.density:
                    observed.append(seg)
        chunks: dict[int, list[RouteSegmentSpec]] = {}
        index_of = {seg.segment_id: i for i, seg in enumerate(spec.route)}
        for seg in observed:
            chunks.setdefault(index_of[seg.segment_id] // spec.chunk_size, []).append(seg)

        for chunk_no in sorted(chunks):
            legs = chunks[chunk_no]
            if len({leg.temp_c for leg in legs}) != 1:
                raise ValidationError(
                    f"chunk {chunk_no} mixes temperatures; one trip has one ambient reading"
                )
            points, ranges = _synthesize_trip(spec, persona, legs)
            samples = _attach_channels(spec, persona, legs, points, ranges)
            ambient = legs[0].temp_c
            bare = Trip(
                driver=driver, vehicle=vehicle, samples=tuple(samples), ambient_temp=ambient
            )
            ids = [seg.segment_id for seg in legs]
            segments = segment_trip(bare, segment_ids=ids)
            if len(segments) != len(ids):
                raise ValidationError(
                    f"trip for {pair} chunk {chunk_no} produced {len(segments)} "
                    f"segments for {len(ids)} legs"
                )
            energies = []
            for seg_obj, seg_spec in zip(segments, legs):
                feats = extract_features(seg_obj, defaults=defaults, ambient_temp=ambient)
                energies.append(
                    _planted_energies(spec, model, pair, seg_spec.segment_id, feats)
                )
            flat: list[SpeedSample] = []
            for i, seg_obj in enumerate(segments):
                part = seg_obj.samples if i == 0 else seg_obj.samples[1:]
                flat.extend(part)
            cum = _allocate_energy(segments, energies)
            if len(cum) != len(flat):
                raise ValidationError("energy allocation misaligned with trip samples")
            final_samples = tuple(
                SpeedSample(
                    t=s.t, speed=s.speed, gyro=s.gyro, aux_load=s.aux_load, energy_cum=c
                )
                for s, c in zip(flat, cum)
            )
            trip = Trip(
                driver=driver, vehicle=vehicle, samples=final_samples, ambient_temp=ambient
            )
            trips.append((trip, ids))
            store.add_trip(trip, segment_ids=ids, defaults=defaults)

    manifest = {
        "seed": spec.seed,
        "density": spec.density,
        "noise": spec.noise,
        "misspec_v3": spec.misspec_v3,
        "chunk_size": spec.chunk_size,
        "drivers": {
            d: {
                "accel_low": p.accel_low, "accel_high": p.accel_high,
                "decel_low": p.decel_low, "decel_high": p.decel_high,
                "speed_bias": p.speed_bias, "dwell_s": p.dwell_s,
                "aux_base_kw": p.aux_base_kw, "aux_spread_kw": p.aux_spread_kw,
            }
            for d, p in spec.drivers
        },
        "vehicles": {v: model_to_dict(m) for v, m in spec.vehicles},
        "pairs": [list(p) for p in sorted(spec.pairs)],
        "route": [
            {
                "segment_id": r.segment_id, "limit_kmh": r.limit_kmh,
                "n_stops": r.n_stops, "curviness": r.curviness, "temp_c": r.temp_c,
            }
            for r in spec.route
        ],
    }
    return GeneratedFleet(spec=spec, trips=trips, store=store, manifest=manifest)


def write_fleet(fleet: GeneratedFleet, directory: str | Path) -> None:
    """Emit traces in the CSV schema plus trip and planted-truth manifests."""
    directory = Path(directory)
    traces = directory / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    counters: dict[PairKey, int] = {}
    entries = []
    for trip, ids in fleet.trips:
        pair = (trip.driver, trip.vehicle)
        counters[pair] = counters.get(pair, 0) + 1
        fname = f"{trip.driver}__{trip.vehicle}__t{counters[pair]:03d}.csv"
        export_trip(trip, traces / fname)
        entries.append(
            {
                "file": f"traces/{fname}",
                "driver": trip.driver,
                "vehicle": trip.vehicle,
                "ambient_temp": trip.ambient_temp,
                "segment_ids": ids,
            }
        )
    (directory / "trips_manifest.json").write_text(
        json.dumps(entries, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (directory / "planted_manifest.json").write_text(
        json.dumps(fleet.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Default builders
# ---------------------------------------------------------------------------

def make_persona(rng: np.random.Generator, aggression: float) -> DriverPersona:
    """Persona on a calm(0)..aggressive(1) scale with seeded jitter."""
    jit = lambda: 1.0 + 0.08 * (rng.uniform() - 0.5)  # noqa: E731
    return DriverPersona(
        accel_low=round((1.2 + 1.2 * aggression) * jit(), 4),
        accel_high=round((1.0 + 1.0 * aggression) * jit(), 4),
        decel_low=round((1.1 + 1.1 * aggression) * jit(), 4),
        decel_high=round((0.95 + 0.95 * aggression) * jit(), 4),
        speed_bias=round(0.88 + 0.20 * aggression * jit(), 4),
        dwell_s=round(15.0 - 7.0 * aggression * jit(), 2),
        aux_base_kw=round(0.4 + 1.2 * rng.uniform(), 4),
        aux_spread_kw=round(0.2 + 0.5 * rng.uniform(), 4),
    )


def make_vehicle_model(rng: np.random.Generator, order: ModelOrder = ModelOrder(2, 2, 2)) -> EnergyModel:
    """Planted coefficient set with positive energies on realistic features."""
    u = rng.uniform

    def tuple_block(power: int) -> tuple[float, float, float]:
        if power == 1:
            return (u(5e-4, 2e-3), u(0.01, 0.05), u(0.005, 0.02))
        # Quadratic weights sized so each squared regressor carries a
        # noticeable share of the total energy on realistic feature ranges.
        return (u(1.5e-4, 3e-4), u(0.1, 0.2), u(0.6, 1.2))

    if order.r == 1:
        # No quadratic term to lean on, so the linear term must be positive.
        alpha_v: tuple[float, ...] = (u(2e-3, 5e-3),)
    else:
        alpha_v = tuple(
            -u(3e-3, 8e-3) if i == 0 else u(2.5e-4, 4.5e-4) if i == 1 else u(1e-8, 5e-8)
            for i in range(order.r)
        )
    return EnergyModel(
        order=order,
        alpha_v=alpha_v,
        alpha_d=tuple(tuple_block(i + 1) for i in range(order.k)),
        alpha_a=tuple(tuple_block(i + 1) for i in range(order.m)),
        alpha_g=u(0.02, 0.08),
        alpha_ell=u(0.01, 0.04),
        intercept=u(0.3, 0.5),
        beta1=u(5e-5, 2e-4),
        beta2=u(5e-4, 2e-3),
    )


def make_route(rng: np.random.Generator, n_segments: int, chunk_size: int = 20) -> tuple[RouteSegmentSpec, ...]:
    limits = (30.0, 45.0, 60.0, 75.0, 90.0, 110.0)
    chunk_temps = [round(18.0 + 20.0 * rng.uniform(), 2) for _ in range(n_segments // chunk_size + 1)]
    route = []
    for i in range(n_segments):
        route.append(
            RouteSegmentSpec(
                segment_id=f"R{i:04d}",
                limit_kmh=limits[i % len(limits)],
                n_stops=1,
                curviness=round(0.03 + 0.30 * rng.uniform(), 4),
                temp_c=chunk_temps[i // chunk_size],
            )
        )
    return tuple(route)


def default_fleet(
    n_pairs: int,
    n_segments: int,
    density: float = 1.0,
    noise: float = 0.0,
    seed: int = 0,
    order: ModelOrder = ModelOrder(2, 2, 2),
    misspec_v3: float = 0.0,
    twin_of: Optional[int] = None,
) -> FleetSpec:
    """Fleet with personas spread from calm to aggressive.

    twin_of=i adds one extra driver whose persona equals driver i's and who
    drives vehicle i's model: a planted nearest neighbour for pair i.
    """
    if n_pairs < 1:
        raise ValidationError("need at least one pair")
    rng = _seeded_rng(seed, "fleet")
    drivers = []
    vehicles = []
    pairs = []
    for i in range(n_pairs):
        aggression = 0.5 if n_pairs == 1 else i / (n_pairs - 1)
        drivers.append((f"D{i + 1}", make_persona(rng, aggression)))
        vehicles.append((f"V{i + 1}", make_vehicle_model(rng, order)))
        pairs.append((f"D{i + 1}", f"V{i + 1}"))
    if twin_of is not None:
        if not 0 <= twin_of < n_pairs:
            raise ValidationError(f"twin_of={twin_of} outside 0..{n_pairs - 1}")
        drivers.append((f"D{n_pairs + 1}twin", drivers[twin_of][1]))
        pairs.append((f"D{n_pairs + 1}twin", vehicles[twin_of][0]))
    route = make_route(rng, n_segments)
    return FleetSpec(
        drivers=tuple(drivers),
        vehicles=tuple(vehicles),
        pairs=tuple(pairs),
        route=route,
        density=density,
        noise=noise,
        seed=seed,
        misspec_v3=misspec_v3,
    )
