"""Route-energy prediction by factor substitution, and distance-to-empty.

A target pair's trained coefficients are combined with environment
features obtained from one of six sources: the target's own drive of the
segment (self-estimation), similar pairs found by speed-profile or
driving-habit matching, matrix-factorization imputation, the population
average, or the average passed through the target's personal adjustment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from . import baseline_avg, collab_filter, similarity
from .energy_model import EnergyModel, error_metrics, predict_total
from .errors import (
    EmptyCoverageError,
    MissingDataError,
    MissingDonorError,
    NumericError,
    UntrainedModelError,
    ValidationError,
)
from .features import (
    CHANNELS,
    DEFAULT_FEATURES,
    DYNAMIC_CHANNELS,
    FeatureDefaults,
    SegmentFeatures,
)
from .similarity import PairKey
from .trip_data import DataPointKey

APPROACHES = ("spm", "dhm", "mf", "avg", "adj", "self")


@dataclass(frozen=True)
class DependenceTable:
    """Which of driver / vehicle / environment each model quantity follows.

    Defaults assign the measured parameters (speed, accel/decel tuples,
    gyro, auxiliary load) to driver+environment, idle duration and
    temperature to environment alone, all moving-model coefficients to the
    vehicle, and the idle coefficients to driver+vehicle.
    """

    flags: Mapping[str, frozenset[str]] = field(
        default_factory=lambda: dict(_DEFAULT_FLAGS)
    )

    def depends_on(self, name: str, area: str) -> bool:
        return area in self.flags[name]


_DEFAULT_FLAGS: dict[str, frozenset[str]] = {
    "v": frozenset({"driver", "environment"}),
    "dec": frozenset({"driver", "environment"}),
    "acc": frozenset({"driver", "environment"}),
    "g": frozenset({"driver", "environment"}),
    "ell": frozenset({"driver", "environment"}),
    "mu": frozenset({"environment"}),
    "omega": frozenset({"environment"}),
    "alpha_v": frozenset({"vehicle"}),
    "alpha_d": frozenset({"vehicle"}),
    "alpha_a": frozenset({"vehicle"}),
    "alpha_g": frozenset({"vehicle"}),
    "alpha_ell": frozenset({"vehicle"}),
    "c": frozenset({"vehicle"}),
    "beta1": frozenset({"driver", "vehicle"}),
    "beta2": frozenset({"driver", "vehicle"}),
}

DEFAULT_DEPENDENCE = DependenceTable()

# Map from dependence-table parameter names to feature channels.
_PARAM_CHANNELS: dict[str, tuple[str, ...]] = {
    "v": ("v",),
    "dec": ("tau_d", "mu_d", "sigma_d"),
    "acc": ("tau_a", "mu_a", "sigma_a"),
    "g": ("g",),
    "mu": ("mu_idle",),
}

# The target can observe these for itself at prediction time (its own
# auxiliary load, the current weather), so they are never donor-substituted.
_CONTEXT_PARAMS = ("ell", "omega")


@dataclass(frozen=True)
class PredictParams:
    """Knobs for the prediction approaches."""

    k: int = 3
    weighting: str = "mean"  # or "inverse-distance"
    mf: collab_filter.MFParams = field(default_factory=collab_filter.MFParams)
    defaults: FeatureDefaults = DEFAULT_FEATURES
    dependence: DependenceTable = field(default_factory=DependenceTable)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError("k must be at least 1")
        if self.weighting not in ("mean", "inverse-distance"):
            raise ValidationError(f"unknown weighting {self.weighting!r}")


def _context_features(dataset, pair: PairKey, segment_id: str,
                      defaults: FeatureDefaults) -> tuple[float, float]:
    """(aux load, temperature) the target itself would report for a segment."""
    own = dataset.get(pair, segment_id)
    ell = collab_filter.target_aux_load(dataset, pair, segment_id, defaults)
    omega = own.features.temp if own is not None else collab_filter.segment_temperature(
        dataset, segment_id, defaults
    )
    return ell, omega


def substitute(
    target: DataPointKey,
    donor: DataPointKey,
    table: DependenceTable,
    dataset,
    models: Mapping[PairKey, EnergyModel],
    defaults: FeatureDefaults = DEFAULT_FEATURES,
) -> tuple[EnergyModel, SegmentFeatures]:
    """Assemble model inputs for `target` from a donor's drive of a segment.

    Environment-dependent parameters come from the donor's observation and
    everything else from the target: the coefficients from its trained
    model, the auxiliary load and temperature from its own context.
    """
    model = models.get(target.pair)
    if model is None:
        raise UntrainedModelError(f"no trained model for pair {target.pair}")
    donor_record = dataset.get(donor.pair, donor.segment_id)
    if donor_record is None:
        raise MissingDonorError(
            f"donor {donor.pair} has no observation on {donor.segment_id!r}"
        )
    donor_channels = donor_record.features.as_channels()

    values: dict[str, float] = {}
    for param, channels in _PARAM_CHANNELS.items():
        if table.depends_on(param, "environment"):
            source = donor_channels
        else:
            own = dataset.get(target.pair, target.segment_id)
            if own is None:
                raise MissingDataError(
                    f"parameter {param} is not environment-dependent and the target "
                    f"has no observation on {target.segment_id!r}"
                )
            source = own.features.as_channels()
        for name in channels:
            values[name] = source[name]

    ell, omega = _context_features(dataset, target.pair, target.segment_id, defaults)
    values["ell"] = ell
    values["omega"] = omega
    return model, SegmentFeatures.from_channels(values)


@dataclass(frozen=True)
class PredictionReport:
    """Per-segment predictions for one (target, route, approach) run."""

    approach: str
    k: Optional[int]
    target: PairKey
    route: tuple[str, ...]
    predicted: tuple[Optional[float], ...]
    truth: tuple[Optional[float], ...]
    flagged: tuple[str, ...]
    total_kwh: float
    per_segment_error: Optional[tuple[Optional[float], ...]]
    eps_acc: Optional[float]
    rmse_acc: Optional[float]
    provenance: dict

    def covered(self) -> list[tuple[str, float]]:
        return [
            (seg, e) for seg, e in zip(self.route, self.predicted) if e is not None
        ]


class PredictContext:
    """Caches shared across predict() calls on one (dataset, route, params).

    Holds the masked pair-similarity matrix, habit tuples, per-channel
    factorizations, and segment averages, so that evaluating many targets
    and approaches against the same route does not recompute them.
    """

    def __init__(self, dataset, route_set: frozenset[str], params: PredictParams) -> None:
        self.dataset = dataset
        self.route_set = route_set
        self.params = params
        self._similarity: dict[tuple[PairKey, PairKey], float] = {}
        self._habits: dict[tuple[PairKey, bool], similarity.HabitTuple] = {}
        self._averages: dict[str, Optional[SegmentFeatures]] = {}
        self._mf: Optional[dict] = None

    def pair_similarity(self, a: PairKey, b: PairKey, exclude: frozenset[str]) -> float:
        key = (min(a, b), max(a, b))
        cached = self._similarity.get(key)
        if cached is None:
            cached = similarity.pair_similarity(a, b, self.dataset, exclude=exclude)
            self._similarity[key] = cached
        return cached

    def habit(self, pair: PairKey, masked: bool) -> similarity.HabitTuple:
        key = (pair, masked)
        if key not in self._habits:
            if masked:
                history = [
                    self.dataset.get(pair, seg).features
                    for seg in self.dataset.segments_of(pair)
                    if seg not in self.route_set
                ] or self.dataset.features_of(pair)
            else:
                history = self.dataset.features_of(pair)
            self._habits[key] = similarity.habit_tuple(history)
        return self._habits[key]

    def segment_average(self, seg: str) -> Optional[SegmentFeatures]:
        if seg not in self._averages:
            self._averages[seg] = (
                baseline_avg.segment_average(self.dataset, seg)
                if self.dataset.pairs_on(seg)
                else None
            )
        return self._averages[seg]

    def mf_features(self, target: PairKey, segments: Sequence[str]) -> dict:
        known = set(self.dataset.segment_ids())
        targets = [(target, seg) for seg in segments if seg in known]
        if not targets:
            return {}
        return collab_filter.impute_features(
            self.dataset,
            targets,
            params=self.params.mf,
            defaults=self.params.defaults,
            factorizations=self._mf_factorizations(),
        )

    def _mf_factorizations(self):
        if self._mf is None:
            self._mf = collab_filter.factorize_channels(self.dataset, self.params.mf)
        return self._mf


def predict(
    target: PairKey,
    route: Sequence[str],
    approach: str,
    dataset,
    models: Mapping[PairKey, EnergyModel],
    params: PredictParams = PredictParams(),
    context: Optional[PredictContext] = None,
) -> PredictionReport:
    """Predict per-segment energy over a route with the chosen approach.

    Segments no usable source covers are flagged and contribute neither to
    the total nor to the error metrics.  The target's own route
    observations feed only self-estimation (and the measured-truth
    columns); donor selection, habit profiling, and adjustment fitting see
    the rest of its history, since a route being predicted has by
    assumption not been driven yet.
    """
    if approach not in APPROACHES:
        raise ValidationError(f"unknown approach {approach!r}; expected one of {APPROACHES}")
    if not route:
        raise ValidationError("route must contain at least one segment")
    model = models.get(target)
    if model is None:
        raise UntrainedModelError(f"no trained model for pair {target}")

    route = tuple(route)
    if context is None:
        context = PredictContext(dataset, frozenset(route), params)
    features, provenance = _features_by_approach(target, route, approach, dataset, params, context)

    predicted: list[Optional[float]] = []
    truth: list[Optional[float]] = []
    flagged: list[str] = []
    for seg in route:
        f = features.get(seg)
        if f is None:
            predicted.append(None)
            flagged.append(seg)
        else:
            predicted.append(predict_total(model, f))
        record = dataset.get(target, seg)
        truth.append(record.energy_total if record is not None else None)

    usable = [e for e in predicted if e is not None]
    if not usable:
        raise EmptyCoverageError(
            f"approach {approach!r} covers no segment of the route for {target}"
        )

    paired = [
        (p, t) for p, t in zip(predicted, truth) if p is not None and t is not None
    ]
    per_segment: Optional[tuple[Optional[float], ...]] = None
    eps_acc = rmse_acc = None
    if paired:
        metrics = error_metrics([p for p, _ in paired], [t for _, t in paired])
        it = iter(metrics.per_segment)
        per_segment = tuple(
            next(it) if (p is not None and t is not None) else None
            for p, t in zip(predicted, truth)
        )
        eps_acc = metrics.eps_acc
        rmse_acc = metrics.rmse_acc

    return PredictionReport(
        approach=approach,
        k=params.k if approach in ("spm", "dhm") else None,
        target=target,
        route=route,
        predicted=tuple(predicted),
        truth=tuple(truth),
        flagged=tuple(flagged),
        total_kwh=float(sum(usable)),
        per_segment_error=per_segment,
        eps_acc=eps_acc,
        rmse_acc=rmse_acc,
        provenance=provenance,
    )


def _features_by_approach(
    target: PairKey,
    route: tuple[str, ...],
    approach: str,
    dataset,
    params: PredictParams,
    context: PredictContext,
) -> tuple[dict[str, Optional[SegmentFeatures]], dict]:
    route_set = context.route_set

    if approach == "self":
        feats = {}
        for seg in route:
            record = dataset.get(target, seg)
            feats[seg] = record.features if record is not None else None
        return feats, {"source": "self"}

    if approach == "avg":
        feats = {}
        counts = {}
        for seg in route:
            feats[seg] = context.segment_average(seg)
            if feats[seg] is not None:
                counts[seg] = len(dataset.pairs_on(seg))
        return feats, {"source": "avg", "pairs_per_segment": counts}

    if approach == "adj":
        return _adjusted_features(target, route, route_set, dataset, context)

    if approach == "mf":
        imputed = context.mf_features(target, route)
        feats = {seg: imputed.get((target, seg)) for seg in route}
        return feats, {
            "source": "mf",
            "rank": params.mf.k,
            "learning_rate": params.mf.learning_rate,
            "lambda_p": params.mf.lambda_p,
            "lambda_q": params.mf.lambda_q,
            "seed": params.mf.seed,
        }

    # spm / dhm: rank candidates, then per segment average the k nearest
    # donors that actually drove it.
    candidates = [p for p in dataset.pairs() if p != target]
    if approach == "spm":
        ranking = {}
        for cand in candidates:
            chi = context.pair_similarity(target, cand, exclude=route_set)
            if math.isfinite(chi):
                ranking[cand] = chi
        if not ranking:
            # No off-route overlap to rank donors on; fall back to the full
            # history rather than refusing to predict.
            warnings.warn(
                f"{target} shares no off-route segments with any candidate; "
                "donor ranking uses route observations too",
                RuntimeWarning,
                stacklevel=3,
            )
            for cand in candidates:
                chi = similarity.pair_similarity(target, cand, dataset)
                if math.isfinite(chi):
                    ranking[cand] = chi
    else:
        if not any(seg not in route_set for seg in dataset.segments_of(target)):
            warnings.warn(
                f"{target} has no history outside the route; habit profile "
                "uses route observations too",
                RuntimeWarning,
                stacklevel=3,
            )
        if not dataset.segments_of(target):
            raise MissingDataError(f"{target} has no observations to build a habit profile")
        target_habit = context.habit(target, masked=True)
        habits = {c: context.habit(c, masked=False) for c in candidates}
        scales = similarity.habit_scales(habits.values())
        ranking = {}
        for cand, habit in habits.items():
            d = similarity.habit_distance(target_habit, habit, scales)
            if math.isfinite(d):
                ranking[cand] = d

    ordered = sorted(ranking.items(), key=lambda item: (item[1], item[0]))
    feats = {}
    donors_used: dict[str, list] = {}
    for seg in route:
        available = [
            (cand, dist) for cand, dist in ordered if dataset.get(cand, seg) is not None
        ]
        chosen = available[: params.k]
        if not chosen:
            feats[seg] = None
            continue
        feats[seg] = _blend_donor_features(
            dataset, target, seg, chosen, params
        )
        donors_used[seg] = [list(cand) for cand, _ in chosen]
    return feats, {
        "source": approach,
        "k": params.k,
        "weighting": params.weighting,
        "ranking": {"|".join(cand): dist for cand, dist in ordered},
        "donors": donors_used,
    }


def _blend_donor_features(
    dataset,
    target: PairKey,
    segment_id: str,
    donors: Sequence[tuple[PairKey, float]],
    params: PredictParams,
) -> SegmentFeatures:
    if params.weighting == "inverse-distance":
        weights = [1.0 / (dist + 1e-12) for _, dist in donors]
    else:
        weights = [1.0] * len(donors)
    total_w = sum(weights)

    blended = {name: 0.0 for name in DYNAMIC_CHANNELS}
    for (cand, _), w in zip(donors, weights):
        channels = dataset.get(cand, segment_id).features.as_channels()
        for name in DYNAMIC_CHANNELS:
            blended[name] += w * channels[name]
    values = {name: blended[name] / total_w for name in DYNAMIC_CHANNELS}
    ell, omega = _context_features(dataset, target, segment_id, params.defaults)
    values["ell"] = ell
    values["omega"] = omega
    return SegmentFeatures.from_channels(values)


def _adjusted_features(
    target: PairKey,
    route: tuple[str, ...],
    route_set: frozenset[str],
    dataset,
    context: PredictContext,
) -> tuple[dict[str, Optional[SegmentFeatures]], dict]:
    history = [seg for seg in dataset.segments_of(target) if seg not in route_set]
    history_rows = [
        (context.segment_average(seg).as_channels(),
         dataset.get(target, seg).features.as_channels())
        for seg in history
    ]
    fns: dict[str, baseline_avg.AdjustmentFn] = {}
    fitted: dict[str, list[float] | str] = {}
    for channel in CHANNELS:
        samples = [(avg[channel], personal[channel]) for avg, personal in history_rows]
        try:
            fns[channel] = baseline_avg.fit_adjustment(samples, channel)
            fitted[channel] = [fns[channel].eta1, fns[channel].eta2, fns[channel].eta3]
        except (ValidationError, NumericError):
            # Too little history or a constant channel; leave it unadjusted.
            fns[channel] = baseline_avg.identity_adjustment(channel)
            fitted[channel] = "identity"

    feats: dict[str, Optional[SegmentFeatures]] = {}
    for seg in route:
        average = context.segment_average(seg)
        if average is None:
            feats[seg] = None
            continue
        averaged = average.as_channels()
        adjusted = {
            name: baseline_avg.apply_adjustment(fns[name], averaged[name])
            for name in CHANNELS
        }
        feats[seg] = SegmentFeatures.from_channels(adjusted)
    return feats, {"source": "adj", "adjustments": fitted}


@dataclass(frozen=True)
class BatteryState:
    """State of charge (fraction), capacity (Ah), and pack voltage (V)."""

    soc: float
    capacity_ah: float
    pack_voltage: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.soc <= 1.0:
            raise ValidationError(f"soc {self.soc} outside [0, 1]")
        if self.capacity_ah <= 0 or self.pack_voltage <= 0:
            raise ValidationError("battery capacity and voltage must be positive")


def remaining_energy(battery: BatteryState) -> float:
    """Energy left in the pack, kWh (soc * Ah * V / 1000)."""
    return battery.soc * battery.capacity_ah * battery.pack_voltage / 1000.0


def dte(battery: BatteryState, power_intensity_kwh_per_km: float) -> float:
    """Distance-to-empty: remaining energy over future energy per km."""
    if power_intensity_kwh_per_km <= 0:
        raise ValidationError("power intensity must be positive")
    return remaining_energy(battery) / power_intensity_kwh_per_km


def route_intensity(report: PredictionReport, dataset) -> float:
    """Predicted route energy per km over the report's covered segments."""
    distance = 0.0
    energy = 0.0
    for seg, e in report.covered():
        record = dataset.get(report.target, seg)
        distance += record.distance_km if record is not None else 1.0
        energy += e
    if distance <= 0:
        raise ValidationError("route has no usable distance")
    return energy / distance


def report_to_dict(report: PredictionReport) -> dict:
    return {
        "approach": report.approach,
        "k": report.k,
        "target": {"driver": report.target[0], "vehicle": report.target[1]},
        "route": list(report.route),
        "predicted_kwh": list(report.predicted),
        "truth_kwh": list(report.truth),
        "flagged_segments": list(report.flagged),
        "total_kwh": report.total_kwh,
        "per_segment_error": (
            list(report.per_segment_error) if report.per_segment_error is not None else None
        ),
        "eps_acc": report.eps_acc,
        "rmse_acc": report.rmse_acc,
        "provenance": report.provenance,
    }


def report_rows(report: PredictionReport) -> list[dict]:
    """Flat per-segment rows for CSV serialization."""
    rows = []
    errors = report.per_segment_error or (None,) * len(report.route)
    for seg, pred, true, err in zip(report.route, report.predicted, report.truth, errors):
        rows.append(
            {
                "segment_id": seg,
                "approach": report.approach,
                "E_hat_kwh": pred,
                "E_true_kwh": true,
                "eps_i": err,
            }
        )
    return rows
