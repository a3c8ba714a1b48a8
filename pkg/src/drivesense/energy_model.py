"""Blackbox per-segment energy model: fitting, prediction, and selection.

The moving model is linear in polynomial powers of the continuous average
speed, component-wise powers of the deceleration and acceleration tuples,
the gyro mean, and the auxiliary load, plus an intercept:

    E_mv = sum_i a_v[i] v^i
         + sum_i <a_d[i], (tau_d^i, mu_d^i, sigma_d^i)>
         + sum_i <a_a[i], (tau_a^i, mu_a^i, sigma_a^i)>
         + a_g g + a_l l + c

The idle model is E_id = b1 * mu * l + b2 * omega, and total energy is
their sum.  Coefficients are estimated by least squares (optionally with
Tikhonov damping on the normal equations); polynomial orders are compared
with AIC computed from per-segment relative errors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    NumericError,
    SingularSystemError,
    UnderdeterminedError,
    ValidationError,
)
from .features import AccelTuple, SegmentFeatures

DEFAULT_RIDGE = 1e-8

# (features, measured moving energy, measured idle energy) for one segment.
FitSample = tuple[SegmentFeatures, float, float]


@dataclass(frozen=True, order=True)
class ModelOrder:
    """Polynomial powers (r, k, m) for speed, deceleration, acceleration."""

    r: int
    k: int
    m: int

    def __post_init__(self) -> None:
        for name, value in (("r", self.r), ("k", self.k), ("m", self.m)):
            if not 1 <= value <= 4:
                raise ValidationError(f"order component {name}={value} outside 1..4")

    @property
    def coefficient_count(self) -> int:
        """Total estimated coefficients including g/l/c block and idle pair."""
        return self.r + 3 * self.k + 3 * self.m + 5

    def label(self) -> str:
        return f"({self.r},{self.k},{self.m})"


@dataclass(frozen=True)
class EnergyModel:
    """Fitted coefficient set for one (driver, vehicle) pair."""

    order: ModelOrder
    alpha_v: tuple[float, ...]
    alpha_d: tuple[tuple[float, float, float], ...]
    alpha_a: tuple[tuple[float, float, float], ...]
    alpha_g: float
    alpha_ell: float
    intercept: float
    beta1: float
    beta2: float
    energy_unit: str = "kWh"

    def __post_init__(self) -> None:
        if len(self.alpha_v) != self.order.r:
            raise ValidationError("alpha_v length must equal order.r")
        if len(self.alpha_d) != self.order.k:
            raise ValidationError("alpha_d length must equal order.k")
        if len(self.alpha_a) != self.order.m:
            raise ValidationError("alpha_a length must equal order.m")
        flat = [*self.alpha_v, *(x for t in self.alpha_d for x in t),
                *(x for t in self.alpha_a for x in t),
                self.alpha_g, self.alpha_ell, self.intercept, self.beta1, self.beta2]
        if not all(math.isfinite(x) for x in flat):
            raise ValidationError("model coefficients must be finite")

    def moving_vector(self) -> np.ndarray:
        """Coefficients in the moving design-row order."""
        parts = list(self.alpha_v)
        for triple in self.alpha_d:
            parts.extend(triple)
        for triple in self.alpha_a:
            parts.extend(triple)
        parts.extend((self.alpha_g, self.alpha_ell, self.intercept))
        return np.asarray(parts, dtype=float)


@dataclass(frozen=True)
class FitReport:
    """Residual summary of one fit; errors are per-segment relative errors."""

    n: int
    sse: float
    coefficient_count: int
    aic: float
    per_segment_errors: tuple[float, ...]
    excluded_segments: tuple[int, ...] = ()


def moving_design_row(order: ModelOrder, f: SegmentFeatures) -> np.ndarray:
    """Regressor row [v..v^r, d-tuples^1..k, a-tuples^1..m, g, l, 1]."""
    row = [f.v ** i for i in range(1, order.r + 1)]
    for i in range(1, order.k + 1):
        row.extend((f.dec.duration ** i, f.dec.mean ** i, f.dec.std ** i))
    for i in range(1, order.m + 1):
        row.extend((f.acc.duration ** i, f.acc.mean ** i, f.acc.std ** i))
    row.extend((f.g, f.aux_load, 1.0))
    return np.asarray(row, dtype=float)


def idle_design_row(f: SegmentFeatures) -> np.ndarray:
    return np.asarray((f.idle_duration * f.aux_load, f.temp), dtype=float)


def predict_moving(model: EnergyModel, f: SegmentFeatures) -> float:
    return float(np.dot(model.moving_vector(), moving_design_row(model.order, f)))


def predict_idle(model: EnergyModel, f: SegmentFeatures) -> float:
    return model.beta1 * f.idle_duration * f.aux_load + model.beta2 * f.temp


def predict_total(model: EnergyModel, f: SegmentFeatures) -> float:
    return predict_moving(model, f) + predict_idle(model, f)


def _solve(X: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    if ridge < 0:
        raise ValidationError("ridge must be non-negative")
    if ridge == 0.0:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        return beta
    gram = X.T @ X + ridge * np.eye(X.shape[1])
    try:
        return np.linalg.solve(gram, X.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"normal equations singular at ridge={ridge}") from exc


def fit(
    samples: Sequence[FitSample],
    order: ModelOrder,
    ridge: float = DEFAULT_RIDGE,
) -> tuple[EnergyModel, FitReport]:
    """Least-squares fit of the moving and idle systems.

    The moving system regresses measured moving energy on the polynomial
    design; the idle system regresses measured idle energy on (mu*l, omega).
    `ridge` is added to the normal-equation diagonal; pass 0 for a plain
    SVD solve.  Requires more segments than coefficients.
    """
    n = len(samples)
    K = order.coefficient_count
    if n <= K:
        raise UnderdeterminedError(f"{n} segments cannot identify {K} coefficients")
    for _, e_mv, e_id in samples:
        if not (math.isfinite(e_mv) and math.isfinite(e_id)):
            raise ValidationError("measured energies must be finite")

    X_mv = np.vstack([moving_design_row(order, f) for f, _, _ in samples])
    y_mv = np.asarray([e_mv for _, e_mv, _ in samples])
    X_id = np.vstack([idle_design_row(f) for f, _, _ in samples])
    y_id = np.asarray([e_id for _, _, e_id in samples])

    mv = _solve(X_mv, y_mv, ridge)
    beta = _solve(X_id, y_id, ridge)
    if not (np.all(np.isfinite(mv)) and np.all(np.isfinite(beta))):
        raise NumericError("fit produced non-finite coefficients")

    model = _unpack_model(order, mv, float(beta[0]), float(beta[1]))

    pred = X_mv @ mv + X_id @ beta
    truth = y_mv + y_id
    errors: list[float] = []
    excluded: list[int] = []
    for i, (e, p) in enumerate(zip(truth, pred)):
        if e == 0.0:
            excluded.append(i)
        else:
            errors.append(float((e - p) / e))
    sse = float(sum(e * e for e in errors))
    report = FitReport(
        n=n,
        sse=sse,
        coefficient_count=K,
        aic=aic_value(n, sse, K),
        per_segment_errors=tuple(errors),
        excluded_segments=tuple(excluded),
    )
    return model, report


def _unpack_model(order: ModelOrder, mv: np.ndarray, beta1: float, beta2: float) -> EnergyModel:
    pos = order.r
    alpha_v = tuple(float(x) for x in mv[:pos])
    alpha_d = tuple(
        tuple(float(x) for x in mv[pos + 3 * i : pos + 3 * i + 3]) for i in range(order.k)
    )
    pos += 3 * order.k
    alpha_a = tuple(
        tuple(float(x) for x in mv[pos + 3 * i : pos + 3 * i + 3]) for i in range(order.m)
    )
    pos += 3 * order.m
    return EnergyModel(
        order=order,
        alpha_v=alpha_v,
        alpha_d=alpha_d,  # type: ignore[arg-type]
        alpha_a=alpha_a,  # type: ignore[arg-type]
        alpha_g=float(mv[pos]),
        alpha_ell=float(mv[pos + 1]),
        intercept=float(mv[pos + 2]),
        beta1=beta1,
        beta2=beta2,
    )


def aic_value(n: int, sse: float, coefficient_count: int) -> float:
    """n * ln(sse/n) + 2K with natural log; -inf flags a perfect fit."""
    if sse < 0:
        raise ValidationError("sse must be non-negative")
    if sse == 0.0:
        return float("-inf")
    return n * math.log(sse / n) + 2 * coefficient_count


def aic(report: FitReport) -> float:
    return aic_value(report.n, report.sse, report.coefficient_count)


@dataclass(frozen=True)
class OrderScore:
    """One row of an AIC scan; `error` is set when the fit failed."""

    order: ModelOrder
    aic: Optional[float]
    aic_normalized: Optional[float]
    error: Optional[str] = None


def aic_scan(
    samples: Sequence[FitSample],
    orders: Iterable[ModelOrder],
    ridge: float = DEFAULT_RIDGE,
) -> list[OrderScore]:
    """Fit every order and rank ascending by AIC.

    Failed orders are flagged and sorted last.  The normalized score is
    AIC / min(AIC) - 1, zero for the selected order.
    """
    fitted: list[tuple[ModelOrder, float]] = []
    failed: list[tuple[ModelOrder, str]] = []
    for order in sorted(set(orders)):
        try:
            _, report = fit(samples, order, ridge=ridge)
            fitted.append((order, report.aic))
        except (NumericError, ValidationError) as exc:
            failed.append((order, f"{type(exc).__name__}: {exc}"))
    if not fitted:
        raise NumericError("every order in the scan failed to fit")

    best = min(a for _, a in fitted)
    scores = [
        OrderScore(order=o, aic=a, aic_normalized=(a / best - 1.0) if best != 0 else 0.0)
        for o, a in fitted
    ]
    scores.sort(key=lambda s: (s.aic, s.order))
    scores.extend(
        OrderScore(order=o, aic=None, aic_normalized=None, error=msg) for o, msg in failed
    )
    return scores


@dataclass(frozen=True)
class GroupScanEntry:
    """One order's aggregate over several pairs' scans."""

    order: ModelOrder
    mean_aic: float
    mean_aic_normalized: float
    groups_fitted: int


def aic_scan_grouped(
    groups: Mapping[object, Sequence[FitSample]],
    orders: Iterable[ModelOrder],
    ridge: float = DEFAULT_RIDGE,
) -> list[GroupScanEntry]:
    """Rank orders by mean AIC across several pairs' datasets.

    Each group (one pair's samples) is scanned separately; orders that fit
    every group are ranked ascending by their mean AIC, orders that failed
    somewhere are listed after with their partial coverage.
    """
    order_list = sorted(set(orders))
    sums: dict[ModelOrder, float] = {o: 0.0 for o in order_list}
    norm_sums: dict[ModelOrder, float] = {o: 0.0 for o in order_list}
    counts: dict[ModelOrder, int] = {o: 0 for o in order_list}
    n_groups = 0
    for _, samples in sorted(groups.items(), key=lambda item: str(item[0])):
        n_groups += 1
        for score in aic_scan(samples, order_list, ridge=ridge):
            if score.aic is not None:
                sums[score.order] += score.aic
                norm_sums[score.order] += score.aic_normalized
                counts[score.order] += 1
    complete = [o for o in order_list if counts[o] == n_groups]
    if not complete:
        raise NumericError("no order could be fitted for every pair")
    entries = [
        GroupScanEntry(
            order=o,
            mean_aic=sums[o] / n_groups,
            mean_aic_normalized=norm_sums[o] / n_groups,
            groups_fitted=counts[o],
        )
        for o in complete
    ]
    entries.sort(key=lambda e: (e.mean_aic, e.order))
    entries.extend(
        GroupScanEntry(
            order=o,
            mean_aic=float("nan"),
            mean_aic_normalized=float("nan"),
            groups_fitted=counts[o],
        )
        for o in order_list
        if o not in complete
    )
    return entries


@dataclass(frozen=True)
class ErrorMetrics:
    """Per-segment relative errors and trip-level accumulative error.

    per_segment holds None where the true energy is zero (flagged in
    excluded_segments).  rmse_acc is the RMS of the accumulative error over
    all prefixes of the segment sequence, i.e. against traveled distance.
    """

    per_segment: tuple[Optional[float], ...]
    eps_acc: float
    rmse_acc: float
    excluded_segments: tuple[int, ...]


def error_metrics(pred: Sequence[float], truth: Sequence[float]) -> ErrorMetrics:
    if len(pred) != len(truth):
        raise ValidationError("prediction and truth sequences must have equal length")
    if len(pred) == 0:
        raise ValidationError("error metrics need at least one segment")
    total_truth = float(sum(truth))
    if total_truth == 0.0:
        raise ValidationError("truth energies sum to zero")

    per: list[Optional[float]] = []
    excluded: list[int] = []
    for i, (e, p) in enumerate(zip(truth, pred)):
        if e == 0.0:
            per.append(None)
            excluded.append(i)
        else:
            per.append((e - p) / e)

    eps_acc = abs(total_truth - float(sum(pred))) / total_truth

    sq = []
    run_e = 0.0
    run_p = 0.0
    for e, p in zip(truth, pred):
        run_e += e
        run_p += p
        if run_e != 0.0:
            sq.append(((run_e - run_p) / run_e) ** 2)
    rmse_acc = math.sqrt(sum(sq) / len(sq)) if sq else 0.0

    return ErrorMetrics(
        per_segment=tuple(per),
        eps_acc=eps_acc,
        rmse_acc=rmse_acc,
        excluded_segments=tuple(excluded),
    )


def model_to_dict(model: EnergyModel, provenance: Optional[dict] = None) -> dict:
    doc = {
        "order": {"r": model.order.r, "k": model.order.k, "m": model.order.m},
        "alpha_v": list(model.alpha_v),
        "alpha_d": [list(t) for t in model.alpha_d],
        "alpha_a": [list(t) for t in model.alpha_a],
        "alpha_g": model.alpha_g,
        "alpha_ell": model.alpha_ell,
        "intercept": model.intercept,
        "beta1": model.beta1,
        "beta2": model.beta2,
        "energy_unit": model.energy_unit,
    }
    if provenance is not None:
        doc["provenance"] = provenance
    return doc


def model_from_dict(doc: dict) -> EnergyModel:
    order = ModelOrder(**doc["order"])
    return EnergyModel(
        order=order,
        alpha_v=tuple(doc["alpha_v"]),
        alpha_d=tuple(tuple(t) for t in doc["alpha_d"]),
        alpha_a=tuple(tuple(t) for t in doc["alpha_a"]),
        alpha_g=doc["alpha_g"],
        alpha_ell=doc["alpha_ell"],
        intercept=doc["intercept"],
        beta1=doc["beta1"],
        beta2=doc["beta2"],
        energy_unit=doc.get("energy_unit", "kWh"),
    )


def save_model(model: EnergyModel, path: str | Path, provenance: Optional[dict] = None) -> None:
    Path(path).write_text(
        json.dumps(model_to_dict(model, provenance), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_model(path: str | Path) -> EnergyModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
