"""Latent-factor imputation of sparse per-measurement matrices.

Each feature channel (average speed, deceleration duration, ...) forms one
sparse matrix of (driver, vehicle) pairs by road segments.  Stochastic
gradient descent finds low-rank factors P (pairs) and Q (segments) so that
P @ Q.T approximates the observed entries; missing entries are then read
off the factor product.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import CoverageError, DivergenceError, ValidationError
from .features import (
    DEFAULT_FEATURES,
    DYNAMIC_CHANNELS,
    NON_NEGATIVE_CHANNELS,
    FeatureDefaults,
    SegmentFeatures,
)

# An order-of-magnitude objective blow-up across a 10-epoch window is read
# as divergence rather than SGD noise.
_DIVERGENCE_FACTOR = 10.0
_DIVERGENCE_WINDOW = 10


@dataclass(frozen=True)
class SparseFeatureMatrix:
    """Observed entries of one measurement channel.

    rows are (driver, vehicle) pair labels, cols are segment labels, and
    entries maps (row_index, col_index) to the observed value.
    """

    rows: tuple
    cols: tuple
    entries: Mapping[tuple[int, int], float]
    measurement_name: str = ""

    def __post_init__(self) -> None:
        n, m = len(self.rows), len(self.cols)
        for (i, j), value in self.entries.items():
            if not (0 <= i < n and 0 <= j < m):
                raise ValidationError(f"entry ({i}, {j}) outside {n}x{m} matrix")
            if not math.isfinite(value):
                raise ValidationError(f"non-finite entry at ({i}, {j})")


@dataclass(frozen=True)
class Factorization:
    """SGD result: factor matrices plus the hyperparameters that made them."""

    P: np.ndarray
    Q: np.ndarray
    k: int
    lambda_p: float
    lambda_q: float
    learning_rate: float
    seed: int
    epochs_run: int
    final_objective: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.final_objective):
            raise ValidationError("factorization objective must be finite")


def factorize(
    matrix: SparseFeatureMatrix,
    k: int = 3,
    lambda_p: float = 0.02,
    lambda_q: float = 0.02,
    learning_rate: float = 0.01,
    max_epochs: int = 5000,
    tol: float = 1e-6,
    seed: int = 0,
) -> Factorization:
    """Factorize the observed entries by stochastic gradient descent.

    Factors start from seeded uniform(-0.1, 0.1).  Every epoch visits the
    observed entries in a freshly shuffled (seeded) order and applies

        p_i <- p_i + lr * (e_ij * q_j - lambda_p * p_i)
        q_j <- q_j + lr * (e_ij * p_i - lambda_q * q_j)

    with e_ij the current reconstruction error.  Training stops when the
    relative improvement of the regularized squared-error objective drops
    below tol, or at max_epochs.  Raises CoverageError when some row or
    column has no observations and DivergenceError when the objective grows
    by an order of magnitude (pick a smaller learning rate).
    """
    n, m = len(matrix.rows), len(matrix.cols)
    if n == 0 or m == 0 or not matrix.entries:
        raise CoverageError("factorization needs a non-empty matrix")
    if not 1 <= k <= min(n, m):
        raise ValidationError(f"rank k={k} outside 1..min(n, m)={min(n, m)}")
    for name, value in (("lambda_p", lambda_p), ("lambda_q", lambda_q),
                        ("learning_rate", learning_rate), ("tol", tol)):
        if value <= 0:
            raise ValidationError(f"{name} must be positive")
    if max_epochs < 1:
        raise ValidationError("max_epochs must be at least 1")

    seen_rows = {i for i, _ in matrix.entries}
    seen_cols = {j for _, j in matrix.entries}
    if len(seen_rows) < n:
        missing = sorted(set(range(n)) - seen_rows)[0]
        raise CoverageError(f"row {matrix.rows[missing]!r} has no observations")
    if len(seen_cols) < m:
        missing = sorted(set(range(m)) - seen_cols)[0]
        raise CoverageError(f"column {matrix.cols[missing]!r} has no observations")

    rng = np.random.default_rng(seed)
    P = [list(row) for row in rng.uniform(-0.1, 0.1, size=(n, k))]
    Q = [list(row) for row in rng.uniform(-0.1, 0.1, size=(m, k))]
    items = sorted(matrix.entries.items())
    idx_i = [i for (i, _), _ in items]
    idx_j = [j for (_, j), _ in items]
    vals = [v for _, v in items]
    n_entries = len(items)
    np_i = np.asarray(idx_i)
    np_j = np.asarray(idx_j)
    np_vals = np.asarray(vals)

    def objective() -> float:
        P_arr = np.asarray(P)
        Q_arr = np.asarray(Q)
        rows = P_arr[np_i]
        cols = Q_arr[np_j]
        err = np_vals - np.einsum("ij,ij->i", rows, cols)
        return float(
            err @ err
            + lambda_p * float((rows * rows).sum())
            + lambda_q * float((cols * cols).sum())
        )

    history = [objective()]
    epochs = 0
    for epoch in range(max_epochs):
        for pos in rng.permutation(n_entries):
            i, j, r = idx_i[pos], idx_j[pos], vals[pos]
            p, q = P[i], Q[j]
            e = r - sum(pc * qc for pc, qc in zip(p, q))
            for c in range(k):
                pc = p[c]
                p[c] = pc + learning_rate * (e * q[c] - lambda_p * pc)
                q[c] = q[c] + learning_rate * (e * pc - lambda_q * q[c])
        epochs = epoch + 1
        obj = objective()
        history.append(obj)
        prev = history[-2]
        if not math.isfinite(obj):
            raise DivergenceError(
                f"objective became non-finite at epoch {epochs}; reduce the learning rate"
            )
        if len(history) > _DIVERGENCE_WINDOW and obj > _DIVERGENCE_FACTOR * history[-1 - _DIVERGENCE_WINDOW]:
            raise DivergenceError(
                f"objective grew {obj / history[-1 - _DIVERGENCE_WINDOW]:.1f}x over "
                f"{_DIVERGENCE_WINDOW} epochs; reduce the learning rate"
            )
        if obj == 0.0:
            break
        # SGD objectives jitter, so convergence is a small |change|, not a
        # small signed improvement (which noise would satisfy immediately).
        if prev != 0 and abs(prev - obj) / abs(prev) < tol:
            break

    return Factorization(
        P=np.asarray(P, dtype=float),
        Q=np.asarray(Q, dtype=float),
        k=k,
        lambda_p=lambda_p,
        lambda_q=lambda_q,
        learning_rate=learning_rate,
        seed=seed,
        epochs_run=epochs,
        final_objective=history[-1],
    )


def impute(factorization: Factorization, row: int, col: int) -> float:
    """Reconstructed value p_row . q_col (an approximation even where observed)."""
    n, m = factorization.P.shape[0], factorization.Q.shape[0]
    if not (0 <= row < n and 0 <= col < m):
        raise ValidationError(f"index ({row}, {col}) outside {n}x{m} factorization")
    return float(np.dot(factorization.P[row], factorization.Q[col]))


@dataclass(frozen=True)
class MFParams:
    """Hyperparameters for per-channel factorizations."""

    k: int = 3
    lambda_p: float = 0.02
    lambda_q: float = 0.02
    learning_rate: float = 0.01
    max_epochs: int = 5000
    tol: float = 1e-6
    seed: int = 0


def build_channel_matrix(dataset, channel: str) -> SparseFeatureMatrix:
    """One pairs-by-segments matrix of a single feature channel."""
    rows = tuple(dataset.pairs())
    cols = tuple(dataset.segment_ids())
    row_idx = {pair: i for i, pair in enumerate(rows)}
    col_idx = {seg: j for j, seg in enumerate(cols)}
    entries: dict[tuple[int, int], float] = {}
    for pair in rows:
        for seg in dataset.segments_of(pair):
            record = dataset.get(pair, seg)
            entries[(row_idx[pair], col_idx[seg])] = record.features.as_channels()[channel]
    return SparseFeatureMatrix(rows=rows, cols=cols, entries=entries, measurement_name=channel)


def factorize_channels(
    dataset,
    params: MFParams = MFParams(),
) -> dict[str, tuple[SparseFeatureMatrix, Optional[Factorization]]]:
    """Factorize every dynamic channel of the dataset once.

    Channels whose matrix lacks row/column coverage get None in place of a
    factorization (with a warning); imputation then falls back to column
    means.
    """
    rows = tuple(dataset.pairs())
    cols = tuple(dataset.segment_ids())
    out: dict[str, tuple[SparseFeatureMatrix, Optional[Factorization]]] = {}
    for offset, channel in enumerate(DYNAMIC_CHANNELS):
        matrix = build_channel_matrix(dataset, channel)
        try:
            factorization = factorize(
                matrix,
                k=min(params.k, max(1, min(len(rows), len(cols)))),
                lambda_p=params.lambda_p,
                lambda_q=params.lambda_q,
                learning_rate=params.learning_rate,
                max_epochs=params.max_epochs,
                tol=params.tol,
                seed=params.seed + offset,
            )
        except CoverageError as exc:
            warnings.warn(
                f"channel {channel}: {exc}; falling back to column means",
                RuntimeWarning,
                stacklevel=2,
            )
            factorization = None
        out[channel] = (matrix, factorization)
    return out


def impute_features(
    dataset,
    targets: Sequence[tuple[tuple[str, str], str]],
    params: MFParams = MFParams(),
    defaults: FeatureDefaults = DEFAULT_FEATURES,
    factorizations: Optional[dict[str, tuple[SparseFeatureMatrix, Optional[Factorization]]]] = None,
) -> dict[tuple[tuple[str, str], str], SegmentFeatures]:
    """Assemble full feature sets for (pair, segment) targets by imputation.

    Each dynamic channel is factorized independently; the auxiliary load
    comes from the target pair's own observations and the temperature from
    the segment's observed context, since neither is something another
    pair's drive can stand in for.  Channels whose factorization lacks
    coverage fall back to column means (with a warning), and physically
    non-negative channels are clamped at zero on assembly.
    """
    rows = tuple(dataset.pairs())
    cols = tuple(dataset.segment_ids())
    row_idx = {pair: i for i, pair in enumerate(rows)}
    col_idx = {seg: j for j, seg in enumerate(cols)}

    if factorizations is None:
        factorizations = factorize_channels(dataset, params)

    out: dict[tuple[tuple[str, str], str], SegmentFeatures] = {}
    for pair, seg in targets:
        if pair not in row_idx or seg not in col_idx:
            raise ValidationError(f"target ({pair}, {seg!r}) not in the dataset index")
        values: dict[str, float] = {}
        for channel in DYNAMIC_CHANNELS:
            matrix, fact = factorizations[channel]
            if fact is not None:
                value = impute(fact, row_idx[pair], col_idx[seg])
            else:
                value = _column_mean(matrix, col_idx[seg])
            if channel in NON_NEGATIVE_CHANNELS and value < 0.0:
                warnings.warn(
                    f"imputed {channel} for ({pair}, {seg!r}) was {value:.4g}; clamped to 0",
                    RuntimeWarning,
                    stacklevel=2,
                )
                value = 0.0
            values[channel] = value
        values["ell"] = target_aux_load(dataset, pair, seg, defaults)
        values["omega"] = segment_temperature(dataset, seg, defaults)
        out[(pair, seg)] = SegmentFeatures.from_channels(values)
    return out


def _column_mean(matrix: SparseFeatureMatrix, col: int) -> float:
    in_col = [v for (i, j), v in matrix.entries.items() if j == col]
    if in_col:
        return sum(in_col) / len(in_col)
    all_vals = list(matrix.entries.values())
    return sum(all_vals) / len(all_vals)


def target_aux_load(dataset, pair, segment_id: str, defaults: FeatureDefaults) -> float:
    """Auxiliary load the target would run: own observation on the segment
    when available, else the mean over the target's history, else default."""
    record = dataset.get(pair, segment_id)
    if record is not None:
        return record.features.aux_load
    own = [dataset.get(pair, seg).features.aux_load for seg in dataset.segments_of(pair)]
    return sum(own) / len(own) if own else defaults.idle_load_kw


def segment_temperature(dataset, segment_id: str, defaults: FeatureDefaults) -> float:
    """Outdoor temperature on the segment: mean over observed drives of it."""
    temps = [
        dataset.get(pair, segment_id).features.temp
        for pair in dataset.pairs_on(segment_id)
    ]
    return sum(temps) / len(temps) if temps else defaults.temp_c


def factorization_to_dict(f: Factorization, channel: str = "") -> dict:
    return {
        "channel": channel,
        "P": [[float(x) for x in row] for row in f.P],
        "Q": [[float(x) for x in row] for row in f.Q],
        "k": f.k,
        "lambda_p": f.lambda_p,
        "lambda_q": f.lambda_q,
        "learning_rate": f.learning_rate,
        "seed": f.seed,
        "epochs_run": f.epochs_run,
        "final_objective": f.final_objective,
    }
