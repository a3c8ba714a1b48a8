"""Personalized vehicle-energy prediction from participatory driving traces."""

from .baseline_avg import AdjustmentFn, apply_adjustment, fit_adjustment, segment_average
from .collab_filter import (
    Factorization,
    MFParams,
    SparseFeatureMatrix,
    factorize,
    impute,
    impute_features,
)
from .energy_model import (
    EnergyModel,
    ErrorMetrics,
    FitReport,
    ModelOrder,
    aic,
    aic_scan,
    error_metrics,
    fit,
    load_model,
    predict_idle,
    predict_moving,
    predict_total,
    save_model,
)
from .features import (
    AccelTuple,
    FeatureDefaults,
    SegmentFeatures,
    extract_features,
)
from .predictor import (
    BatteryState,
    DependenceTable,
    PredictParams,
    PredictionReport,
    dte,
    predict,
    remaining_energy,
    substitute,
)
from .similarity import (
    HabitTuple,
    NeighborList,
    WarpPath,
    dtw_distance,
    habit_tuple,
    knn_by_habit,
    knn_by_profile,
    pair_similarity,
)
from .store import SegmentRecord, SegmentStore
from .synth_oracle import DriverPersona, FleetSpec, GeneratedFleet, default_fleet, generate
from .trip_data import (
    ColumnSchema,
    DataPointKey,
    Segment,
    SpeedSample,
    Trip,
    export_trip,
    ingest_trip,
    segment_trip,
)

__version__ = "0.1.0"
