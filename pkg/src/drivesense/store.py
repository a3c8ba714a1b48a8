"""Durable segment store: per-pair CSVs plus an index JSON.

The store is the dataset every prediction approach reads: one record per
(driver, vehicle, segment) holding extracted features, the 10 m speed
profile, and measured energies split into moving and idle parts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional
from urllib.parse import quote, unquote

import numpy as np

from .errors import DataError, ValidationError
from .features import (
    CHANNELS,
    DEFAULT_FEATURES,
    FeatureDefaults,
    SegmentFeatures,
    extract_features,
    split_measured_energy,
)
from .similarity import PairKey, profile_from_samples
from .trip_data import DataPointKey, Segment, Trip, segment_trip


@dataclass(frozen=True)
class SegmentRecord:
    key: DataPointKey
    features: SegmentFeatures
    distance_km: float
    profile: np.ndarray
    energy_total: Optional[float] = None
    energy_mv: Optional[float] = None
    energy_id: Optional[float] = None


class SegmentStore:
    """In-memory dataset of segment records keyed by (pair, segment_id)."""

    def __init__(self) -> None:
        self._records: dict[tuple[PairKey, str], SegmentRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def add_record(self, record: SegmentRecord) -> None:
        key = (record.key.pair, record.key.segment_id)
        self._records[key] = record

    def add_trip(
        self,
        trip: Trip,
        segment_ids: Optional[list[str]] = None,
        defaults: FeatureDefaults = DEFAULT_FEATURES,
        keep_partial: bool = False,
    ) -> list[SegmentRecord]:
        """Segment a trip, extract features, and file the records."""
        added = []
        for seg in segment_trip(trip, segment_ids=segment_ids):
            if seg.is_partial and not keep_partial:
                continue
            added.append(self.add_segment(seg, defaults=defaults, ambient_temp=trip.ambient_temp))
        return added

    def add_segment(
        self,
        seg: Segment,
        defaults: FeatureDefaults = DEFAULT_FEATURES,
        ambient_temp: Optional[float] = None,
    ) -> SegmentRecord:
        feats = extract_features(seg, defaults=defaults, ambient_temp=ambient_temp)
        split = split_measured_energy(seg)
        total, mv, idle = split if split is not None else (None, None, None)
        if total is None and seg.measured_energy is not None:
            total = seg.measured_energy
        record = SegmentRecord(
            key=seg.key,
            features=feats,
            distance_km=seg.distance,
            profile=profile_from_samples(seg.samples),
            energy_total=total,
            energy_mv=mv,
            energy_id=idle,
        )
        self.add_record(record)
        return record

    # -- dataset protocol used by similarity / collab_filter / baselines --

    def pairs(self) -> list[PairKey]:
        return sorted({pair for pair, _ in self._records})

    def segment_ids(self) -> list[str]:
        return sorted({seg for _, seg in self._records})

    def segments_of(self, pair: PairKey) -> list[str]:
        return sorted(seg for p, seg in self._records if p == pair)

    def pairs_on(self, segment_id: str) -> list[PairKey]:
        return sorted(p for p, seg in self._records if seg == segment_id)

    def get(self, pair: PairKey, segment_id: str) -> Optional[SegmentRecord]:
        return self._records.get((pair, segment_id))

    def profile(self, pair: PairKey, segment_id: str) -> np.ndarray:
        record = self._records.get((pair, segment_id))
        if record is None:
            raise DataError(f"no record for {pair} on {segment_id!r}")
        return record.profile

    def features_of(self, pair: PairKey) -> list[SegmentFeatures]:
        return [self._records[(pair, seg)].features for seg in self.segments_of(pair)]

    # -- persistence ------------------------------------------------------

    _COLUMNS = (
        ["segment_id", "distance_km"]
        + list(CHANNELS)
        + ["energy_total", "energy_mv", "energy_id", "profile_10m"]
    )

    def save(self, directory: str | Path, config: Optional[dict] = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"pairs": [], "config": config or {}}
        for pair in self.pairs():
            driver, vehicle = pair
            fname = f"{quote(driver, safe='')}__{quote(vehicle, safe='')}.csv"
            index["pairs"].append({"driver": driver, "vehicle": vehicle, "file": fname})
            with (directory / fname).open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(self._COLUMNS)
                for seg in self.segments_of(pair):
                    record = self._records[(pair, seg)]
                    channels = record.features.as_channels()
                    row = [seg, repr(record.distance_km)]
                    row += [repr(channels[name]) for name in CHANNELS]
                    row += [
                        "" if record.energy_total is None else repr(record.energy_total),
                        "" if record.energy_mv is None else repr(record.energy_mv),
                        "" if record.energy_id is None else repr(record.energy_id),
                        "|".join(repr(float(x)) for x in record.profile),
                    ]
                    writer.writerow(row)
        (directory / "index.json").write_text(
            json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, directory: str | Path) -> "SegmentStore":
        directory = Path(directory)
        index_path = directory / "index.json"
        if not index_path.exists():
            raise DataError(f"{directory} is not a segment store (missing index.json)")
        index = json.loads(index_path.read_text(encoding="utf-8"))
        store = cls()
        for entry in index["pairs"]:
            driver, vehicle = entry["driver"], entry["vehicle"]
            with (directory / entry["file"]).open(newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    channels = {name: float(row[name]) for name in CHANNELS}
                    profile = np.asarray(
                        [float(x) for x in row["profile_10m"].split("|")] or [0.0]
                    )
                    store.add_record(
                        SegmentRecord(
                            key=DataPointKey(driver, vehicle, row["segment_id"]),
                            features=SegmentFeatures.from_channels(channels),
                            distance_km=float(row["distance_km"]),
                            profile=profile,
                            energy_total=_opt(row["energy_total"]),
                            energy_mv=_opt(row["energy_mv"]),
                            energy_id=_opt(row["energy_id"]),
                        )
                    )
        return store


def _opt(raw: str) -> Optional[float]:
    return None if raw == "" else float(raw)
