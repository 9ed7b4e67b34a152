"""Event ingestion, windowed aggregation, and synthetic data generation.

An incident is a labeled sequence of (time, feature_id) events over a
sparse binary feature space (706 features by default: ids [0, 298) are
tactic/technique features, the rest are rule features).  Aggregation
anchors windows at the first event time, uses half-open [start, end)
boundaries, and discards events at or beyond the one-hour horizon.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyRecord, InvalidConfig, SchemaMismatch

__all__ = [
    "DEFAULT_N_FEATURES",
    "DEFAULT_N_MITRE",
    "IncidentRecord",
    "AggregationConfig",
    "SynthConfig",
    "aggregate_events",
    "collapse_to_vector",
    "synth_generate",
    "informative_feature_ids",
    "split_train_val",
    "collapse_dataset",
    "write_dataset",
    "read_dataset",
    "default_feature_metadata",
    "write_feature_metadata",
    "read_feature_metadata",
    "write_collapsed_csv",
]

DEFAULT_N_FEATURES = 706
DEFAULT_N_MITRE = 298
DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class IncidentRecord:
    """One labeled incident: events sorted by time, label 1 = ransomware."""

    incident_id: str
    events: tuple[tuple[float, int], ...]
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidConfig(f"label must be 0 or 1, got {self.label}")
        times = [t for t, _ in self.events]
        if any(t < 0 for t in times):
            raise InvalidConfig("event times must be non-negative")
        if any(times[i] > times[i + 1] for i in range(len(times) - 1)):
            raise InvalidConfig("events must be sorted by time")
        if any(fid < 0 for _, fid in self.events):
            raise InvalidConfig("feature ids must be non-negative")


@dataclass(frozen=True)
class AggregationConfig:
    window_seconds: float = 60.0
    horizon_seconds: float = 3600.0
    mode: str = "collapsed_vector"

    def __post_init__(self):
        if not 0 < self.window_seconds <= self.horizon_seconds:
            raise InvalidConfig(
                f"need 0 < window ({self.window_seconds}) <= horizon ({self.horizon_seconds})"
            )
        if self.mode not in ("windowed_sequence", "collapsed_vector"):
            raise InvalidConfig(f"unknown aggregation mode {self.mode!r}")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic sparse, imbalanced incident data shaped like the real
    thing: ~1% positives, few active features per incident, a small
    planted set of class-informative features."""

    n_records: int = 20000
    n_features: int = DEFAULT_N_FEATURES
    positive_rate: float = 0.01
    n_informative: int = 10
    informative_rate_positive: float = 0.6
    informative_rate_negative: float = 0.05
    background_rate: float = 0.007
    horizon_seconds: float = 3600.0
    seed: int = 0

    def __post_init__(self):
        if self.n_records < 0:
            raise InvalidConfig("n_records must be >= 0")
        if not 0.0 < self.positive_rate < 1.0:
            raise InvalidConfig(f"positive_rate must be in (0,1), got {self.positive_rate}")
        if not 0 <= self.n_informative <= self.n_features:
            raise InvalidConfig("need 0 <= n_informative <= n_features")
        for name in ("informative_rate_positive", "informative_rate_negative", "background_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name} must be in [0,1], got {v}")


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _in_horizon_events(record: IncidentRecord, cfg: AggregationConfig):
    if not record.events:
        raise EmptyRecord(f"record {record.incident_id!r} has no events")
    t0 = record.events[0][0]
    return t0, [(t, fid) for t, fid in record.events if t < t0 + cfg.horizon_seconds]


def aggregate_events(
    record: IncidentRecord, cfg: AggregationConfig, n_features: int = DEFAULT_N_FEATURES
) -> list[np.ndarray]:
    """Binary vector per non-empty window; window k covers
    [t0 + k*window, t0 + (k+1)*window) anchored at the first event."""
    t0, events = _in_horizon_events(record, cfg)
    by_window: dict[int, np.ndarray] = {}
    for t, fid in events:
        if fid >= n_features:
            raise InvalidConfig(f"feature id {fid} >= n_features {n_features}")
        k = int((t - t0) // cfg.window_seconds)
        vec = by_window.get(k)
        if vec is None:
            vec = np.zeros(n_features, dtype=np.uint8)
            by_window[k] = vec
        vec[fid] = 1
    return [by_window[k] for k in sorted(by_window)]


def collapse_to_vector(
    record: IncidentRecord, cfg: AggregationConfig, n_features: int = DEFAULT_N_FEATURES
) -> np.ndarray:
    """Logical-or of all in-horizon events into one binary vector."""
    _, events = _in_horizon_events(record, cfg)
    vec = np.zeros(n_features, dtype=np.uint8)
    for _, fid in events:
        if fid >= n_features:
            raise InvalidConfig(f"feature id {fid} >= n_features {n_features}")
        vec[fid] = 1
    return vec


def collapse_dataset(
    records: list[IncidentRecord],
    cfg: AggregationConfig,
    n_features: int = DEFAULT_N_FEATURES,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack collapsed vectors into (X, y) float64 arrays."""
    x = np.zeros((len(records), n_features))
    y = np.zeros(len(records))
    for i, rec in enumerate(records):
        x[i] = collapse_to_vector(rec, cfg, n_features)
        y[i] = rec.label
    return x, y


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def informative_feature_ids(cfg: SynthConfig) -> np.ndarray:
    """The planted class-informative feature ids (deterministic in seed)."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    return np.sort(rng.choice(cfg.n_features, size=cfg.n_informative, replace=False))


def synth_generate(cfg: SynthConfig) -> list[IncidentRecord]:
    """Generate labeled incidents.

    Informative features fire with class-dependent probability, all
    others with the background rate.  Event times are uniform on
    [0, 1.1 * horizon) so horizon truncation is exercised; a record with
    no active feature gets one background event so no record is empty.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    informative = informative_feature_ids(cfg)
    info_mask = np.zeros(cfg.n_features, dtype=bool)
    info_mask[informative] = True
    t_max = cfg.horizon_seconds * 1.1

    records = []
    for i in range(cfg.n_records):
        label = int(rng.random() < cfg.positive_rate)
        p_info = cfg.informative_rate_positive if label else cfg.informative_rate_negative
        probs = np.where(info_mask, p_info, cfg.background_rate)
        active = np.flatnonzero(rng.random(cfg.n_features) < probs)
        if active.size == 0:
            active = np.array([int(rng.integers(cfg.n_features))])
        events = []
        for fid in active:
            n_events = 1 + int(rng.poisson(0.2))
            for t in rng.uniform(0.0, t_max, size=n_events):
                events.append((float(t), int(fid)))
        events.sort()
        records.append(
            IncidentRecord(incident_id=f"synth-{i:06d}", events=tuple(events), label=label)
        )
    return records


def split_train_val(
    records: list,
    fraction: float = 0.8,
    seed: int = 0,
    stratified: bool = False,
) -> tuple[list, list]:
    """Disjoint, exhaustive shuffle split; the stratified variant splits
    each class separately so the positive rate is preserved within one
    record per class."""
    if not 0.0 < fraction < 1.0:
        raise InvalidConfig(f"fraction must be in (0,1), got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    if not stratified:
        perm = rng.permutation(len(records))
        n_train = int(fraction * len(records) + 0.5)
        train_idx, val_idx = perm[:n_train], perm[n_train:]
    else:
        labels = np.array([r.label for r in records])
        train_parts, val_parts = [], []
        for cls in (0, 1):
            cls_idx = np.flatnonzero(labels == cls)
            perm = rng.permutation(cls_idx)
            n_train = int(fraction * len(perm) + 0.5)
            train_parts.append(perm[:n_train])
            val_parts.append(perm[n_train:])
        train_idx = rng.permutation(np.concatenate(train_parts))
        val_idx = rng.permutation(np.concatenate(val_parts))
    return [records[i] for i in train_idx], [records[i] for i in val_idx]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_dataset(records: list[IncidentRecord], path) -> None:
    """JSON lines, one record per line, deterministic byte-for-byte."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            doc = {
                "incident_id": rec.incident_id,
                "label": rec.label,
                "events": [[t, fid] for t, fid in rec.events],
            }
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def read_dataset(path) -> list[IncidentRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                records.append(
                    IncidentRecord(
                        incident_id=str(doc["incident_id"]),
                        events=tuple((float(t), int(fid)) for t, fid in doc["events"]),
                        label=int(doc["label"]),
                    )
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise SchemaMismatch(f"bad dataset line {line_no}: {exc}") from exc
    return records


def default_feature_metadata(
    n_features: int = DEFAULT_N_FEATURES, n_mitre: int = DEFAULT_N_MITRE
) -> dict[int, dict]:
    """Synthetic feature names: ids below n_mitre are technique features,
    the rest rule features."""
    meta = {}
    for fid in range(n_features):
        if fid < n_mitre:
            meta[fid] = {"kind": "mitre", "name": f"T{9000 + fid}"}
        else:
            meta[fid] = {"kind": "rule", "name": f"rule-{fid - n_mitre:04d}"}
    return meta


def write_feature_metadata(meta: dict[int, dict], path) -> None:
    doc = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "features": {str(fid): info for fid, info in sorted(meta.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_feature_metadata(path) -> dict[int, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise SchemaMismatch(
            f"unsupported feature metadata schema {doc.get('schema_version')!r}"
        )
    return {int(fid): info for fid, info in doc["features"].items()}


def write_collapsed_csv(
    records: list[IncidentRecord],
    cfg: AggregationConfig,
    path,
    n_features: int = DEFAULT_N_FEATURES,
) -> None:
    """Collapsed vectors as CSV: feature_0..feature_{F-1},label."""
    header = [f"feature_{i}" for i in range(n_features)] + ["label"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            vec = collapse_to_vector(rec, cfg, n_features)
            writer.writerow([int(v) for v in vec] + [rec.label])
