"""Windowing, horizon truncation, synthetic generation, splitting, and
file round-trips."""

import csv
import hashlib
import math

import numpy as np
import pytest

from rssbnn import data as dp
from rssbnn.data import AggregationConfig, IncidentRecord, SynthConfig
from rssbnn.errors import EmptyRecord, InvalidConfig, SchemaMismatch


def record(events, label=0, rid="r0"):
    return IncidentRecord(incident_id=rid, events=tuple(events), label=label)


def brute_force_windows(events, window, horizon, n_features):
    """Independent binning oracle: direct interval membership checks."""
    t0 = events[0][0]
    kept = [(t, f) for t, f in events if t < t0 + horizon]
    max_k = int(math.floor((horizon - 1e-12) / window)) + 1
    out = {}
    for k in range(max_k + 1):
        lo, hi = t0 + k * window, t0 + (k + 1) * window
        vec = np.zeros(n_features, dtype=np.uint8)
        for t, f in kept:
            if lo <= t < hi:
                vec[f] = 1
        if vec.any():
            out[k] = vec
    return [out[k] for k in sorted(out)]


def random_record(rng, n_features=20, rid="r"):
    n_events = int(rng.integers(1, 30))
    times = np.sort(rng.uniform(0, 4500, size=n_events))
    fids = rng.integers(0, n_features, size=n_events)
    return record([(float(t), int(f)) for t, f in zip(times, fids)], rid=rid)


class TestAggregation:
    def test_same_window_same_feature(self):
        rec = record([(0.0, 3), (59.0, 3)])
        windows = dp.aggregate_events(rec, AggregationConfig(), n_features=10)
        assert len(windows) == 1
        assert windows[0][3] == 1
        assert windows[0].sum() == 1

    def test_boundary_splits_windows(self):
        # 61 >= 60 places the second event in window 1 (oracle-checked).
        rec = record([(0.0, 3), (61.0, 4)])
        windows = dp.aggregate_events(rec, AggregationConfig(), n_features=10)
        assert len(windows) == 2
        oracle = brute_force_windows(rec.events, 60.0, 3600.0, 10)
        assert len(oracle) == 2
        for got, want in zip(windows, oracle):
            np.testing.assert_array_equal(got, want)

    def test_exact_window_boundary_goes_right(self):
        rec = record([(0.0, 1), (60.0, 2)])
        windows = dp.aggregate_events(rec, AggregationConfig(), n_features=5)
        assert len(windows) == 2
        assert windows[0][1] == 1 and windows[0][2] == 0
        assert windows[1][2] == 1 and windows[1][1] == 0

    def test_horizon_truncation(self):
        # events at or beyond t0 + 3600 are dropped
        rec = record([(0.0, 1), (3599.999, 2), (3600.0, 3), (3601.0, 4)])
        windows = dp.aggregate_events(rec, AggregationConfig(), n_features=10)
        merged = np.bitwise_or.reduce(np.array(windows), axis=0)
        assert merged[1] == 1 and merged[2] == 1
        assert merged[3] == 0 and merged[4] == 0

    def test_anchored_at_first_event(self):
        rec = record([(1000.0, 1), (1059.0, 2), (1060.0, 3)])
        windows = dp.aggregate_events(rec, AggregationConfig(), n_features=5)
        assert len(windows) == 2
        assert windows[0][1] == 1 and windows[0][2] == 1 and windows[0][3] == 0

    def test_empty_record_rejected(self):
        with pytest.raises(EmptyRecord):
            dp.aggregate_events(record([]), AggregationConfig())
        with pytest.raises(EmptyRecord):
            dp.collapse_to_vector(record([]), AggregationConfig())

    def test_randomized_against_binning_oracle(self):
        rng = np.random.default_rng(0)
        cfg = AggregationConfig()
        for i in range(50):
            rec = random_record(rng, rid=f"r{i}")
            got = dp.aggregate_events(rec, cfg, n_features=20)
            want = brute_force_windows(rec.events, 60.0, 3600.0, 20)
            assert len(got) == len(want)
            for g, w in zip(got, want):
                np.testing.assert_array_equal(g, w)


class TestCollapse:
    def test_repeated_feature_idempotent(self):
        rec = record([(0.0, 3), (5.0, 3), (10.0, 3)])
        vec = dp.collapse_to_vector(rec, AggregationConfig(), n_features=8)
        assert vec[3] == 1
        assert vec.sum() == 1

    def test_equals_or_reduction_of_windows(self):
        rng = np.random.default_rng(1)
        cfg = AggregationConfig()
        for i in range(1000):
            rec = random_record(rng, rid=f"r{i}")
            collapsed = dp.collapse_to_vector(rec, cfg, n_features=20)
            windows = dp.aggregate_events(rec, cfg, n_features=20)
            merged = np.bitwise_or.reduce(np.array(windows), axis=0)
            np.testing.assert_array_equal(collapsed, merged)

    def test_equals_set_union_oracle(self):
        rng = np.random.default_rng(2)
        cfg = AggregationConfig()
        for i in range(100):
            rec = random_record(rng, rid=f"r{i}")
            t0 = rec.events[0][0]
            expected_ids = {f for t, f in rec.events if t < t0 + cfg.horizon_seconds}
            vec = dp.collapse_to_vector(rec, cfg, n_features=20)
            assert set(np.flatnonzero(vec)) == expected_ids

    def test_outputs_binary_and_fixed_length(self):
        rng = np.random.default_rng(3)
        cfg = AggregationConfig()
        for i in range(50):
            rec = random_record(rng, rid=f"r{i}")
            vec = dp.collapse_to_vector(rec, cfg, n_features=20)
            assert vec.shape == (20,)
            assert set(np.unique(vec)) <= {0, 1}


class TestSynthGenerate:
    def test_positive_count_within_binomial_bounds(self):
        cfg = SynthConfig(n_records=20_000, seed=5)
        records = dp.synth_generate(cfg)
        n_pos = sum(r.label for r in records)
        expected = 20_000 * 0.01
        sd = math.sqrt(20_000 * 0.01 * 0.99)
        assert abs(n_pos - expected) < 3 * sd

    def test_mean_active_features_in_band(self):
        # background rate targets a typical active count well under 10
        cfg = SynthConfig(n_records=2000, seed=6)
        records = dp.synth_generate(cfg)
        agg = AggregationConfig()
        counts = [dp.collapse_to_vector(r, agg, cfg.n_features).sum() for r in records]
        assert 4.0 <= float(np.mean(counts)) <= 8.0

    def test_deterministic_given_seed(self):
        a = dp.synth_generate(SynthConfig(n_records=200, seed=7))
        b = dp.synth_generate(SynthConfig(n_records=200, seed=7))
        assert a == b

    def test_no_empty_records(self):
        records = dp.synth_generate(SynthConfig(n_records=3000, seed=8, background_rate=0.0,
                                                n_informative=0))
        assert all(len(r.events) >= 1 for r in records)

    def test_truncation_exercised(self):
        # timestamps reach beyond the horizon so some events get dropped
        cfg = SynthConfig(n_records=500, seed=9)
        records = dp.synth_generate(cfg)
        assert any(t >= 3600.0 for r in records for t, _ in r.events)

    def test_informative_ids_deterministic_and_within_range(self):
        cfg = SynthConfig(n_records=1, seed=10)
        ids1 = dp.informative_feature_ids(cfg)
        ids2 = dp.informative_feature_ids(cfg)
        np.testing.assert_array_equal(ids1, ids2)
        assert len(ids1) == cfg.n_informative
        assert np.all(ids1 < cfg.n_features)


class TestSplit:
    def test_sizes(self):
        records = dp.synth_generate(SynthConfig(n_records=10, seed=11))
        train, val = dp.split_train_val(records, fraction=0.8, seed=0)
        assert (len(train), len(val)) == (8, 2)

    def test_disjoint_and_exhaustive(self):
        records = dp.synth_generate(SynthConfig(n_records=57, seed=12))
        train, val = dp.split_train_val(records, fraction=0.8, seed=1)
        ids = lambda rs: {r.incident_id for r in rs}
        assert ids(train) & ids(val) == set()
        assert ids(train) | ids(val) == ids(records)

    def test_stratified_counts(self):
        rng = np.random.default_rng(13)
        records = [
            record([(0.0, 0)], label=1 if i < 10 else 0, rid=f"r{i}") for i in range(1000)
        ]
        train, val = dp.split_train_val(records, fraction=0.8, seed=2, stratified=True)
        assert sum(r.label for r in train) == 8
        assert sum(r.label for r in val) == 2
        assert len(train) == 800

    def test_same_seed_identical(self):
        records = dp.synth_generate(SynthConfig(n_records=40, seed=14))
        a = dp.split_train_val(records, seed=3)
        b = dp.split_train_val(records, seed=3)
        assert [r.incident_id for r in a[0]] == [r.incident_id for r in b[0]]
        assert [r.incident_id for r in a[1]] == [r.incident_id for r in b[1]]


class TestFiles:
    def test_dataset_round_trip(self, tmp_path):
        records = dp.synth_generate(SynthConfig(n_records=30, seed=15))
        path = tmp_path / "ds.jsonl"
        dp.write_dataset(records, path)
        loaded = dp.read_dataset(path)
        assert loaded == records

    def test_dataset_bytes_deterministic(self, tmp_path):
        records = dp.synth_generate(SynthConfig(n_records=30, seed=16))
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        dp.write_dataset(records, p1)
        dp.write_dataset(records, p2)
        h = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
        assert h(p1) == h(p2)

    def test_bad_dataset_line_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"incident_id": "x", "label": 1}\n')
        with pytest.raises(SchemaMismatch):
            dp.read_dataset(path)

    def test_feature_metadata_defaults_and_round_trip(self, tmp_path):
        meta = dp.default_feature_metadata()
        assert len(meta) == 706
        kinds = [meta[i]["kind"] for i in range(706)]
        assert kinds.count("mitre") == 298
        assert kinds.count("rule") == 408
        path = tmp_path / "features.json"
        dp.write_feature_metadata(meta, path)
        assert dp.read_feature_metadata(path) == meta

    def test_collapsed_csv_schema(self, tmp_path):
        records = dp.synth_generate(SynthConfig(n_records=5, n_features=12, seed=17))
        path = tmp_path / "collapsed.csv"
        dp.write_collapsed_csv(records, AggregationConfig(), path, n_features=12)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [f"feature_{i}" for i in range(12)] + ["label"]
        assert len(rows) == 6
        for row in rows[1:]:
            assert set(row[:-1]) <= {"0", "1"}

    def test_record_validation(self):
        with pytest.raises(InvalidConfig):
            record([(5.0, 1), (1.0, 2)])  # unsorted
        with pytest.raises(InvalidConfig):
            record([(-1.0, 1)])  # negative time
        with pytest.raises(InvalidConfig):
            record([(0.0, 0)], label=3)
