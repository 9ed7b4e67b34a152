"""End-to-end command tests on small configurations: file schemas,
determinism, exit codes."""

import csv
import hashlib
import json

import numpy as np
import pytest

from rssbnn import cli
from rssbnn import data as dp
from rssbnn.layers import load_checkpoint


def small_config(tmp_path, **overrides):
    cfg = {
        "seed": 11,
        "data": {"n_records": 300, "n_features": 24, "n_informative": 4,
                 "positive_rate": 0.15, "background_rate": 0.08},
        "model": {"hidden_dims": [8]},
        "train": {"epochs": 3, "batch_size": 64, "mc_samples": 8, "s_val": 2,
                  "learning_rate": 5e-3},
        "eval": {"posterior_samples": 8, "top_k": 5, "ig_steps": 16,
                 "attribution_samples_per_class": 20, "grid_points": 21},
    }
    for section, vals in overrides.items():
        if isinstance(vals, dict):
            cfg.setdefault(section, {}).update(vals)
        else:
            cfg[section] = vals
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full generate -> train -> evaluate -> importance run."""
    root = tmp_path_factory.mktemp("pipeline")
    config = small_config(root)
    data_dir = root / "data"
    run_dir = root / "run"
    eval_dir = root / "eval"
    imp_dir = root / "imp"
    assert cli.main(["generate-data", "--config", str(config), "--out", str(data_dir),
                     "--export-csv"]) == 0
    assert cli.main(["train", "--config", str(config), "--dataset",
                     str(data_dir / "dataset.jsonl"), "--out", str(run_dir)]) == 0
    ckpt = run_dir / "checkpoint_best.json"
    assert cli.main(["evaluate", "--config", str(config), "--checkpoint", str(ckpt),
                     "--dataset", str(data_dir / "dataset.jsonl"), "--out", str(eval_dir)]) == 0
    assert cli.main(["importance", "--config", str(config), "--checkpoint", str(ckpt),
                     "--dataset", str(data_dir / "dataset.jsonl"), "--out", str(imp_dir)]) == 0
    return {"root": root, "config": config, "data": data_dir, "run": run_dir,
            "eval": eval_dir, "imp": imp_dir}


class TestGenerateData:
    def test_outputs_and_manifest(self, pipeline):
        data_dir = pipeline["data"]
        assert (data_dir / "dataset.jsonl").exists()
        assert (data_dir / "features.json").exists()
        assert (data_dir / "collapsed.csv").exists()
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["schema_version"] == 1
        assert manifest["command"] == "generate-data"
        assert manifest["n_records"] == 300
        assert manifest["config"]["seed"] == 11
        records = dp.read_dataset(data_dir / "dataset.jsonl")
        assert len(records) == 300

    def test_collapsed_csv_header(self, pipeline):
        with open(pipeline["data"] / "collapsed.csv") as fh:
            header = next(csv.reader(fh))
        assert header[:2] == ["feature_0", "feature_1"]
        assert header[-1] == "label"
        assert len(header) == 25

    def test_byte_identical_reruns(self, tmp_path):
        config = small_config(tmp_path, data={"n_records": 80})
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        assert cli.main(["generate-data", "--config", str(config), "--out", str(out1)]) == 0
        assert cli.main(["generate-data", "--config", str(config), "--out", str(out2)]) == 0
        for name in ("dataset.jsonl", "features.json", "manifest.json"):
            assert sha(out1 / name) == sha(out2 / name), name

    def test_zero_records_valid(self, tmp_path):
        config = small_config(tmp_path, data={"n_records": 0})
        out = tmp_path / "empty"
        assert cli.main(["generate-data", "--config", str(config), "--out", str(out)]) == 0
        assert (out / "dataset.jsonl").read_text() == ""
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["n_records"] == 0


class TestTrain:
    def test_run_directory_contents(self, pipeline):
        run = pipeline["run"]
        assert (run / "checkpoint_best.json").exists()
        assert (run / "report.jsonl").exists()
        assert (run / "summary.json").exists()
        assert (run / "training_curves.png").exists()
        lines = (run / "report.jsonl").read_text().splitlines()
        assert len(lines) == 3
        summary = json.loads((run / "summary.json").read_text())
        assert summary["epochs_run"] == 3
        assert 0 <= summary["best_epoch"] < 3

    def test_checkpoint_bit_identical_across_runs(self, tmp_path):
        config = small_config(tmp_path, data={"n_records": 120}, train={"epochs": 2})
        data_dir = tmp_path / "data"
        cli.main(["generate-data", "--config", str(config), "--out", str(data_dir)])
        r1, r2 = tmp_path / "r1", tmp_path / "r2"
        for out in (r1, r2):
            assert cli.main(["train", "--config", str(config), "--dataset",
                             str(data_dir / "dataset.jsonl"), "--out", str(out)]) == 0
        assert sha(r1 / "checkpoint_best.json") == sha(r2 / "checkpoint_best.json")

    def test_gaussian_baseline_trains(self, tmp_path):
        config = small_config(tmp_path, data={"n_records": 120}, train={"epochs": 2})
        data_dir = tmp_path / "data"
        cli.main(["generate-data", "--config", str(config), "--out", str(data_dir)])
        out = tmp_path / "gauss"
        assert cli.main(["train", "--config", str(config), "--dataset",
                         str(data_dir / "dataset.jsonl"), "--out", str(out),
                         "--posterior-kind", "gaussian"]) == 0
        model = load_checkpoint(out / "checkpoint_best.json")
        assert model.posterior_kind == "gaussian"

    def test_epoch_smoke_run_emits_records(self, tmp_path):
        config = small_config(tmp_path, data={"n_records": 120})
        data_dir = tmp_path / "data"
        cli.main(["generate-data", "--config", str(config), "--out", str(data_dir)])
        out = tmp_path / "smoke"
        assert cli.main(["train", "--config", str(config), "--dataset",
                         str(data_dir / "dataset.jsonl"), "--out", str(out),
                         "--epochs", "2"]) == 0
        assert len((out / "report.jsonl").read_text().splitlines()) == 2

    def test_fixed_beta_zero_matches_plain_fc_training(self, tmp_path):
        # degenerate posterior + zero KL weight reproduces the plain FC
        # trajectory; compare final train NLL within 1e-6
        import rssbnn.autodiff as ad
        from rssbnn.distributions import PriorConfig
        from rssbnn.layers import BnnModel, ForwardMode
        from rssbnn.training import TrainConfig, train, weighted_bce_sum

        rng = np.random.default_rng(31)
        x = (rng.uniform(0, 1, size=(160, 6)) < 0.3).astype(float)
        y = (x[:, 0] + x[:, 1] > 0).astype(float)

        def final_nll(kind):
            # deterministic_bias keeps the zero-initialized bias a point
            # value; otherwise its vanishing sample noise can flip relu
            # masks sitting exactly at zero for all-zero input rows
            model = BnnModel([6, 4, 1], PriorConfig(), posterior_kind=kind,
                             rng=np.random.default_rng(7), deterministic_bias=True)
            if kind == "spike_slab_radial":
                for layer in model.layers:
                    layer.theta_pi_w.assign(np.full(layer.theta_pi_w.value.shape, 700.0))
                    layer.rho_w.assign(np.full(layer.rho_w.value.shape, -700.0))
            cfg = TrainConfig(epochs=5, batch_size=40, learning_rate=5e-3,
                              kl_scale_mode="fixed_beta", fixed_beta=0.0,
                              mc_samples=1, s_val=1, seed=13, class_weight_positive=1.0)
            train(model, (x, y), (x, y), cfg)
            logits = model.forward(ad.constant(x), ForwardMode.POSTERIOR_MEAN)
            return weighted_bce_sum(logits, y, 1.0).item()

        assert abs(final_nll("spike_slab_radial") - final_nll("deterministic")) < 1e-6


class TestEvaluate:
    def test_outputs(self, pipeline):
        out = pipeline["eval"]
        for name in ("metrics.json", "metrics.csv", "roc_band.csv", "roc_curve.csv",
                     "roc.png", "manifest.json"):
            assert (out / name).exists(), name
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["schema_version"] == 1
        assert set(metrics) >= {"selected", "fixed_0.5"}
        for point in ("selected", "fixed_0.5"):
            doc = metrics[point]
            assert 0.0 <= doc["auc"] <= 1.0
            assert doc["counts"]["tp"] + doc["counts"]["fn"] > 0

    def test_roc_band_csv_schema(self, pipeline):
        with open(pipeline["eval"] / "roc_band.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["fpr", "tpr_mean", "tpr_low", "tpr_high"]
        assert len(rows) == 22  # 21 grid points + header
        low = np.array([float(r[2]) for r in rows[1:]])
        high = np.array([float(r[3]) for r in rows[1:]])
        assert np.all(low <= high + 1e-15)

    def test_deterministic_checkpoint_band_is_degenerate(self, tmp_path):
        config = small_config(tmp_path, data={"n_records": 150}, train={"epochs": 2})
        data_dir = tmp_path / "data"
        cli.main(["generate-data", "--config", str(config), "--out", str(data_dir)])
        run = tmp_path / "fc_run"
        assert cli.main(["train", "--config", str(config), "--dataset",
                         str(data_dir / "dataset.jsonl"), "--out", str(run),
                         "--posterior-kind", "deterministic"]) == 0
        out = tmp_path / "fc_eval"
        assert cli.main(["evaluate", "--config", str(config),
                         "--checkpoint", str(run / "checkpoint_best.json"),
                         "--dataset", str(data_dir / "dataset.jsonl"),
                         "--out", str(out)]) == 0
        with open(out / "roc_band.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        widths = [float(r[3]) - float(r[2]) for r in rows]
        assert all(w == 0.0 for w in widths)

    def test_auc_beats_permuted_labels(self, pipeline, tmp_path):
        # permutation control: shuffling labels destroys the signal
        records = dp.read_dataset(pipeline["data"] / "dataset.jsonl")
        labels = [r.label for r in records]
        rng = np.random.default_rng(55)
        shuffled = rng.permutation(labels)
        permuted = [
            dp.IncidentRecord(r.incident_id, r.events, int(l))
            for r, l in zip(records, shuffled)
        ]
        permuted_path = tmp_path / "permuted.jsonl"
        dp.write_dataset(permuted, permuted_path)
        out = tmp_path / "perm_eval"
        assert cli.main(["evaluate", "--config", str(pipeline["config"]),
                         "--checkpoint", str(pipeline["run"] / "checkpoint_best.json"),
                         "--dataset", str(permuted_path), "--out", str(out)]) == 0
        auc_true = json.loads((pipeline["eval"] / "manifest.json").read_text())["auc_mean_scores"]
        auc_perm = json.loads((out / "manifest.json").read_text())["auc_mean_scores"]
        assert auc_true > auc_perm

    def test_single_posterior_sample_degenerates_to_one_curve(self, pipeline, tmp_path):
        config = json.loads((pipeline["config"]).read_text())
        config["eval"]["posterior_samples"] = 1
        cfg_path = tmp_path / "r1.json"
        cfg_path.write_text(json.dumps(config))
        out = tmp_path / "r1_eval"
        assert cli.main(["evaluate", "--config", str(cfg_path),
                         "--checkpoint", str(pipeline["run"] / "checkpoint_best.json"),
                         "--dataset", str(pipeline["data"] / "dataset.jsonl"),
                         "--out", str(out)]) == 0
        with open(out / "roc_band.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        for row in rows:
            assert float(row[1]) == float(row[2]) == float(row[3])

    def test_schema_mismatch_exit_code(self, pipeline, tmp_path):
        # dataset with a different feature count than the checkpoint
        config = small_config(tmp_path, data={"n_records": 50, "n_features": 9,
                                              "n_informative": 2})
        other = tmp_path / "other"
        cli.main(["generate-data", "--config", str(config), "--out", str(other)])
        code = cli.main(["evaluate", "--config", str(config),
                         "--checkpoint", str(pipeline["run"] / "checkpoint_best.json"),
                         "--dataset", str(other / "dataset.jsonl"),
                         "--out", str(tmp_path / "bad_eval")])
        assert code == 2


class TestImportance:
    def test_outputs(self, pipeline):
        out = pipeline["imp"]
        for name in ("attribution.csv", "attribution_summary.json", "importance.png",
                     "manifest.json"):
            assert (out / name).exists(), name
        with open(out / "attribution.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["target", "feature_id", "name", "kind", "score", "rank"]
        targets = {r[0] for r in rows[1:]}
        assert targets == {"ransomware", "other"}
        assert len(rows) == 1 + 2 * 5  # top_k=5 per target

    def test_top_k_zero(self, pipeline, tmp_path):
        out = tmp_path / "imp0"
        assert cli.main(["importance", "--config", str(pipeline["config"]),
                         "--checkpoint", str(pipeline["run"] / "checkpoint_best.json"),
                         "--dataset", str(pipeline["data"] / "dataset.jsonl"),
                         "--out", str(out), "--top-k", "0"]) == 0
        with open(out / "attribution.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1  # header only


class TestConfigHandling:
    def test_invalid_json_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert cli.main(["generate-data", "--config", str(bad),
                         "--out", str(tmp_path / "x")]) == 2

    def test_unknown_section_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"optimizer": {"lr": 1}}))
        assert cli.main(["generate-data", "--config", str(bad),
                         "--out", str(tmp_path / "x")]) == 2

    def test_invalid_value_rejected(self, tmp_path):
        config = small_config(tmp_path, data={"positive_rate": 3.0})
        assert cli.main(["generate-data", "--config", str(config),
                         "--out", str(tmp_path / "x")]) == 2

    def test_missing_dataset_io_error(self, tmp_path):
        config = small_config(tmp_path)
        code = cli.main(["train", "--config", str(config),
                         "--dataset", str(tmp_path / "nope.jsonl"),
                         "--out", str(tmp_path / "x")])
        assert code == 4

    def test_kl_scale_flag_forms(self, tmp_path):
        config = small_config(tmp_path, data={"n_records": 100}, train={"epochs": 1})
        data_dir = tmp_path / "data"
        cli.main(["generate-data", "--config", str(config), "--out", str(data_dir)])
        assert cli.main(["train", "--config", str(config), "--dataset",
                         str(data_dir / "dataset.jsonl"), "--out", str(tmp_path / "a"),
                         "--kl-scale", "fixed_beta=0"]) == 0
        assert cli.main(["train", "--config", str(config), "--dataset",
                         str(data_dir / "dataset.jsonl"), "--out", str(tmp_path / "b"),
                         "--kl-scale", "per_dataset"]) == 0
        assert cli.main(["train", "--config", str(config), "--dataset",
                         str(data_dir / "dataset.jsonl"), "--out", str(tmp_path / "c"),
                         "--kl-scale", "per_dataset=0.5"]) == 2
        assert cli.main(["train", "--config", str(config), "--dataset",
                         str(data_dir / "dataset.jsonl"), "--out", str(tmp_path / "d"),
                         "--kl-scale", "annealed"]) == 2

    def test_seed_override(self, tmp_path):
        config = small_config(tmp_path, data={"n_records": 40})
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        cli.main(["generate-data", "--config", str(config), "--out", str(out1),
                  "--seed", "99"])
        cli.main(["generate-data", "--config", str(config), "--out", str(out2)])
        assert sha(out1 / "dataset.jsonl") != sha(out2 / "dataset.jsonl")
        manifest = json.loads((out1 / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 99
