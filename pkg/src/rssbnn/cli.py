"""Command-line entry point tying the pipeline together.

Subcommands: generate-data, train, evaluate, importance.  Every command
records a manifest (resolved config plus seed) next to its outputs so a
run is reproducible from its output directory alone.

Exit codes: 0 success, 2 invalid config or schema, 3 training
divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import data as dp
from . import evaluation as ev
from . import plots
from .distributions import PriorConfig
from .errors import Divergence, InvalidConfig, RssbnnError, SchemaMismatch
from .layers import BnnModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

MANIFEST_SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "n_records": 20000,
        "n_features": 706,
        "positive_rate": 0.01,
        "n_informative": 10,
        "informative_rate_positive": 0.6,
        "informative_rate_negative": 0.05,
        "background_rate": 0.007,
    },
    "aggregation": {
        "window_seconds": 60.0,
        "horizon_seconds": 3600.0,
        "mode": "collapsed_vector",
    },
    "model": {
        "hidden_dims": [128, 64],
        "posterior_kind": "spike_slab_radial",
        "prior": {"lambda_p": 0.1, "mu_p": 0.0, "sigma_p": 1.0},
        "deterministic_bias": False,
        "radial_group": "per_layer",
    },
    "train": {
        "epochs": 400,
        "batch_size": 256,
        "learning_rate": 1e-3,
        "kl_scale_mode": "per_batch_count",
        "fixed_beta": 1.0,
        "tau": 0.5,
        "mc_samples": 1000,
        "s_val": 8,
        "class_weight_positive": None,
        "val_fraction": 0.2,
        "stratified_split": True,
    },
    "eval": {
        "posterior_samples": 100,
        "threshold_policy": "max_gmean",
        "grid_points": 101,
        "top_k": 20,
        "ig_steps": 256,
        "attribution_samples_per_class": 200,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise InvalidConfig("config root must be a JSON object")
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    return _deep_merge(DEFAULT_CONFIG, user)


def _write_manifest(out_dir: Path, command: str, config: dict, extra: dict | None = None) -> None:
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "command": command,
        "config": config,
    }
    if extra:
        doc.update(extra)
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _synth_config(config: dict) -> dp.SynthConfig:
    d = config["data"]
    return dp.SynthConfig(
        n_records=d["n_records"],
        n_features=d["n_features"],
        positive_rate=d["positive_rate"],
        n_informative=d["n_informative"],
        informative_rate_positive=d["informative_rate_positive"],
        informative_rate_negative=d["informative_rate_negative"],
        background_rate=d["background_rate"],
        horizon_seconds=config["aggregation"]["horizon_seconds"],
        seed=config["seed"],
    )


def _aggregation_config(config: dict) -> dp.AggregationConfig:
    a = config["aggregation"]
    return dp.AggregationConfig(
        window_seconds=a["window_seconds"],
        horizon_seconds=a["horizon_seconds"],
        mode=a["mode"],
    )


def _train_config(config: dict, checkpoint_dir: str | None) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        kl_scale_mode=t["kl_scale_mode"],
        fixed_beta=t["fixed_beta"],
        tau=t["tau"],
        mc_samples=t["mc_samples"],
        s_val=t["s_val"],
        seed=config["seed"],
        class_weight_positive=t["class_weight_positive"],
        checkpoint_dir=checkpoint_dir,
    )


def _build_model(config: dict, n_features: int, rng: np.random.Generator) -> BnnModel:
    m = config["model"]
    prior = PriorConfig(**m["prior"])
    dims = [n_features] + list(m["hidden_dims"]) + [1]
    return BnnModel(
        dims,
        prior,
        posterior_kind=m["posterior_kind"],
        rng=rng,
        deterministic_bias=m["deterministic_bias"],
        radial_group=m["radial_group"],
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate_data(config: dict, out_dir: str, export_csv: bool = False) -> Path:
    """Write dataset.jsonl, features.json, and a manifest; optionally a
    collapsed-vector CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth = _synth_config(config)
    agg = _aggregation_config(config)
    records = dp.synth_generate(synth)
    dp.write_dataset(records, out / "dataset.jsonl")
    meta = dp.default_feature_metadata(synth.n_features)
    dp.write_feature_metadata(meta, out / "features.json")
    if export_csv:
        dp.write_collapsed_csv(records, agg, out / "collapsed.csv", synth.n_features)
    n_pos = sum(r.label for r in records)
    _write_manifest(
        out,
        "generate-data",
        config,
        {
            "n_records": len(records),
            "n_positive": n_pos,
            "positive_rate_observed": (n_pos / len(records)) if records else 0.0,
            "informative_feature_ids": [int(i) for i in dp.informative_feature_ids(synth)],
        },
    )
    return out


def cmd_train(config: dict, dataset_path: str, out_dir: str) -> Path:
    """Split, train, and write the run directory (best checkpoint,
    per-epoch report, summary, training-curve figure)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    agg = _aggregation_config(config)
    if agg.mode != "collapsed_vector":
        raise InvalidConfig("training consumes collapsed vectors; set aggregation.mode accordingly")
    records = dp.read_dataset(dataset_path)
    if not records:
        raise InvalidConfig(f"dataset {dataset_path} is empty")
    n_features = config["data"]["n_features"]
    t = config["train"]
    train_recs, val_recs = dp.split_train_val(
        records,
        fraction=1.0 - t["val_fraction"],
        seed=config["seed"],
        stratified=t["stratified_split"],
    )
    x_tr, y_tr = dp.collapse_dataset(train_recs, agg, n_features)
    x_va, y_va = dp.collapse_dataset(val_recs, agg, n_features)

    rng = np.random.default_rng(np.random.SeedSequence(config["seed"], spawn_key=(0,)))
    model = _build_model(config, n_features, rng)
    cfg = _train_config(config, str(out))
    report = train(model, (x_tr, y_tr), (x_va, y_va), cfg)
    if cfg.epochs == 0:
        save_checkpoint(model, out / "checkpoint_best.json", rng_seed=cfg.seed)
    report.write_jsonl(out / "report.jsonl")
    (out / "summary.json").write_text(
        json.dumps(
            {
                "schema_version": MANIFEST_SCHEMA_VERSION,
                "best_epoch": report.best_epoch,
                "best_val_loss": report.best_val_loss,
                "epochs_run": len(report.records),
                "n_train": len(y_tr),
                "n_val": len(y_va),
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    if report.records:
        plots.save_training_curves(report, out / "training_curves.png")
    _write_manifest(out, "train", config, {"dataset": str(dataset_path)})
    return out


def _scores_for_model(model: BnnModel, x: np.ndarray, n_draws: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10,)))
    return model.predict_proba(x, n_draws, rng)


def cmd_evaluate(config: dict, checkpoint_path: str, dataset_path: str, out_dir: str) -> Path:
    """Emit the metric suite (JSON/CSV), ROC band and mean-curve CSVs,
    and the rendered ROC figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(checkpoint_path)
    agg = _aggregation_config(config)
    records = dp.read_dataset(dataset_path)
    if not records:
        raise InvalidConfig(f"dataset {dataset_path} is empty")
    x, y = dp.collapse_dataset(records, agg, config["data"]["n_features"])
    if x.shape[1] != model.in_dim:
        raise SchemaMismatch(
            f"dataset has {x.shape[1]} features but checkpoint expects {model.in_dim}"
        )
    e = config["eval"]
    n_draws = e["posterior_samples"] if model.posterior_kind != "deterministic" else 1
    mean_scores, matrix = _scores_for_model(model, x, n_draws, config["seed"])

    grid = np.linspace(0.0, 1.0, e["grid_points"])
    dist = ev.roc_distribution_from_scores(matrix, y, grid)
    mean_curve = ev.roc_points(mean_scores, y)

    threshold = ev.select_threshold(mean_scores, y, e["threshold_policy"])
    reports = {
        "selected": ev.confusion_metrics(mean_scores, y, threshold),
        "fixed_0.5": ev.confusion_metrics(mean_scores, y, 0.5),
    }
    ev.write_metrics_json(reports, out / "metrics.json")
    ev.write_metrics_csv(reports, out / "metrics.csv")
    ev.write_roc_band_csv(dist, out / "roc_band.csv")
    ev.write_roc_curve_csv(mean_curve, out / "roc_curve.csv")
    plots.save_roc_band_figure(
        dist, out / "roc.png", title=f"{model.posterior_kind} ({n_draws} posterior draws)"
    )
    _write_manifest(
        out,
        "evaluate",
        config,
        {
            "checkpoint": str(checkpoint_path),
            "dataset": str(dataset_path),
            "threshold": threshold,
            "auc_mean_scores": mean_curve.auc,
        },
    )
    return out


def cmd_importance(
    config: dict,
    checkpoint_path: str,
    dataset_path: str,
    out_dir: str,
    top_k: int | None = None,
) -> Path:
    """Emit the feature-attribution ranking CSV, a kind-level summary,
    and the rendered bar figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(checkpoint_path)
    agg = _aggregation_config(config)
    records = dp.read_dataset(dataset_path)
    x, y = dp.collapse_dataset(records, agg, config["data"]["n_features"])
    if x.shape[1] != model.in_dim:
        raise SchemaMismatch(
            f"dataset has {x.shape[1]} features but checkpoint expects {model.in_dim}"
        )
    e = config["eval"]
    k = e["top_k"] if top_k is None else top_k
    report = ev.feature_ranking(
        model,
        x,
        y,
        top_k=k,
        steps=e["ig_steps"],
        max_per_class=e["attribution_samples_per_class"],
    )
    features_path = Path(dataset_path).parent / "features.json"
    meta = dp.read_feature_metadata(features_path) if features_path.exists() else {}
    ev.write_attribution_csv(report, meta, out / "attribution.csv")
    plots.save_attribution_figure(report, meta, out / "importance.png")

    # Kind-level summary: how much attribution mass lands on technique
    # features versus rule features (reported, not asserted).
    kind_mass: dict[str, float] = {}
    for fid, score in enumerate(report.positive_mean):
        kind = meta.get(fid, {}).get("kind", "unknown")
        kind_mass[kind] = kind_mass.get(kind, 0.0) + abs(float(score))
    (out / "attribution_summary.json").write_text(
        json.dumps(
            {
                "schema_version": MANIFEST_SCHEMA_VERSION,
                "abs_attribution_mass_by_kind": kind_mass,
                "n_positive_inputs": report.n_positive_inputs,
                "n_negative_inputs": report.n_negative_inputs,
                "top_k": k,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    _write_manifest(
        out,
        "importance",
        config,
        {"checkpoint": str(checkpoint_path), "dataset": str(dataset_path), "top_k": k},
    )
    return out


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _apply_overrides(config: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    if getattr(args, "n_records", None) is not None:
        config["data"]["n_records"] = args.n_records
    if getattr(args, "epochs", None) is not None:
        config["train"]["epochs"] = args.epochs
    if getattr(args, "posterior_kind", None) is not None:
        config["model"]["posterior_kind"] = args.posterior_kind
    kl_scale = getattr(args, "kl_scale", None)
    if kl_scale is not None:
        mode, _, value = kl_scale.partition("=")
        config["train"]["kl_scale_mode"] = mode
        if value:
            if mode != "fixed_beta":
                raise InvalidConfig(f"only fixed_beta takes a value, got {kl_scale!r}")
            try:
                config["train"]["fixed_beta"] = float(value)
            except ValueError as exc:
                raise InvalidConfig(f"bad kl-scale value {value!r}") from exc
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rssbnn",
        description="Radial spike-and-slab BNN pipeline: data, training, evaluation, attribution.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", required=True, help="output directory")

    p_gen = sub.add_parser("generate-data", help="write a synthetic incident dataset")
    common(p_gen)
    p_gen.add_argument("--n-records", type=int, default=None)
    p_gen.add_argument("--export-csv", action="store_true", help="also write collapsed.csv")

    p_train = sub.add_parser("train", help="train a model on a dataset")
    common(p_train)
    p_train.add_argument("--dataset", required=True, help="dataset.jsonl path")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument(
        "--posterior-kind", choices=("spike_slab_radial", "gaussian", "deterministic")
    )
    p_train.add_argument(
        "--kl-scale",
        default=None,
        help="per_dataset | per_batch_count | fixed_beta=VALUE",
    )

    p_eval = sub.add_parser("evaluate", help="metrics and ROC outputs for a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)

    p_imp = sub.add_parser("importance", help="integrated-gradients feature ranking")
    common(p_imp)
    p_imp.add_argument("--checkpoint", required=True)
    p_imp.add_argument("--dataset", required=True)
    p_imp.add_argument("--top-k", type=int, default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
        if args.command == "generate-data":
            out = cmd_generate_data(config, args.out, export_csv=args.export_csv)
        elif args.command == "train":
            out = cmd_train(config, args.dataset, args.out)
        elif args.command == "evaluate":
            out = cmd_evaluate(config, args.checkpoint, args.dataset, args.out)
        elif args.command == "importance":
            out = cmd_importance(config, args.checkpoint, args.dataset, args.out, args.top_k)
        else:  # pragma: no cover - argparse enforces the choices
            raise InvalidConfig(f"unknown command {args.command!r}")
    except Divergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (InvalidConfig, SchemaMismatch) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except RssbnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return 4
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
