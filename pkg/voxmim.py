# voxmim.py
"""
Command-line entry point: synthetic data, preprocessing, masked image
modelling pre-training, downstream training, evaluation, paired comparison
and the full label-fraction reproduction grid.

    python voxmim.py {synth|preprocess|split|pretrain|train|evaluate|compare|reproduce} \
        [--config run.toml] [--seed N] [--log-level INFO] [--quiet] ...

Settings precedence: CLI flags > VOXMIM_* environment (.env honoured) >
TOML file > defaults. Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric.
"""

import argparse
import hashlib
import json
import logging
import sys
from contextvars import ContextVar
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
import pydantic
import scipy
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from architecture import (
    Classifier,
    ClassifierMode,
    MaskedAutoencoder,
    ModelConfig,
    build_classifier,
    build_mae,
    reconstruct,
)
from config import (
    ConfigError,
    VoxmimError,
    derive_rng,
    enable_determinism,
    setup_logging,
    torch_generator,
)
from corruption import MaskPolicy, corrupt, plan_to_json
from metrics import (
    MetricReport,
    compare_methods,
    evaluate,
    load_predictions,
    save_predictions,
)
import neuralops
from neuralops import NeuralOpsError
from synthdata import PhantomConfig, generate_dataset
from trainer import (
    DatasetManifest,
    DownstreamConfig,
    ManifestRecord,
    ManifestRole,
    NonFiniteLossError,
    TrainConfig,
    build_optimizer,
    load_checkpoint,
    predict_manifest,
    pretrain,
    read_checkpoint,
    read_manifest,
    restore_optimizer,
    sample_label_fraction,
    save_checkpoint,
    split_labeled,
    train_downstream,
    write_loss_history,
    write_manifest,
)
from volume import PreprocessConfig, Volume, load_volume, preprocess_with, save_volume

logger = logging.getLogger("voxmim")

ALLOWED_FRACTIONS = (0.10, 0.25, 0.50, 1.00)
RESULT_COLUMNS = ["method", "fraction", "seed", "metric", "point", "ci_lo", "ci_hi", "p_value"]

# method -> (pre-training policy or None, classifier mode)
METHODS: Dict[str, Tuple[Optional[str], ClassifierMode]] = {
    "random-probe": (None, ClassifierMode.LINEAR_PROBE),
    "random-finetune": (None, ClassifierMode.RANDOM_INIT),
    "mim-probe": ("dynamic", ClassifierMode.LINEAR_PROBE),
    "mim-finetune": ("dynamic", ClassifierMode.FINE_TUNE),
    "mim-static-probe": ("static", ClassifierMode.LINEAR_PROBE),
    "mim-static-finetune": ("static", ClassifierMode.FINE_TUNE),
}
DEFAULT_METHODS = ("random-probe", "random-finetune", "mim-probe", "mim-finetune")

_toml_path: ContextVar[Optional[Path]] = ContextVar("voxmim_toml_path", default=None)


# ----------------------------
# Run configuration
# ----------------------------
def check_fraction(fraction: float) -> float:
    for allowed in ALLOWED_FRACTIONS:
        if abs(fraction - allowed) < 1e-9:
            return allowed
    raise ConfigError(f"Label fraction {fraction} not allowed; choose one of {', '.join(f'{f:.2f}' for f in ALLOWED_FRACTIONS)}")


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bootstrap_n: int = Field(100, ge=2)
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    alpha: float = Field(0.05, gt=0.0, lt=1.0)
    train_fraction: float = Field(0.70, gt=0.0, lt=1.0)
    fractions: Tuple[float, ...] = ALLOWED_FRACTIONS
    # "test" subsamples the held-out set instead of the training set
    fraction_of: Literal["train", "test"] = "train"
    methods: Tuple[str, ...] = DEFAULT_METHODS
    reference_method: str = "mim-finetune"
    seeds: Tuple[int, ...] = (0, 1, 2)

    @model_validator(mode="after")
    def _check_grid(self):
        for f in self.fractions:
            check_fraction(f)
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"Unknown methods {unknown}; known: {sorted(METHODS)}")
        if self.reference_method not in self.methods:
            raise ValueError(f"reference_method '{self.reference_method}' is not in methods {list(self.methods)}")
        return self


class SynthSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    phantom: PhantomConfig = PhantomConfig()
    n_unlabeled: int = Field(64, ge=0)
    n_labeled: int = Field(40, ge=0)


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_dir: Path = Path("data")
    run_dir: Path = Path("runs/default")


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="VOXMIM_",
        env_nested_delimiter="__",
        extra="forbid",
    )

    seed: int = Field(0, ge=0)
    log_level: str = "INFO"
    debug_finite: bool = False
    preprocess: PreprocessConfig = PreprocessConfig()
    mask: MaskPolicy = MaskPolicy.dynamic()
    model: ModelConfig = ModelConfig()
    pretrain: TrainConfig = TrainConfig(epochs=50, batch_size=4)
    downstream: DownstreamConfig = DownstreamConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    synth: SynthSection = SynthSection()
    paths: PathsConfig = PathsConfig()

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings, dotenv_settings, file_secret_settings):
        sources = [init_settings, env_settings, dotenv_settings]
        toml = _toml_path.get()
        if toml is not None:
            sources.append(TomlConfigSettingsSource(settings_cls, toml_file=toml))
        return tuple(sources)


def load_run_config(path: Optional[Path] = None, **overrides) -> RunConfig:
    if path is not None and not Path(path).exists():
        raise ConfigError(f"Config file not found: {path}")
    token = _toml_path.set(Path(path) if path is not None else None)
    try:
        return RunConfig(**overrides)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration:\n{e}") from e
    finally:
        _toml_path.reset(token)


def config_digest(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_json(payload: Dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def write_provenance(cfg: RunConfig, out_dir: Path, command: str, argv: List[str]) -> Path:
    record = {
        "command": command,
        "argv": argv,
        "seed": cfg.seed,
        "config_sha256": config_digest(cfg),
        "config": cfg.model_dump(mode="json"),
        "versions": {
            "torch": torch.__version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "pydantic": pydantic.VERSION,
        },
    }
    return write_json(record, out_dir / "run.json")


# ----------------------------
# Helpers
# ----------------------------
def _train_config(section: TrainConfig, seed: int, quiet: bool) -> TrainConfig:
    return section.model_copy(update={"seed": seed, "progress": section.progress and not quiet})


def _load_classifier(path: Path) -> Classifier:
    model = load_checkpoint(path)
    if not isinstance(model, Classifier):
        raise ConfigError(f"{path} holds a masked autoencoder, expected a classifier checkpoint")
    return model


def _load_mae(path: Path) -> MaskedAutoencoder:
    model = load_checkpoint(path)
    if not isinstance(model, MaskedAutoencoder):
        raise ConfigError(f"{path} holds a classifier, expected a masked autoencoder checkpoint")
    return model


def _policy(cfg: RunConfig, mode: Optional[str]) -> MaskPolicy:
    if mode is None or mode == cfg.mask.mode:
        return cfg.mask
    return MaskPolicy.static() if mode == "static" else MaskPolicy.dynamic()


def run_pretraining(cfg: RunConfig, unlabeled: DatasetManifest, policy: MaskPolicy, seed: int, out: Path,
                    quiet: bool = False, resume: Optional[Path] = None) -> MaskedAutoencoder:
    """Pre-train (or continue the run checkpointed at `resume`) and save the MAE with its Adam state."""
    history: List[float] = []
    if resume is None:
        mae = build_mae(cfg.model, torch_generator(seed, "init", "mae", policy.mode))
    else:
        mae = _load_mae(resume)
        seed = mae.metadata.get("seed", seed)
        history = list(mae.metadata.get("loss_history", []))
    train_cfg = _train_config(cfg.pretrain, seed, quiet)
    optimizer = build_optimizer(mae, train_cfg)
    if resume is not None:
        restore_optimizer(resume, mae, optimizer)
    mae, history = pretrain(mae, unlabeled, policy, train_cfg, optimizer=optimizer, history=history)
    save_checkpoint(mae, out, metadata={"seed": seed, "policy": policy.model_dump(mode="json"),
                                        "loss_history": history, "epochs": len(history)}, optimizer=optimizer)
    write_loss_history(history, out.parent / f"{out.name}_loss.csv")
    return mae


def build_method_classifier(cfg: RunConfig, method: str, seed: int, maes: Dict[str, MaskedAutoencoder]) -> Classifier:
    policy, mode = METHODS[method]
    gen = torch_generator(seed, "init", "classifier", method)
    if policy is None and mode == ClassifierMode.LINEAR_PROBE:
        untrained = build_mae(cfg.model, torch_generator(seed, "init", "random-encoder"))
        return build_classifier(untrained, mode, gen)
    if policy is None:
        return build_classifier(None, mode, gen, config=cfg.model)
    return build_classifier(maes[policy], mode, gen)


def _preprocess_manifest(cfg: RunConfig, manifest: DatasetManifest, out_dir: Path, force: bool = False) -> DatasetManifest:
    vol_dir = out_dir / "volumes"
    records, done = [], 0
    for rec in manifest.records:
        target = vol_dir / rec.case_id
        if force or not (target.with_name(target.name + ".json").exists() and target.with_name(target.name + ".raw").exists()):
            save_volume(preprocess_with(load_volume(rec.volume), cfg.preprocess), target)
            done += 1
        records.append(ManifestRecord(rec.case_id, target, rec.label))
    logger.info(f"Preprocessed {done} volumes, {len(records) - done} already up to date")
    return DatasetManifest(tuple(records), manifest.role)


# ----------------------------
# Subcommands
# ----------------------------
def cmd_synth(cfg: RunConfig, args) -> None:
    out = Path(args.out or cfg.paths.data_dir)
    n_unlabeled = cfg.synth.n_unlabeled if args.n_unlabeled is None else args.n_unlabeled
    n_labeled = cfg.synth.n_labeled if args.n_labeled is None else args.n_labeled
    balance = cfg.synth.phantom.balance if args.balance is None else args.balance
    print(f"🚀 Generating {n_unlabeled} unlabeled + {n_labeled} labeled phantoms in {out}")
    generate_dataset(cfg.synth.phantom, n_unlabeled, n_labeled, balance, derive_rng(cfg.seed, "synth"), out,
                     progress=not args.quiet)
    write_provenance(cfg, out, "synth", args.argv)
    print(f"✅ Manifests: {out / 'unlabeled.csv'}, {out / 'labeled.csv'}")


def cmd_preprocess(cfg: RunConfig, args) -> None:
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    processed = _preprocess_manifest(cfg, manifest, out, force=args.force)
    path = write_manifest(processed, out / Path(args.manifest).name)
    write_provenance(cfg, out, "preprocess", args.argv)
    print(f"✅ Preprocessed manifest: {path}")


def cmd_split(cfg: RunConfig, args) -> None:
    manifest = read_manifest(args.manifest, ManifestRole.LABELED)
    fraction = cfg.evaluation.train_fraction if args.train_fraction is None else args.train_fraction
    train, test = split_labeled(manifest, fraction, derive_rng(cfg.seed, "split"))
    out = Path(args.out)
    write_manifest(train, out / "train.csv")
    write_manifest(test, out / "test.csv")
    write_provenance(cfg, out, "split", args.argv)
    print(f"✅ Split {len(manifest)} cases: {len(train)} train / {len(test)} test in {out}")


def cmd_pretrain(cfg: RunConfig, args) -> None:
    manifest = read_manifest(args.manifest)
    if manifest.role == ManifestRole.LABELED:
        logger.info("Labels present in the pre-training manifest are dropped")
        manifest = manifest.unlabeled_view()
    policy = _policy(cfg, args.mask)
    if args.resume is not None:
        saved = read_checkpoint(args.resume).metadata.get("policy")
        if saved is not None:
            saved = MaskPolicy.model_validate(saved)
            if args.mask is not None and args.mask != saved.mode:
                raise ConfigError(f"--mask {args.mask} does not match the {saved.mode} policy of {args.resume}")
            policy = saved
    out = Path(args.out or cfg.paths.run_dir)
    print(f"🚀 Pre-training ({policy.mode} masking) on {len(manifest)} volumes")
    mae = run_pretraining(cfg, manifest, policy, cfg.seed, out / "mae", quiet=args.quiet, resume=args.resume)

    if args.dump_reconstructions:
        dump_dir = out / "reconstructions"
        for i, rec in enumerate(manifest.records[: args.dump_reconstructions]):
            clean = load_volume(rec.volume)
            corrupted, grid, plan = corrupt(clean, policy, derive_rng(cfg.seed, "dump", i))
            with torch.no_grad():
                restored = reconstruct(mae, corrupted.to_tensor().unsqueeze(0), "eval")[0]
            save_volume(corrupted, dump_dir / f"{rec.case_id}_corrupted")
            save_volume(Volume.from_tensor(restored, clean.spacing), dump_dir / f"{rec.case_id}_reconstruction")
            (dump_dir / f"{rec.case_id}_plan.json").write_text(plan_to_json(plan, grid) + "\n", encoding="utf-8")
        logger.info(f"Dumped {min(args.dump_reconstructions, len(manifest))} reconstructions to {dump_dir}")

    write_provenance(cfg, out, "pretrain", args.argv)
    print(f"✅ Checkpoint: {out / 'mae.ckpt.json'}; loss history: {out / 'mae_loss.csv'}")


def cmd_train(cfg: RunConfig, args) -> None:
    history: List[float] = []
    if args.resume is not None:
        classifier = _load_classifier(args.resume)
        meta = classifier.metadata
        if args.mode is not None and ClassifierMode(args.mode) != classifier.mode:
            raise ConfigError(f"--mode {args.mode} does not match the {classifier.mode.value} classifier in {args.resume}")
        mode, seed = classifier.mode, meta.get("seed", cfg.seed)
        fraction = check_fraction(meta.get("fraction", args.fraction))
        method = args.method or meta.get("method", mode.value)
        history = list(meta.get("loss_history", []))
    else:
        if args.mode is None:
            raise ConfigError("train needs --mode unless it continues a checkpoint with --resume")
        fraction, mode, seed = check_fraction(args.fraction), ClassifierMode(args.mode), cfg.seed
        method = args.method or mode.value

    manifest = read_manifest(args.manifest, ManifestRole.LABELED)
    subset = sample_label_fraction(manifest, fraction, derive_rng(seed, "fraction", f"{fraction:.2f}"))
    if args.resume is None:
        mae = _load_mae(Path(args.mae)) if args.mae else None
        model_config = mae.config if mae is not None else cfg.model
        classifier = build_classifier(mae, mode, torch_generator(seed, "init", "classifier", mode.value),
                                      config=model_config, external_path=args.external)

    train_cfg = _train_config(cfg.downstream, seed, args.quiet)
    optimizer = build_optimizer(classifier, train_cfg)
    if args.resume is not None:
        restore_optimizer(args.resume, classifier, optimizer)
    classifier, history = train_downstream(classifier, subset, train_cfg, optimizer=optimizer, history=history)

    out = Path(args.out or cfg.paths.run_dir)
    name = out / f"classifier_{mode.value}_{fraction:.2f}"
    save_checkpoint(classifier, name, metadata={
        "method": method, "fraction": fraction, "seed": seed,
        "n_cases": len(subset), "loss_history": history, "epochs": len(history),
    }, optimizer=optimizer)
    write_loss_history(history, name.parent / f"{name.name}_loss.csv")
    write_provenance(cfg, out, "train", args.argv)
    print(f"✅ Trained {mode.value} classifier on {len(subset)} cases: {name}.ckpt.json")


def _report_rows(report: MetricReport, method: str, fraction: float, seed: int, p_value: Optional[float] = None) -> List[Dict]:
    rows = []
    for row in report.rows():
        p = "" if p_value is None or row["metric"] != "auc" else p_value
        rows.append({"method": method, "fraction": f"{fraction:.2f}", "seed": seed, **row, "p_value": p})
    return rows


def cmd_evaluate(cfg: RunConfig, args) -> None:
    classifier = _load_classifier(Path(args.checkpoint))
    manifest = read_manifest(args.manifest, ManifestRole.LABELED)
    predictions = predict_manifest(classifier, manifest)
    report = evaluate(predictions, cfg.evaluation.bootstrap_n, derive_rng(cfg.seed, "bootstrap"),
                      cfg.evaluation.threshold, seed=cfg.seed)

    out = Path(args.out or cfg.paths.run_dir)
    meta = getattr(classifier, "metadata", {})
    method, fraction = meta.get("method", classifier.mode.value), float(meta.get("fraction", 1.0))
    save_predictions(predictions, out / "predictions.csv")
    write_json({"method": method, "fraction": fraction, "seed": cfg.seed, **report.to_dict()}, out / "metrics.json")
    pd.DataFrame(_report_rows(report, method, fraction, cfg.seed), columns=RESULT_COLUMNS).to_csv(
        out / "metrics.csv", index=False, lineterminator="\n")
    write_provenance(cfg, out, "evaluate", args.argv)
    print(f"✅ AUC {report.auc.point:.3f} [{report.auc.ci_lo:.3f}, {report.auc.ci_hi:.3f}] -> {out / 'metrics.json'}")


def cmd_compare(cfg: RunConfig, args) -> None:
    manifest_a = read_manifest(args.manifest, ManifestRole.LABELED)
    manifest_b = read_manifest(args.manifest_b, ManifestRole.LABELED) if args.manifest_b else manifest_a
    pred_a = predict_manifest(_load_classifier(Path(args.a)), manifest_a)
    pred_b = predict_manifest(_load_classifier(Path(args.b)), manifest_b)
    comparison = compare_methods(pred_a, pred_b, cfg.evaluation.bootstrap_n, derive_rng(cfg.seed, "compare"),
                                 alpha=cfg.evaluation.alpha, seed=cfg.seed)
    out = Path(args.out or cfg.paths.run_dir)
    write_json({"a": str(args.a), "b": str(args.b), **comparison.to_dict()}, out / "comparison.json")
    write_provenance(cfg, out, "compare", args.argv)
    flag = "significant" if comparison.significant else "not significant"
    print(f"✅ p = {comparison.p_value:.4g} ({flag} at {cfg.evaluation.alpha}) -> {out / 'comparison.json'}")


def cmd_reproduce(cfg: RunConfig, args) -> None:
    """
    Grid methods x fractions x seeds. Completed cells (predictions.csv
    present) and finished pre-training checkpoints are reused on re-run.
    """
    ev = cfg.evaluation
    data_dir, run_dir = Path(cfg.paths.data_dir), Path(args.out or cfg.paths.run_dir)
    if not (data_dir / "labeled.csv").exists() or not (data_dir / "unlabeled.csv").exists():
        print(f"⚠️ No dataset in {data_dir}, generating phantoms")
        generate_dataset(cfg.synth.phantom, cfg.synth.n_unlabeled, cfg.synth.n_labeled, cfg.synth.phantom.balance,
                         derive_rng(cfg.seed, "synth"), data_dir, progress=not args.quiet)

    prep_dir = run_dir / "preprocessed"
    unlabeled = _preprocess_manifest(cfg, read_manifest(data_dir / "unlabeled.csv"), prep_dir)
    labeled = _preprocess_manifest(cfg, read_manifest(data_dir / "labeled.csv"), prep_dir)
    train, test = split_labeled(labeled, ev.train_fraction, derive_rng(cfg.seed, "split"))
    write_manifest(train, run_dir / "train.csv")
    write_manifest(test, run_dir / "test.csv")
    write_provenance(cfg, run_dir, "reproduce", args.argv)

    rows: List[Dict] = []
    policies = sorted({METHODS[m][0] for m in ev.methods if METHODS[m][0] is not None})
    print(f"🚀 Grid: {len(ev.methods)} methods x {len(ev.fractions)} fractions x {len(ev.seeds)} seeds")
    for seed in ev.seeds:
        seed_dir = run_dir / f"seed_{seed}"
        maes: Dict[str, MaskedAutoencoder] = {}
        for policy_mode in policies:
            ckpt = seed_dir / f"mae_{policy_mode}"
            if (seed_dir / f"mae_{policy_mode}.ckpt.json").exists():
                maes[policy_mode] = _load_mae(ckpt)
            else:
                maes[policy_mode] = run_pretraining(cfg, unlabeled, _policy(cfg, policy_mode), seed, ckpt, args.quiet)

        for fraction in ev.fractions:
            fraction = check_fraction(fraction)
            tag = f"{fraction:.2f}"
            if ev.fraction_of == "train":
                train_subset = sample_label_fraction(train, fraction, derive_rng(seed, "fraction", tag))
                test_subset = test
            else:
                train_subset = train
                test_subset = sample_label_fraction(test, fraction, derive_rng(seed, "fraction", tag))

            predictions = {}
            for method in ev.methods:
                cell = seed_dir / f"fraction_{tag}" / method
                if (cell / "predictions.csv").exists():
                    predictions[method] = load_predictions(cell / "predictions.csv")
                    logger.info(f"Reusing {cell}")
                    continue
                classifier = build_method_classifier(cfg, method, seed, maes)
                classifier, history = train_downstream(classifier, train_subset,
                                                       _train_config(cfg.downstream, seed, args.quiet))
                save_checkpoint(classifier, cell / "classifier", metadata={
                    "method": method, "fraction": fraction, "seed": seed, "loss_history": history,
                })
                predictions[method] = predict_manifest(classifier, test_subset)
                save_predictions(predictions[method], cell / "predictions.csv")

            reference = predictions[ev.reference_method]
            for method in ev.methods:
                report = evaluate(predictions[method], ev.bootstrap_n, derive_rng(seed, "bootstrap", tag, method),
                                  ev.threshold, seed=seed)
                p_value = None
                if method != ev.reference_method:
                    p_value = compare_methods(predictions[method], reference, ev.bootstrap_n,
                                              derive_rng(seed, "compare", tag, method), alpha=ev.alpha).p_value
                rows.extend(_report_rows(report, method, fraction, seed, p_value))
            logger.info(f"Seed {seed}, fraction {tag}: " + ", ".join(
                f"{r['method']} {r['point']:.3f}" for r in rows[-len(ev.methods) * 5:] if r["metric"] == "auc"))

    df = pd.DataFrame(rows, columns=RESULT_COLUMNS).sort_values(["method", "fraction", "seed", "metric"], kind="stable")
    df.to_csv(run_dir / "results.csv", index=False, lineterminator="\n")
    write_json({"rows": json.loads(df.to_json(orient="records", double_precision=15))}, run_dir / "results.json")
    print(f"✅ Results: {run_dir / 'results.csv'} ({len(df)} rows)")


# ----------------------------
# Argument parsing
# ----------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML run config (default: built-in defaults)")
    common.add_argument("--seed", type=int, default=None, help="Master seed for every derived stream (default: 0)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: INFO)")
    common.add_argument("--quiet", action="store_true", help="Hide progress bars")

    parser = _Parser(prog="voxmim", description="3D masked image modelling pre-training and lesion classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic phantom dataset")
    p.add_argument("--out", type=Path, default=None, help="Output directory (default: paths.data_dir)")
    p.add_argument("--n-unlabeled", type=int, default=None, help="Unlabeled phantoms (default: 64; 346 at cohort scale)")
    p.add_argument("--n-labeled", type=int, default=None, help="Labeled phantoms (default: 40; 204 at cohort scale)")
    p.add_argument("--balance", type=float, default=None, help="Positive share of labeled cases (default: 0.5)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="Resample, clip 1st/99th percentiles and normalise to [0, 1]")
    p.add_argument("--manifest", type=Path, required=True, help="Input manifest CSV (id,volume,label)")
    p.add_argument("--out", type=Path, required=True, help="Output directory for volumes and the new manifest")
    p.add_argument("--force", action="store_true", help="Re-process ids that already have output")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", parents=[common], help="Stratified train/test split of a labeled manifest")
    p.add_argument("--manifest", type=Path, required=True, help="Labeled manifest CSV")
    p.add_argument("--out", type=Path, required=True, help="Directory for train.csv and test.csv")
    p.add_argument("--train-fraction", type=float, default=None, help="Training share per class (default: 0.70)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", parents=[common], help="Masked image modelling pre-training")
    p.add_argument("--manifest", type=Path, required=True, help="Unlabeled manifest CSV (labels, if any, are dropped)")
    p.add_argument("--out", type=Path, default=None, help="Run directory (default: paths.run_dir)")
    p.add_argument("--mask", choices=["static", "dynamic"], default=None, help="Masking policy (default: mask.mode, dynamic)")
    p.add_argument("--dump-reconstructions", type=int, default=0, metavar="K",
                   help="Write corrupted input, reconstruction and mask plan for the first K cases (default: 0)")
    p.add_argument("--resume", type=Path, default=None,
                   help="Continue the run saved in this MAE checkpoint up to pretrain.epochs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="Train a downstream lesion classifier")
    p.add_argument("--manifest", type=Path, required=True, help="Labeled training manifest CSV")
    p.add_argument("--mode", choices=[m.value for m in ClassifierMode], default=None,
                   help="probe: frozen pre-trained encoder; finetune: encoder re-trained; random: from scratch; "
                        "external: encoder from --external (required unless --resume)")
    p.add_argument("--fraction", type=float, default=1.0, help="Label fraction: 0.10, 0.25, 0.50 or 1.00 (default: 1.00)")
    p.add_argument("--mae", type=Path, default=None, help="Pre-trained MAE checkpoint (probe/finetune)")
    p.add_argument("--external", type=Path, default=None, help="Checkpoint providing the encoder (external mode)")
    p.add_argument("--method", default=None, help="Method name stored in the checkpoint (default: the mode)")
    p.add_argument("--resume", type=Path, default=None,
                   help="Continue the run saved in this classifier checkpoint up to downstream.epochs")
    p.add_argument("--out", type=Path, default=None, help="Run directory (default: paths.run_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="Bootstrap metrics of a classifier on a test manifest")
    p.add_argument("--checkpoint", type=Path, required=True, help="Classifier checkpoint")
    p.add_argument("--manifest", type=Path, required=True, help="Labeled test manifest CSV")
    p.add_argument("--out", type=Path, default=None, help="Output directory (default: paths.run_dir)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="Paired bootstrap + Wilcoxon comparison of two classifiers")
    p.add_argument("--a", type=Path, required=True, help="First classifier checkpoint")
    p.add_argument("--b", type=Path, required=True, help="Second classifier checkpoint")
    p.add_argument("--manifest", type=Path, required=True, help="Labeled test manifest CSV")
    p.add_argument("--manifest-b", type=Path, default=None, help="Separate test manifest for --b (must hold the same ids)")
    p.add_argument("--out", type=Path, default=None, help="Output directory (default: paths.run_dir)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reproduce", parents=[common], help="Full methods x label fractions x seeds grid")
    p.add_argument("--out", type=Path, default=None, help="Run directory (default: paths.run_dir)")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        overrides = {"seed": args.seed} if args.seed is not None else {}
        cfg = load_run_config(args.config, **overrides)
        setup_logging(args.log_level or cfg.log_level)
        enable_determinism()
        neuralops.DEBUG_FINITE = neuralops.DEBUG_FINITE or cfg.debug_finite
        args.func(cfg, args)
        return 0
    except ConfigError as e:
        logger.error(str(e))
        return 1
    except (NonFiniteLossError, NeuralOpsError) as e:
        logger.error(f"Numeric failure: {e}")
        return 3
    except (VoxmimError, FileNotFoundError) as e:
        logger.error(str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
