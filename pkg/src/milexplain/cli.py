"""Command-line entry point for reproducible MIL explanation experiments.

Four subcommands cover the pipeline: ``make-dataset`` samples synthetic bag
collections to disk, ``train`` fits models from a JSON experiment config,
``explain`` attributes a single bag with any method, and ``eval`` scores
explainers across seeds. Identical config and seed always produce
byte-identical outputs; every run directory carries a manifest with the
config hash and library versions.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .datasets import (
    BagFormatError,
    IdxFormatError,
    ToyTask,
    read_bag,
    write_bag,
)
from .evaluation import (
    heatmap_svg,
    morf_curve,
    postprocess_heatmap,
    run_faithfulness_eval,
    run_toy_eval,
)
from .explainers import (
    ALL_METHODS,
    Attribution,
    LRPConfig,
    METHOD_ATTENTION,
    METHOD_COMBINED,
    METHOD_GXI,
    METHOD_LRP,
    METHOD_ONE_REMOVED,
    METHOD_RANDOM,
    METHOD_ROLLOUT,
    METHOD_SINGLE,
    PropagationError,
    attention_rollout,
    explain_attention,
    explain_combined,
    explain_gxi,
    explain_lrp,
    explain_one_removed,
    explain_random,
    explain_single,
    make_explainer,
)
from .models import (
    AttnMILModel,
    CheckpointError,
    FeaturizerAccuracyError,
    MiniTransMIL,
    load_checkpoint,
    save_checkpoint,
)
from .serialize import config_hash, write_csv, write_json
from .training import TrainConfig, TrainingDivergedError, train_mil, write_training_log
from .workspace import task_dataset

MODEL_ARCHITECTURES = ("attn_mil", "mini_transmil")


class CliError(Exception):
    """User-facing command error; message printed, exit code 1."""


@dataclass
class ExperimentConfig:
    architecture: str
    output_dir: Path
    seeds: list[int]
    task: ToyTask | None = None
    bag_dir: Path | None = None
    train: dict = field(default_factory=dict)
    lrp: LRPConfig = field(default_factory=LRPConfig)
    explainers: list[str] = field(default_factory=lambda: [METHOD_LRP, METHOD_SINGLE, METHOD_RANDOM])
    dataset_sizes: tuple = (2000, 500, 1000)
    bag_size: int = 30

    def __post_init__(self):
        if self.architecture not in MODEL_ARCHITECTURES:
            raise CliError(
                f"unknown architecture {self.architecture!r}; choose from {MODEL_ARCHITECTURES}"
            )
        if not self.seeds:
            raise CliError("seeds list must not be empty")
        if (self.task is None) == (self.bag_dir is None):
            raise CliError("config needs exactly one of 'task' or 'bag_dir'")
        if self.bag_dir is not None and not self.bag_dir.is_dir():
            raise CliError(f"bag directory does not exist: {self.bag_dir}")
        for m in self.explainers:
            if m not in ALL_METHODS:
                raise CliError(f"unknown explainer {m!r}; choose from {ALL_METHODS}")
        if "seed" in self.train:
            raise CliError("per-run seeds come from 'seeds'; drop 'seed' from 'train'")

    def to_jsonable(self) -> dict:
        return {
            "architecture": self.architecture,
            "output_dir": str(self.output_dir),
            "seeds": list(self.seeds),
            "task": self.task.value if self.task else None,
            "bag_dir": str(self.bag_dir) if self.bag_dir else None,
            "train": dict(self.train),
            "lrp": {"gamma": self.lrp.gamma, "epsilon": self.lrp.epsilon},
            "explainers": list(self.explainers),
            "dataset_sizes": list(self.dataset_sizes),
            "bag_size": self.bag_size,
        }


def _parse_task(name: str) -> ToyTask:
    for task in ToyTask:
        if task.value == name:
            return task
    raise CliError(f"unknown task {name!r}; choose from {[t.value for t in ToyTask]}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file does not exist: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    known = {
        "architecture", "output_dir", "seeds", "task", "bag_dir",
        "train", "lrp", "explainers", "dataset_sizes", "bag_size",
    }
    unknown = set(raw) - known
    if unknown:
        raise CliError(f"{path}: unknown config keys {sorted(unknown)}")
    for req in ("architecture", "output_dir", "seeds"):
        if req not in raw:
            raise CliError(f"{path}: missing required key {req!r}")
    lrp_raw = raw.get("lrp", {})
    try:
        lrp = LRPConfig(**lrp_raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: bad 'lrp' section: {exc}") from exc
    return ExperimentConfig(
        architecture=raw["architecture"],
        output_dir=Path(raw["output_dir"]),
        seeds=[int(s) for s in raw["seeds"]],
        task=_parse_task(raw["task"]) if raw.get("task") else None,
        bag_dir=Path(raw["bag_dir"]) if raw.get("bag_dir") else None,
        train=dict(raw.get("train", {})),
        lrp=lrp,
        explainers=list(raw.get("explainers", [METHOD_LRP, METHOD_SINGLE, METHOD_RANDOM])),
        dataset_sizes=tuple(raw.get("dataset_sizes", (2000, 500, 1000))),
        bag_size=int(raw.get("bag_size", 30)),
    )


def _train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    try:
        return TrainConfig(seed=seed, **cfg.train)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad 'train' section: {exc}") from exc


def _new_model(architecture: str, n_classes: int, seed: int):
    if architecture == "attn_mil":
        return AttnMILModel(n_classes=n_classes, seed=seed)
    return MiniTransMIL(n_classes=n_classes, seed=seed)


def _read_split(bag_dir: Path, split: str) -> list:
    split_dir = bag_dir / split
    if not split_dir.is_dir():
        raise CliError(f"bag directory has no {split!r} split: {split_dir}")
    bags = [read_bag(d) for d in sorted(split_dir.iterdir()) if d.is_dir()]
    if not bags:
        raise CliError(f"no bags found under {split_dir}")
    return bags


def _load_splits(cfg: ExperimentConfig, seed: int):
    """(train, val, test) bag lists for one run seed."""
    if cfg.task is not None:
        return task_dataset(cfg.task, seed, sizes=cfg.dataset_sizes, bag_size=cfg.bag_size)
    return tuple(_read_split(cfg.bag_dir, s) for s in ("train", "val", "test"))


def _run_manifest(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "command": command,
        "config": cfg.to_jsonable(),
        "config_hash": config_hash(cfg.to_jsonable()),
        "seeds": list(cfg.seeds),
        "versions": {
            "milexplain": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def cmd_make_dataset(args) -> int:
    if args.bags <= 0 or args.val_bags <= 0 or args.test_bags <= 0:
        raise CliError("bag counts must be positive")
    if args.bag_size <= 0:
        raise CliError("bag size must be positive")
    task = _parse_task(args.task)
    sizes = (args.bags, args.val_bags, args.test_bags)
    splits = task_dataset(task, args.seed, sizes=sizes, bag_size=args.bag_size)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    for split_name, bags in zip(("train", "val", "test"), splits):
        for i, bag in enumerate(bags):
            write_bag(bag, out / split_name / f"bag_{i:05d}")
        print(f"wrote {len(bags)} {split_name} bags")
    manifest = {
        "task": task.value,
        "seed": args.seed,
        "bag_size": args.bag_size,
        "feature_dim": int(splits[0][0].dim),
        "splits": {name: len(bags) for name, bags in zip(("train", "val", "test"), splits)},
    }
    manifest["config_hash"] = config_hash(manifest)
    write_json(out / "manifest.json", manifest)
    print(f"dataset manifest: {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_json(cfg.output_dir / "run.json", _run_manifest(cfg, "train"))
    for seed in cfg.seeds:
        train_bags, val_bags, _ = _load_splits(cfg, seed)
        n_classes = cfg.task.n_classes if cfg.task else max(b.label for b in train_bags) + 1
        model = _new_model(cfg.architecture, n_classes, seed)
        config = _train_config(cfg, seed)
        model, log = train_mil(model, train_bags, val_bags, config)
        seed_dir = cfg.output_dir / f"seed{seed}"
        save_checkpoint(model, seed_dir / "checkpoint", seed=seed, train_config=vars(config))
        write_training_log(log, seed_dir / "log.csv")
        best = log[model.best_epoch]
        print(
            f"seed {seed}: {len(log)} epochs, best epoch {best.epoch} "
            f"val_loss {best.val_loss:.4f} val_auroc {best.val_auroc:.4f}"
        )
    return 0


def _checkpoint_model(path) -> object:
    model = load_checkpoint(path)
    if model.architecture not in MODEL_ARCHITECTURES:
        raise CliError(f"checkpoint at {path} holds a {model.architecture}, not a MIL model")
    return model


def _compute_attribution(model, bag, args) -> Attribution:
    method = args.method
    needs_class = method in (METHOD_LRP, METHOD_GXI, METHOD_SINGLE, METHOD_ONE_REMOVED, METHOD_COMBINED)
    target = None
    if needs_class:
        if args.target_class is not None:
            target = args.target_class
        elif args.true_class:
            target = bag.label
        else:
            probs_logits = model.forward(bag.instance_features).data[0]
            target = int(np.argmax(probs_logits))
    if method == METHOD_LRP:
        return explain_lrp(model, bag, target, LRPConfig(gamma=args.gamma, epsilon=args.epsilon))
    if method == METHOD_ATTENTION:
        return explain_attention(model, bag)
    if method == METHOD_ROLLOUT:
        return attention_rollout(model, bag)
    if method == METHOD_GXI:
        return explain_gxi(model, bag, target)
    if method == METHOD_SINGLE:
        return explain_single(model, bag, target)
    if method == METHOD_ONE_REMOVED:
        return explain_one_removed(model, bag, target)
    if method == METHOD_COMBINED:
        return explain_combined(model, bag, target)
    return explain_random(bag, args.seed)


def cmd_explain(args) -> int:
    model = _checkpoint_model(args.checkpoint)
    bag = read_bag(Path(args.bag))
    attribution = _compute_attribution(model, bag, args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "method": attribution.method,
        "class": attribution.target_class,
        "instance_ids": list(bag.instance_ids),
        "scores": attribution.scores,
        "conservation_deficit": attribution.conservation_deficit,
        "absorbed_relevance": attribution.absorbed_relevance,
    }
    if attribution.feature_relevance is not None:
        sidecar = out.with_suffix(".relevance.bin")
        sidecar.write_bytes(attribution.feature_relevance.astype("<f8").tobytes())
        payload["feature_relevance"] = {
            "file": sidecar.name,
            "dtype": "<f8",
            "shape": list(attribution.feature_relevance.shape),
        }
    write_json(out, payload)
    print(f"wrote {out}")
    if args.svg:
        _, rgb = postprocess_heatmap(attribution.scores)
        svg_path = Path(args.svg)
        svg_path.parent.mkdir(parents=True, exist_ok=True)
        svg_path.write_text(heatmap_svg(rgb) + "\n")
        print(f"wrote {svg_path}")
    return 0


def _eval_checkpoints(cfg: ExperimentConfig) -> dict:
    missing = [
        str(cfg.output_dir / f"seed{seed}" / "checkpoint")
        for seed in cfg.seeds
        if not (cfg.output_dir / f"seed{seed}" / "checkpoint" / "manifest.json").exists()
    ]
    if missing:
        raise CliError("missing checkpoints: " + ", ".join(missing))
    return {
        seed: _checkpoint_model(cfg.output_dir / f"seed{seed}" / "checkpoint")
        for seed in cfg.seeds
    }


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    models = _eval_checkpoints(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_json(cfg.output_dir / f"eval_{args.mode}_run.json", _run_manifest(cfg, f"eval-{args.mode}"))
    per_seed_means: dict[str, list] = {}
    for seed in cfg.seeds:
        model = models[seed]
        _, _, test_bags = _load_splits(cfg, seed)
        suite = {m: make_explainer(m, lrp_config=cfg.lrp, seed=seed) for m in cfg.explainers}
        if args.mode == "toy":
            if cfg.task is None:
                raise CliError("toy mode needs a synthetic 'task'; bag directories carry no evidence")
            report = run_toy_eval(cfg.task, model, suite, test_bags)
        else:
            curve_rows: list = []

            def sink(bag_id, method, curve):
                curve_rows.extend(
                    (bag_id, method, k, s) for k, s in enumerate(curve.scores)
                )

            report = run_faithfulness_eval(model, suite, test_bags, curve_sink=sink)
            write_csv(
                cfg.output_dir / f"curves_seed{seed}.csv",
                ["bag_id", "method", "k", "score"],
                curve_rows,
            )
            print(f"seed {seed}: excluded {report.n_excluded} misclassified bags")
        write_json(cfg.output_dir / f"eval_{args.mode}_seed{seed}.json", report.to_jsonable())
        for name, stat in report.methods.items():
            per_seed_means.setdefault(name, []).append(stat.mean)
        means = {m: f"{s.mean:.4f}" for m, s in report.methods.items()}
        print(f"seed {seed}: {means}")
    aggregate = {
        "mode": args.mode,
        "seeds": list(cfg.seeds),
        "methods": {
            name: {
                "mean": float(np.mean(vals)),
                "std": float(np.std(vals)),
                "n": len(vals),
            }
            for name, vals in per_seed_means.items()
        },
    }
    write_json(cfg.output_dir / f"eval_{args.mode}.json", aggregate)
    print(f"aggregate report: {cfg.output_dir / f'eval_{args.mode}.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="milexplain",
        description="Train, explain, and evaluate multiple-instance-learning models.",
    )
    parser.add_argument("--version", action="version", version=f"milexplain {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="sample a synthetic bag dataset to disk")
    p.add_argument("--task", required=True, help="4-bags | pos-neg | adjacent-pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bags", type=int, default=2000, help="training bags (default 2000)")
    p.add_argument("--val-bags", type=int, default=500)
    p.add_argument("--test-bags", type=int, default=1000)
    p.add_argument("--bag-size", type=int, default=30)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="train models for every seed in a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="attribute one bag with one method")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bag", required=True, help="bag directory")
    p.add_argument("--method", required=True, choices=ALL_METHODS)
    p.add_argument("--class", dest="target_class", type=int, default=None)
    p.add_argument("--true-class", action="store_true", help="explain the bag label instead of the prediction")
    p.add_argument("--out", required=True, help="attribution JSON path")
    p.add_argument("--svg", default=None, help="also write a heatmap SVG here")
    p.add_argument("--seed", type=int, default=0, help="stream seed for the random baseline")
    p.add_argument("--gamma", type=float, default=0.25)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="score explainers over trained checkpoints")
    p.add_argument("--mode", required=True, choices=("toy", "faithfulness"))
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        BagFormatError,
        CheckpointError,
        FeaturizerAccuracyError,
        IdxFormatError,
        PropagationError,
        TrainingDivergedError,
        ValueError,
        TypeError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
