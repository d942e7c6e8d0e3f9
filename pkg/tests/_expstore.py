"""Shared store of trained toy-task models, reused across test runs.

Training sixty models takes a couple of hours on one CPU, so finished runs
are cached under .cache/experiments keyed by (task, architecture, seed) and
reloaded from checkpoints. Run this module as a script to fill the store:

    python3 tests/_expstore.py         # all tasks/architectures/seeds 0..9
    python3 tests/_expstore.py --seeds 3

Every run derives its dataset, initialization and shuffling from the run
seed, so the store contents are reproducible bit-for-bit.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from milexplain.datasets import FeaturePool, ToyTask, load_mnist_idx, make_dataset
from milexplain.digits import ensure_digit_corpus
from milexplain.evaluation import run_faithfulness_eval, run_toy_eval
from milexplain.explainers import (
    METHOD_ATTENTION,
    METHOD_LRP,
    METHOD_RANDOM,
    METHOD_ROLLOUT,
    METHOD_SINGLE,
    make_explainer,
)
from milexplain.models import (
    AttnMILModel,
    MiniTransMIL,
    load_checkpoint,
    pretrain_featurizer,
    save_checkpoint,
)
from milexplain.serialize import read_json, write_json
from milexplain.training import TrainConfig, _eval_split, _softmax_rows, multiclass_auroc, train_mil, write_training_log

CACHE = REPO / ".cache"
DIGITS_DIR = CACHE / "digits"
FEATURIZER_DIR = CACHE / "featurizer"
EXPERIMENTS = CACHE / "experiments"

ARCHITECTURES = ("attn_mil", "mini_transmil")
TASKS = (ToyTask.FOUR_BAGS, ToyTask.POS_NEG, ToyTask.ADJACENT_PAIRS)
N_SEEDS = 10


def train_config(arch: str, seed: int) -> TrainConfig:
    # patience must cover the long flat stretches some seeds sit in before
    # the val loss drops again; 60/20 stays well inside the epoch budgets
    if arch == "attn_mil":
        return TrainConfig(
            learning_rate=1e-4, max_epochs=1000, batch_size=1, patience=60, seed=seed
        )
    return TrainConfig(
        learning_rate=1e-4, max_epochs=200, batch_size=4, patience=20, seed=seed
    )


def new_model(arch: str, n_classes: int, seed: int):
    if arch == "attn_mil":
        return AttnMILModel(n_classes=n_classes, seed=seed)
    return MiniTransMIL(n_classes=n_classes, seed=seed)


def get_featurizer():
    if not (FEATURIZER_DIR / "manifest.json").exists():
        ensure_digit_corpus(DIGITS_DIR, seed=0)
        images, digits = load_mnist_idx(
            DIGITS_DIR / "train-images-idx3-ubyte", DIGITS_DIR / "train-labels-idx1-ubyte"
        )
        save_checkpoint(pretrain_featurizer(images, digits, seed=0), FEATURIZER_DIR)
    return load_checkpoint(FEATURIZER_DIR)


_pools = None


def get_pools():
    """(train FeaturePool, test FeaturePool), featurized once per process."""
    global _pools
    if _pools is None:
        featurizer = get_featurizer()
        pools = []
        for split in ("train", "test"):
            images, digits = load_mnist_idx(
                DIGITS_DIR / f"{split}-images-idx3-ubyte",
                DIGITS_DIR / f"{split}-labels-idx1-ubyte",
            )
            pools.append(
                FeaturePool(featurizer.featurize(images), digits, np.arange(len(digits)), split)
            )
        _pools = tuple(pools)
    return _pools


def get_dataset(task: ToyTask, seed: int):
    train_pool, test_pool = get_pools()
    return make_dataset(task, train_pool, test_pool, seed=seed)


def run_dir(task: ToyTask, arch: str, seed: int) -> Path:
    return EXPERIMENTS / f"{task.value}_{arch}_s{seed}"


def get_run(task: ToyTask, arch: str, seed: int):
    """Trained model for the triple, training it on a cache miss."""
    directory = run_dir(task, arch, seed)
    if (directory / "DONE").exists():
        return load_checkpoint(directory / "checkpoint")
    train_bags, val_bags, _ = get_dataset(task, seed)
    model = new_model(arch, task.n_classes, seed)
    config = train_config(arch, seed)
    model, log = train_mil(model, train_bags, val_bags, config)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, directory / "checkpoint", seed=seed, train_config=vars(config))
    write_training_log(log, directory / "log.csv")
    (directory / "DONE").write_text(
        f"epochs={len(log)} best={model.best_epoch} val_auroc={log[model.best_epoch].val_auroc:.6f}\n"
    )
    return model


def attention_method(arch: str) -> str:
    return METHOD_ATTENTION if arch == "attn_mil" else METHOD_ROLLOUT


def eval_suite(arch: str, seed: int) -> dict:
    methods = (METHOD_LRP, METHOD_SINGLE, attention_method(arch), METHOD_RANDOM)
    return {m: make_explainer(m, seed=seed) for m in methods}


def get_eval(task: ToyTask, arch: str, seed: int) -> dict:
    """Test AUROC and AUPRC-2 means for one run, cached next to its checkpoint."""
    path = run_dir(task, arch, seed) / "eval.json"
    if path.exists():
        return read_json(path)
    model = get_run(task, arch, seed)
    _, _, test_bags = get_dataset(task, seed)
    labels = np.array([bag.label for bag in test_bags])
    _, logits = _eval_split(model, test_bags, 64)
    test_auroc = multiclass_auroc(labels, _softmax_rows(logits))
    report = run_toy_eval(task, model, eval_suite(arch, seed), test_bags)
    payload = {"test_auroc": test_auroc, "auprc2": report.to_jsonable()}
    write_json(path, payload)
    return read_json(path)


def get_faithfulness(task: ToyTask, arch: str, seed: int = 0, n_bags: int = 200) -> dict:
    """AUPC report on correctly classified test bags, cached per cell."""
    path = run_dir(task, arch, seed) / f"faithfulness_{n_bags}.json"
    if path.exists():
        return read_json(path)
    model = get_run(task, arch, seed)
    _, _, test_bags = get_dataset(task, seed)
    report = run_faithfulness_eval(model, eval_suite(arch, seed), test_bags[:n_bags])
    payload = report.to_jsonable()
    write_json(path, payload)
    return read_json(path)


def main(argv):
    seeds = range(N_SEEDS)
    if "--seeds" in argv:
        seeds = range(int(argv[argv.index("--seeds") + 1]))
    do_eval = "--eval" in argv
    get_pools()
    for task in TASKS:
        for arch in ARCHITECTURES:
            for seed in seeds:
                t0 = time.perf_counter()
                done_before = (run_dir(task, arch, seed) / "DONE").exists()
                get_run(task, arch, seed)
                status = "cached" if done_before else f"{time.perf_counter() - t0:.0f}s"
                marker = (run_dir(task, arch, seed) / "DONE").read_text().strip()
                print(f"{task.value:15s} {arch:13s} seed {seed}: {status:7s} {marker}", flush=True)
                if do_eval:
                    t0 = time.perf_counter()
                    ev = get_eval(task, arch, seed)
                    means = {m: round(s["mean"], 3) for m, s in ev["auprc2"]["methods"].items()}
                    print(
                        f"    eval {time.perf_counter() - t0:.0f}s test_auroc={ev['test_auroc']:.4f} auprc2={means}",
                        flush=True,
                    )
    if do_eval:
        for task in TASKS:
            for arch in ARCHITECTURES:
                t0 = time.perf_counter()
                fr = get_faithfulness(task, arch)
                means = {m: round(s["mean"], 3) for m, s in fr["methods"].items()}
                print(
                    f"faithfulness {task.value:15s} {arch:13s}: {time.perf_counter() - t0:.0f}s aupc={means}",
                    flush=True,
                )


if __name__ == "__main__":
    main(sys.argv[1:])
