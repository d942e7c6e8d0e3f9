"""Shared on-disk workspace: digit corpus, featurizer, feature pools.

Synthetic-task commands need the rendered digit corpus and the pretrained
featurizer before any bag can be sampled. Both are expensive to build and
fully determined by their seeds, so they are cached under a data root
directory: $MILEXPLAIN_DATA if set, else ~/.cache/milexplain. All entry
points that need instance features go through here, which keeps separate
commands byte-compatible with each other.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .datasets import FeaturePool, ToyTask, load_mnist_idx, make_dataset
from .digits import ensure_digit_corpus
from .models import Featurizer, load_checkpoint, pretrain_featurizer, save_checkpoint

DATA_ROOT_ENV = "MILEXPLAIN_DATA"


def data_root() -> Path:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else Path.home() / ".cache" / "milexplain"


def ensure_featurizer(root: Path | None = None, corpus_seed: int = 0) -> Featurizer:
    """Pretrained featurizer, building corpus and training it on first use."""
    root = root or data_root()
    digits_dir = root / "digits"
    featurizer_dir = root / "featurizer"
    if not (featurizer_dir / "manifest.json").exists():
        ensure_digit_corpus(digits_dir, seed=corpus_seed)
        images, digits = load_mnist_idx(
            digits_dir / "train-images-idx3-ubyte",
            digits_dir / "train-labels-idx1-ubyte",
        )
        save_checkpoint(pretrain_featurizer(images, digits, seed=0), featurizer_dir)
    return load_checkpoint(featurizer_dir)


_pool_cache: dict = {}


def feature_pools(root: Path | None = None) -> tuple[FeaturePool, FeaturePool]:
    """(train pool, test pool) of featurized corpus digits, cached per process."""
    root = root or data_root()
    key = str(root)
    if key not in _pool_cache:
        featurizer = ensure_featurizer(root)
        digits_dir = root / "digits"
        pools = []
        for split in ("train", "test"):
            images, digits = load_mnist_idx(
                digits_dir / f"{split}-images-idx3-ubyte",
                digits_dir / f"{split}-labels-idx1-ubyte",
            )
            pools.append(
                FeaturePool(featurizer.featurize(images), digits, np.arange(len(digits)), split)
            )
        _pool_cache[key] = tuple(pools)
    return _pool_cache[key]


def task_dataset(task: ToyTask, seed: int, sizes=(2000, 500, 1000), bag_size: int = 30, root: Path | None = None):
    train_pool, test_pool = feature_pools(root)
    return make_dataset(task, train_pool, test_pool, seed=seed, sizes=sizes, bag_size=bag_size)
