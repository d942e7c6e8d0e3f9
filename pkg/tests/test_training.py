"""Training loop, ranking metric, and log format."""

import numpy as np
import pytest

from milexplain.datasets import Bag
from milexplain.models import AttnMILModel
from milexplain.tensor_core import backward, forward_op
from milexplain.training import (
    EpochLog,
    TrainConfig,
    TrainingDivergedError,
    auroc,
    multiclass_auroc,
    train_mil,
    write_training_log,
)

DIM = 8


def toy_bags(rng, n, k=5, dim=DIM, separation=3.0):
    """Linearly separable two-class bags: label 1 bags carry a mean shift."""
    bags = []
    for i in range(n):
        label = i % 2
        features = rng.standard_normal((k, dim))
        if label:
            features = features + separation / np.sqrt(dim)
        bags.append(Bag(features, list(range(k)), label))
    return bags


# -------------------------------------------------------------------- auroc


def test_auroc_perfect_separation():
    assert auroc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0


def test_auroc_all_scores_equal():
    assert auroc([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]) == 0.5


def test_auroc_hand_counted_pairs():
    # pairs: (0.9,0.8)+ (0.9,0.1)+ (0.7,0.8)- (0.7,0.1)+ -> 3 of 4
    assert auroc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]) == 0.75


def test_auroc_tie_counts_half():
    assert auroc([1, 0], [0.4, 0.4]) == 0.5
    assert auroc([1, 0, 0], [0.4, 0.4, 0.1]) == 0.75


def test_auroc_rejects_single_class():
    with pytest.raises(ValueError):
        auroc([1, 1, 1], [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        auroc([0, 0], [0.1, 0.2])


def test_auroc_matches_pair_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(60):
        n = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # small integer scores force plenty of ties
        scores = rng.integers(0, 5, size=n).astype(float)
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
        assert auroc(labels, scores) == pytest.approx(
            wins / (len(pos) * len(neg)), abs=1e-15
        )


def test_auroc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, size=30)
    labels[0], labels[1] = 0, 1
    scores = rng.standard_normal(30)
    base = auroc(labels, scores)
    assert auroc(labels, 3.0 * scores + 7.0) == base
    assert auroc(labels, np.tanh(scores)) == base


def test_multiclass_auroc_macro_average():
    labels = np.array([0, 0, 1, 1, 2, 2])
    scores = np.eye(3)[labels]  # one-hot, each one-vs-rest is perfect
    assert multiclass_auroc(labels, scores) == 1.0


def test_multiclass_auroc_matches_manual_ovr():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 4, size=40)
    for c in range(4):
        labels[c] = c  # ensure presence
    scores = rng.random((40, 4))
    expected = np.mean(
        [auroc((labels == c).astype(int), scores[:, c]) for c in range(4)]
    )
    assert multiclass_auroc(labels, scores) == pytest.approx(expected, abs=1e-15)


def test_multiclass_auroc_requires_every_class():
    scores = np.random.default_rng(3).random((6, 3))
    with pytest.raises(ValueError, match="absent"):
        multiclass_auroc(np.array([0, 0, 1, 1, 1, 0]), scores)


def test_binary_score_matrix_reduces_to_plain_auroc():
    rng = np.random.default_rng(4)
    labels = np.array([0, 1, 0, 1, 1])
    col = rng.random(5)
    matrix = np.stack([1 - col, col], axis=1)
    assert multiclass_auroc(labels, matrix) == auroc(labels, col)


# -------------------------------------------------------------- train config


def test_config_rejects_bad_values():
    with pytest.raises(ValueError, match="learning rate"):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="max epochs"):
        TrainConfig(max_epochs=0)
    with pytest.raises(ValueError, match="batch size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="metric"):
        TrainConfig(early_stop_metric="val_accuracy")


def test_config_defaults():
    config = TrainConfig()
    assert config.learning_rate == 1e-4
    assert config.max_epochs == 1000
    assert config.early_stop_metric == "val_loss"


# ---------------------------------------------------------------- adam step


def test_first_adam_update_matches_hand_formula():
    """After one step on one bag, every parameter moves by
    lr * g / (|g| + eps) with bias-corrected moments collapsing at t=1."""
    rng = np.random.default_rng(5)
    bag = Bag(rng.standard_normal((4, DIM)), [0, 1, 2, 3], 1)

    model = AttnMILModel(n_classes=2, input_dim=DIM, hidden=6, seed=0)
    reference = AttnMILModel(n_classes=2, input_dim=DIM, hidden=6, seed=0)
    out = reference.forward(bag.instance_features)
    loss = forward_op("ce_loss", (out,), labels=(1,))
    backward(loss)
    grads = {name: t.grad for name, t in reference.named_parameters()}

    config = TrainConfig(learning_rate=0.01, max_epochs=1, batch_size=1, seed=0)
    train_mil(model, [bag], [bag, Bag(bag.instance_features, [0, 1, 2, 3], 0)], config)

    for name, t in model.named_parameters():
        start = dict(reference.named_parameters())[name].data
        g = grads[name]
        if g is None:
            expected = start
        else:
            expected = start - 0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(t.data, expected, rtol=0, atol=1e-12), name


# -------------------------------------------------------------- training run


def test_training_learns_separable_task():
    rng = np.random.default_rng(6)
    train = toy_bags(rng, 60)
    val = toy_bags(rng, 20)
    model = AttnMILModel(n_classes=2, input_dim=DIM, hidden=8, seed=1)
    config = TrainConfig(learning_rate=3e-3, max_epochs=30, batch_size=4, seed=1)
    model, log = train_mil(model, train, val, config)
    assert log[0].train_loss > log[model.best_epoch].val_loss
    assert log[model.best_epoch].val_auroc > 0.95


def test_training_is_deterministic():
    rng = np.random.default_rng(7)
    train = toy_bags(rng, 20)
    val = toy_bags(rng, 8)
    logs = []
    finals = []
    for _ in range(2):
        model = AttnMILModel(n_classes=2, input_dim=DIM, hidden=6, seed=2)
        config = TrainConfig(learning_rate=1e-3, max_epochs=5, batch_size=2, seed=9)
        model, log = train_mil(model, train, val, config)
        logs.append([(r.epoch, r.train_loss, r.val_loss, r.val_auroc) for r in log])
        finals.append({n: t.data.copy() for n, t in model.named_parameters()})
    assert logs[0] == logs[1]
    for name in finals[0]:
        assert np.array_equal(finals[0][name], finals[1][name])


def test_selected_checkpoint_has_minimum_validation_loss():
    rng = np.random.default_rng(8)
    train = toy_bags(rng, 30)
    val = toy_bags(rng, 10)
    model = AttnMILModel(n_classes=2, input_dim=DIM, hidden=6, seed=3)
    config = TrainConfig(learning_rate=2e-3, max_epochs=12, batch_size=4, seed=3)
    model, log = train_mil(model, train, val, config)
    losses = [row.val_loss for row in log]
    assert log[model.best_epoch].val_loss == min(losses)

    from milexplain.training import _eval_split

    recomputed, _ = _eval_split(model, val, 64)
    assert recomputed == pytest.approx(min(losses), abs=1e-12)


def test_patience_stops_after_plateau():
    rng = np.random.default_rng(9)
    train = toy_bags(rng, 10, separation=0.0)  # pure noise, nothing to learn
    val = toy_bags(rng, 10, separation=0.0)
    model = AttnMILModel(n_classes=2, input_dim=DIM, hidden=4, seed=4)
    config = TrainConfig(
        learning_rate=1e-5, max_epochs=200, batch_size=2, patience=3, seed=4
    )
    _, log = train_mil(model, train, val, config)
    assert len(log) < 200


def test_divergence_raises_with_epoch_index():
    rng = np.random.default_rng(10)
    train = toy_bags(rng, 8)
    poisoned = train[3].instance_features.copy()
    poisoned[0, 0] = np.inf  # overflows the logits into nan loss
    train[3] = Bag(poisoned, train[3].instance_ids, train[3].label)
    val = toy_bags(rng, 4)
    model = AttnMILModel(n_classes=2, input_dim=DIM, hidden=6, seed=5)
    config = TrainConfig(learning_rate=1e-3, max_epochs=50, batch_size=2, seed=5)
    with pytest.raises(TrainingDivergedError) as exc:
        train_mil(model, train, val, config)
    assert exc.value.epoch == 0
    assert "epoch" in str(exc.value)


def test_empty_bag_lists_rejected():
    model = AttnMILModel(n_classes=2, input_dim=DIM, seed=0)
    with pytest.raises(ValueError):
        train_mil(model, [], [], TrainConfig())


def test_mixed_bag_sizes_supported():
    rng = np.random.default_rng(11)
    bags = [
        Bag(rng.standard_normal((k, DIM)) + (i % 2), list(range(k)), i % 2)
        for i, k in enumerate([3, 5, 4, 6, 3, 5, 4, 6])
    ]
    model = AttnMILModel(n_classes=2, input_dim=DIM, hidden=4, seed=6)
    config = TrainConfig(learning_rate=1e-3, max_epochs=3, batch_size=3, seed=6)
    model, log = train_mil(model, bags, bags, config)
    assert len(log) == 3
    assert all(np.isfinite(row.train_loss) for row in log)


def test_batched_and_accumulated_gradients_agree(monkeypatch):
    """Same-size bags may ride the batched forward; the result must match
    per-bag accumulation up to floating-point summation order."""
    import milexplain.training as training

    rng = np.random.default_rng(12)
    bags = toy_bags(rng, 8, k=4)
    finals = []
    for force_per_bag in (False, True):
        if force_per_bag:
            monkeypatch.setattr(training, "_uniform_bag_size", lambda bags: None)
        else:
            monkeypatch.undo()
        model = AttnMILModel(n_classes=2, input_dim=DIM, hidden=6, seed=7)
        config = TrainConfig(learning_rate=1e-3, max_epochs=2, batch_size=4, seed=7)
        model, _ = train_mil(model, bags, bags[:4], config)
        finals.append({n: t.data.copy() for n, t in model.named_parameters()})
    for name in finals[0]:
        assert np.allclose(finals[0][name], finals[1][name], rtol=0, atol=1e-9), name


# ---------------------------------------------------------------------- log


def test_training_log_csv_format(tmp_path):
    log = [
        EpochLog(0, 1.5, 1.25, 0.5),
        EpochLog(1, 1.0, 0.75, 0.625),
    ]
    path = tmp_path / "log.csv"
    write_training_log(log, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_auroc"
    assert lines[1] == "0,1.5,1.25,0.5"
    assert lines[2] == "1,1,0.75,0.625"
    fields = lines[1].split(",")
    assert float(fields[2]) == 1.25
