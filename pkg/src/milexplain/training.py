"""Training loop for MIL heads plus the AUROC ranking metric.

Bags of equal size ride a batched forward for speed; mixed-size bag lists
fall back to per-bag forwards with gradient accumulation. Both produce the
same mean-cross-entropy gradients up to floating-point summation order.
Checkpoint selection keeps the epoch with the lowest validation loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .tensor_core import Tensor, backward, forward_op, no_grad


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 1000
    batch_size: int = 32
    seed: int = 0
    early_stop_metric: str = "val_loss"
    patience: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ValueError(f"max epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.early_stop_metric not in ("val_loss", "val_auroc"):
            raise ValueError(f"unknown early-stop metric {self.early_stop_metric!r}")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_auroc: float


def auroc(labels, scores) -> float:
    """Probability that a positive outranks a negative; ties count half.

    Equivalent to the Mann-Whitney U statistic over n+ * n- pairs.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be equal-length 1-D arrays")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_auroc(labels, score_matrix) -> float:
    """Macro one-vs-rest AUROC; binary inputs reduce to plain auroc."""
    labels = np.asarray(labels)
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    n_classes = score_matrix.shape[1]
    if n_classes == 2:
        return auroc((labels == 1).astype(int), score_matrix[:, 1])
    per_class = []
    for c in range(n_classes):
        mask = (labels == c).astype(int)
        if mask.sum() in (0, len(mask)):
            raise ValueError(f"class {c} absent from labels")
        per_class.append(auroc(mask, score_matrix[:, c]))
    return float(np.mean(per_class))


def _uniform_bag_size(bags) -> int | None:
    sizes = {bag.size for bag in bags}
    return sizes.pop() if len(sizes) == 1 else None


def _stack_features(bags) -> np.ndarray:
    return np.concatenate([bag.instance_features for bag in bags], axis=0)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _eval_split(model, bags, batch_size: int):
    """(mean loss, logits matrix) over a bag list, no gradients."""
    n = len(bags)
    uniform = _uniform_bag_size(bags)
    losses, logits_rows = [], []
    with no_grad():
        if uniform is not None:
            for lo in range(0, n, batch_size):
                chunk = bags[lo : lo + batch_size]
                out = model.forward_batch(_stack_features(chunk), uniform).data
                logits_rows.append(out)
                losses.append(
                    (_per_row_ce(out, [b.label for b in chunk]), len(chunk))
                )
        else:
            for bag in bags:
                out = model.forward(bag.instance_features).data
                logits_rows.append(out)
                losses.append((_per_row_ce(out, [bag.label]), 1))
    total = sum(loss * count for loss, count in losses)
    return total / n, np.concatenate(logits_rows, axis=0)


def _per_row_ce(logits: np.ndarray, labels) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(lse - shifted[np.arange(len(labels)), labels]))


def train_mil(model, train_bags, val_bags, config: TrainConfig):
    """Train to lowest validation loss; returns (model, per-epoch log).

    The model is left holding the best-epoch parameters. Deterministic for
    a fixed config: batch layout, shuffling and dropout all derive from
    config.seed.
    """
    if not train_bags or not val_bags:
        raise ValueError("need non-empty train and validation bag lists")
    params = [t for _, t in model.named_parameters()]
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 201)))
    dropout_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 202)))
    adam_m = [np.zeros_like(t.data) for t in params]
    adam_v = [np.zeros_like(t.data) for t in params]
    step = 0
    uniform = _uniform_bag_size(train_bags)
    use_dropout = getattr(model, "dropout", 0.0) > 0.0

    log: list[EpochLog] = []
    best_metric, best_params, best_epoch, since_best = None, None, -1, 0
    val_labels = np.array([bag.label for bag in val_bags])

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(train_bags))
        epoch_loss_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_bags[i] for i in order[lo : lo + config.batch_size]]
            rng = dropout_rng if use_dropout else None
            if uniform is not None and len(batch) > 1:
                out = model.forward_batch(_stack_features(batch), uniform, dropout_rng=rng)
                loss = forward_op(
                    "ce_loss", (out,), labels=tuple(b.label for b in batch)
                )
                backward(loss)
                batch_loss = float(loss.data)
            else:
                grad_sums = None
                batch_loss = 0.0
                for bag in batch:
                    out = model.forward(bag.instance_features, dropout_rng=rng)
                    loss = forward_op("ce_loss", (out,), labels=(bag.label,))
                    backward(loss)
                    batch_loss += float(loss.data)
                    if grad_sums is None:
                        grad_sums = [t.grad for t in params]
                    else:
                        grad_sums = [
                            s if g is None else (g if s is None else s + g)
                            for s, g in zip(grad_sums, (t.grad for t in params))
                        ]
                    for t in params:
                        t.grad = None
                batch_loss /= len(batch)
                for t, s in zip(params, grad_sums):
                    t.grad = None if s is None else s / len(batch)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, batch_loss)
            epoch_loss_sum += batch_loss * len(batch)

            step += 1
            correct1 = 1.0 - config.beta1**step
            correct2 = 1.0 - config.beta2**step
            for i, t in enumerate(params):
                g = t.grad
                if g is None:
                    continue
                adam_m[i] = config.beta1 * adam_m[i] + (1.0 - config.beta1) * g
                adam_v[i] = config.beta2 * adam_v[i] + (1.0 - config.beta2) * g * g
                t.data = t.data - config.learning_rate * (adam_m[i] / correct1) / (
                    np.sqrt(adam_v[i] / correct2) + config.adam_eps
                )
                t.grad = None

        train_loss = epoch_loss_sum / len(train_bags)
        val_loss, val_logits = _eval_split(model, val_bags, max(config.batch_size, 64))
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, val_loss)
        val_score = multiclass_auroc(val_labels, _softmax_rows(val_logits))
        log.append(EpochLog(epoch, train_loss, val_loss, val_score))

        metric = val_loss if config.early_stop_metric == "val_loss" else -val_score
        if best_metric is None or metric < best_metric:
            best_metric, best_epoch, since_best = metric, epoch, 0
            best_params = [t.data.copy() for t in params]
        else:
            since_best += 1
            if config.patience is not None and since_best > config.patience:
                break

    for t, data in zip(params, best_params):
        t.data = data
    model.best_epoch = best_epoch
    return model, log


def write_training_log(log, path) -> None:
    lines = ["epoch,train_loss,val_loss,val_auroc"]
    for row in log:
        lines.append(
            f"{row.epoch},{row.train_loss:.17g},{row.val_loss:.17g},{row.val_auroc:.17g}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
