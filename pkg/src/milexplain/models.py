"""MIL architectures over frozen digit features, plus checkpoint files.

Two bag classifiers share one interface: a gated-attention pooling model and
a small two-layer transformer with a class token. Both build their forward
pass through :func:`milexplain.tensor_core.forward_op`, so a single recorded
trace drives training gradients, relevance propagation and bit-exact replay.

The instance featurizer is a separate frozen MLP trained once on the digit
corpus; bags contain its 64-d penultimate activations, never raw pixels.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor_core import Tensor, forward_op, no_grad, record_trace

FEATURE_DIM = 64
ATTN_HIDDEN = 128
D_MODEL = 128
N_HEADS = 4
FF_WIDTH = 256
N_LAYERS = 2


class FeaturizerAccuracyError(RuntimeError):
    """Pre-training failed to reach the required digit accuracy."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint directory."""


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Featurizer:
    """Frozen 784→256→64 ReLU MLP; the 64-d activations are bag features.

    The 64→10 classification head exists only for pre-training and for
    pixel-level relevance of the digit classifier itself.
    """

    architecture = "featurizer"

    def __init__(self, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        if params is None:
            rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
            params = {
                "w1": rng.normal(0.0, np.sqrt(2.0 / 784), size=(784, 256)),
                "b1": np.zeros(256),
                "w2": rng.normal(0.0, np.sqrt(2.0 / 256), size=(256, 64)),
                "b2": np.zeros(64),
                "w3": rng.normal(0.0, np.sqrt(2.0 / 64), size=(64, 10)),
                "b3": np.zeros(10),
            }
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.frozen = False

    def named_parameters(self):
        return [(name, Tensor(arr)) for name, arr in sorted(self.params.items())]

    def hyperparameters(self) -> dict:
        return {}

    @classmethod
    def from_state(cls, hyperparameters: dict, params: dict[str, np.ndarray]):
        model = cls(params=params)
        model.frozen = True
        return model

    def featurize(self, images: np.ndarray) -> np.ndarray:
        """(N, 784) pixels in [0,1] → (N, 64) float64 features."""
        p = self.params
        h = np.maximum(images @ p["w1"] + p["b1"], 0.0)
        return np.maximum(h @ p["w2"] + p["b2"], 0.0)

    def head_logits(self, images: np.ndarray) -> np.ndarray:
        p = self.params
        return self.featurize(images) @ p["w3"] + p["b3"]

    def traced_logits(self, x: Tensor) -> Tensor:
        """Graph-building forward through features and head, for relevance."""
        p = self.params
        h = forward_op("relu", (forward_op("linear", (x,), (Tensor(p["w1"]), Tensor(p["b1"]))),))
        f = forward_op("relu", (forward_op("linear", (h,), (Tensor(p["w2"]), Tensor(p["b2"]))),))
        return forward_op("linear", (f,), (Tensor(p["w3"]), Tensor(p["b3"])))


def pretrain_featurizer(
    images: np.ndarray,
    digits: np.ndarray,
    seed: int = 0,
    val_fraction: float = 0.1,
    target_accuracy: float = 0.95,
    max_epochs: int = 30,
    batch_size: int = 256,
    learning_rate: float = 1e-3,
    patience: int = 3,
) -> Featurizer:
    """Train the digit classifier, keep the best-validation weights, freeze.

    Raises FeaturizerAccuracyError when the held-out accuracy stays under
    ``target_accuracy`` for the whole epoch budget.
    """
    images = np.asarray(images, dtype=np.float64)
    digits = np.asarray(digits, dtype=np.int64)
    n_val = max(1, int(round(val_fraction * images.shape[0])))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 102)))
    order = rng.permutation(images.shape[0])
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_tr, y_tr = images[train_idx], digits[train_idx]
    x_val, y_val = images[val_idx], digits[val_idx]

    model = Featurizer(seed=seed)
    p = model.params
    adam_m = {k: np.zeros_like(v) for k, v in p.items()}
    adam_v = {k: np.zeros_like(v) for k, v in p.items()}
    step = 0
    best_acc, best_params, since_best = -1.0, None, 0

    for epoch in range(max_epochs):
        perm = rng.permutation(x_tr.shape[0])
        for lo in range(0, len(perm), batch_size):
            idx = perm[lo : lo + batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            z1 = xb @ p["w1"] + p["b1"]
            a1 = np.maximum(z1, 0.0)
            z2 = a1 @ p["w2"] + p["b2"]
            a2 = np.maximum(z2, 0.0)
            z3 = a2 @ p["w3"] + p["b3"]
            z3 -= z3.max(axis=1, keepdims=True)
            e = np.exp(z3)
            prob = e / e.sum(axis=1, keepdims=True)
            dz3 = prob
            dz3[np.arange(len(yb)), yb] -= 1.0
            dz3 /= len(yb)
            grads = {
                "w3": a2.T @ dz3,
                "b3": dz3.sum(axis=0),
            }
            da2 = dz3 @ p["w3"].T
            dz2 = da2 * (z2 > 0)
            grads["w2"] = a1.T @ dz2
            grads["b2"] = dz2.sum(axis=0)
            da1 = dz2 @ p["w2"].T
            dz1 = da1 * (z1 > 0)
            grads["w1"] = xb.T @ dz1
            grads["b1"] = dz1.sum(axis=0)
            step += 1
            for k, g in grads.items():
                adam_m[k] = 0.9 * adam_m[k] + 0.1 * g
                adam_v[k] = 0.999 * adam_v[k] + 0.001 * g * g
                m_hat = adam_m[k] / (1.0 - 0.9**step)
                v_hat = adam_v[k] / (1.0 - 0.999**step)
                p[k] = p[k] - learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)

        acc = float(np.mean(np.argmax(model.head_logits(x_val), axis=1) == y_val))
        if acc > best_acc:
            best_acc, since_best = acc, 0
            best_params = {k: v.copy() for k, v in p.items()}
        else:
            since_best += 1
            if since_best > patience and best_acc >= target_accuracy:
                break

    if best_acc < target_accuracy:
        raise FeaturizerAccuracyError(
            f"digit classifier reached {best_acc:.4f} validation accuracy "
            f"after {max_epochs} epochs, below the {target_accuracy} target; "
            "check corpus quality or raise the epoch budget"
        )
    model.params = best_params
    model.frozen = True
    return model


class MILModel:
    """Common surface of both bag classifiers."""

    architecture: str

    def forward(self, x, dropout_rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def hyperparameters(self) -> dict:
        raise NotImplementedError

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            data = x.data
        else:
            data = np.asarray(x, dtype=np.float64)
            x = Tensor(data)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError(f"bag must be (K>=1, D), got shape {data.shape}")
        if data.shape[1] != self.input_dim:
            raise ValueError(
                f"instance dim {data.shape[1]}, model expects {self.input_dim}"
            )
        return x

    @staticmethod
    def _dropout(t: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
        if rng is None or rate <= 0.0:
            return t
        mask = (rng.random(t.data.shape) >= rate) / (1.0 - rate)
        return forward_op("mul", (t, Tensor(mask)))


class AttnMILModel(MILModel):
    """Gated-attention pooling: a_k = softmax_k w^T(tanh(Vx_k) ⊙ sigm(Ux_k)),
    bag embedding Σ_k a_k x_k, then a linear classifier."""

    architecture = "attn_mil"

    def __init__(
        self,
        n_classes: int,
        input_dim: int = FEATURE_DIM,
        hidden: int = ATTN_HIDDEN,
        dropout: float = 0.0,
        seed: int = 0,
    ):
        self.n_classes = n_classes
        self.input_dim = input_dim
        self.hidden = hidden
        self.dropout = dropout
        rng = np.random.default_rng(np.random.SeedSequence((seed, 103)))
        self.p = {
            "gate_tanh_w": Tensor(_glorot(rng, input_dim, hidden), requires_grad=True),
            "gate_tanh_b": Tensor(np.zeros(hidden), requires_grad=True),
            "gate_sigm_w": Tensor(_glorot(rng, input_dim, hidden), requires_grad=True),
            "gate_sigm_b": Tensor(np.zeros(hidden), requires_grad=True),
            "attn_w": Tensor(_glorot(rng, hidden, 1), requires_grad=True),
            "attn_b": Tensor(np.zeros(1), requires_grad=True),
            "cls_w": Tensor(_glorot(rng, input_dim, n_classes), requires_grad=True),
            "cls_b": Tensor(np.zeros(n_classes), requires_grad=True),
        }
        self.last_attention: np.ndarray | None = None

    def named_parameters(self):
        return sorted(self.p.items())

    def hyperparameters(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "dropout": self.dropout,
        }

    @classmethod
    def from_state(cls, hyperparameters: dict, params: dict[str, np.ndarray]):
        model = cls(**hyperparameters)
        for name, arr in params.items():
            model.p[name] = Tensor(arr, requires_grad=True)
        return model

    def forward(self, x, dropout_rng=None) -> Tensor:
        x = self._as_input(x)
        p = self.p
        pre_t = forward_op("linear", (x,), (p["gate_tanh_w"], p["gate_tanh_b"]))
        pre_s = forward_op("linear", (x,), (p["gate_sigm_w"], p["gate_sigm_b"]))
        gated = forward_op("mul", (forward_op("tanh", (pre_t,)), forward_op("sigmoid", (pre_s,))))
        gated = self._dropout(gated, self.dropout, dropout_rng)
        scores = forward_op("linear", (gated,), (p["attn_w"], p["attn_b"]))  # (K,1)
        attn = forward_op("softmax", (forward_op("transpose", (scores,)),))  # (1,K)
        pooled = forward_op("attention_mix", (attn, x))  # (1,D)
        logits = forward_op("linear", (pooled,), (p["cls_w"], p["cls_b"]))
        self.last_attention = attn.data[0].copy()
        return logits

    def forward_batch(self, stacked, bag_size: int, dropout_rng=None) -> Tensor:
        """(B*K, D) rows of B same-size bags → (B, C) logits.

        Same arithmetic as per-bag forward up to summation order; used by
        the training loop, never by explainers.
        """
        stacked = np.asarray(stacked, dtype=np.float64)
        n_bags, rem = divmod(stacked.shape[0], bag_size)
        if rem or n_bags < 1:
            raise ValueError(f"{stacked.shape[0]} rows not a multiple of bag size {bag_size}")
        x = Tensor(stacked)
        p = self.p
        pre_t = forward_op("linear", (x,), (p["gate_tanh_w"], p["gate_tanh_b"]))
        pre_s = forward_op("linear", (x,), (p["gate_sigm_w"], p["gate_sigm_b"]))
        gated = forward_op("mul", (forward_op("tanh", (pre_t,)), forward_op("sigmoid", (pre_s,))))
        gated = self._dropout(gated, self.dropout, dropout_rng)
        scores = forward_op("linear", (gated,), (p["attn_w"], p["attn_b"]))  # (B*K,1)
        attn = forward_op("softmax", (forward_op("reshape", (scores,), shape=(n_bags, bag_size)),))
        pooled = forward_op("head_mix", (attn, x), n_heads=1, n_groups=n_bags)  # (B,D)
        return forward_op("linear", (pooled,), (p["cls_w"], p["cls_b"]))


class MiniTransMIL(MILModel):
    """Two pre-layernorm transformer blocks over projected instances plus a
    learnable class token at index 0; exact softmax attention, 4 heads.

    After every forward, ``last_attention`` holds the per-layer per-head
    attention matrices, each (K+1, K+1) with rows summing to 1.
    """

    architecture = "mini_transmil"

    def __init__(
        self,
        n_classes: int,
        input_dim: int = FEATURE_DIM,
        d_model: int = D_MODEL,
        n_heads: int = N_HEADS,
        ff_width: int = FF_WIDTH,
        n_layers: int = N_LAYERS,
        dropout: float = 0.0,
        seed: int = 0,
    ):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_classes = n_classes
        self.input_dim = input_dim
        self.d_model = d_model
        self.n_heads = n_heads
        self.ff_width = ff_width
        self.n_layers = n_layers
        self.dropout = dropout
        rng = np.random.default_rng(np.random.SeedSequence((seed, 104)))
        p: dict[str, Tensor] = {
            "proj_w": Tensor(_glorot(rng, input_dim, d_model), requires_grad=True),
            "proj_b": Tensor(np.zeros(d_model), requires_grad=True),
            "class_token": Tensor(
                rng.normal(0.0, 0.02, size=(1, d_model)), requires_grad=True
            ),
            "final_ln_g": Tensor(np.ones(d_model), requires_grad=True),
            "final_ln_b": Tensor(np.zeros(d_model), requires_grad=True),
            "cls_w": Tensor(_glorot(rng, d_model, n_classes), requires_grad=True),
            "cls_b": Tensor(np.zeros(n_classes), requires_grad=True),
        }
        for layer in range(n_layers):
            pre = f"l{layer}_"
            p[pre + "ln1_g"] = Tensor(np.ones(d_model), requires_grad=True)
            p[pre + "ln1_b"] = Tensor(np.zeros(d_model), requires_grad=True)
            p[pre + "ln2_g"] = Tensor(np.ones(d_model), requires_grad=True)
            p[pre + "ln2_b"] = Tensor(np.zeros(d_model), requires_grad=True)
            for nm in ("q", "k", "v", "o"):
                p[pre + nm + "_w"] = Tensor(
                    _glorot(rng, d_model, d_model), requires_grad=True
                )
                p[pre + nm + "_b"] = Tensor(np.zeros(d_model), requires_grad=True)
            p[pre + "ff1_w"] = Tensor(_glorot(rng, d_model, ff_width), requires_grad=True)
            p[pre + "ff1_b"] = Tensor(np.zeros(ff_width), requires_grad=True)
            p[pre + "ff2_w"] = Tensor(_glorot(rng, ff_width, d_model), requires_grad=True)
            p[pre + "ff2_b"] = Tensor(np.zeros(d_model), requires_grad=True)
        self.p = p
        self.last_attention: list[list[np.ndarray]] | None = None

    def named_parameters(self):
        return sorted(self.p.items())

    def hyperparameters(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "input_dim": self.input_dim,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "ff_width": self.ff_width,
            "n_layers": self.n_layers,
            "dropout": self.dropout,
        }

    @classmethod
    def from_state(cls, hyperparameters: dict, params: dict[str, np.ndarray]):
        model = cls(**hyperparameters)
        for name, arr in params.items():
            model.p[name] = Tensor(arr, requires_grad=True)
        return model

    def _layernorm(self, x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
        return forward_op("layernorm", (x,), (gain, bias), eps=1e-5)

    def _encoder(
        self,
        tokens: Tensor,
        n_groups: int,
        dropout_rng=None,
        fixed_attention=None,
        collect: list | None = None,
    ) -> Tensor:
        """Shared transformer stack; per-bag and batched paths differ only
        in the group count and in attention retention/freezing."""
        p, dh = self.p, self.d_model // self.n_heads
        for layer in range(self.n_layers):
            pre = f"l{layer}_"
            normed = self._layernorm(tokens, p[pre + "ln1_g"], p[pre + "ln1_b"])
            v = forward_op("linear", (normed,), (p[pre + "v_w"], p[pre + "v_b"]))
            if fixed_attention is None:
                q = forward_op("linear", (normed,), (p[pre + "q_w"], p[pre + "q_b"]))
                k = forward_op("linear", (normed,), (p[pre + "k_w"], p[pre + "k_b"]))
                scores = forward_op(
                    "head_scores", (q, k), n_heads=self.n_heads, n_groups=n_groups
                )
                attn = forward_op(
                    "softmax", (forward_op("scale", (scores,), c=1.0 / np.sqrt(dh)),)
                )
            else:
                attn = Tensor(np.concatenate(
                    [np.asarray(m, dtype=np.float64) for m in fixed_attention[layer]],
                    axis=0,
                ))
            if collect is not None:
                t = v.data.shape[0] // n_groups
                collect.append(
                    [attn.data[i * t : (i + 1) * t].copy() for i in range(self.n_heads)]
                )
            mixed = forward_op("head_mix", (attn, v), n_heads=self.n_heads, n_groups=n_groups)
            attended = forward_op("linear", (mixed,), (p[pre + "o_w"], p[pre + "o_b"]))
            attended = self._dropout(attended, self.dropout, dropout_rng)
            tokens = forward_op("add", (tokens, attended))
            normed2 = self._layernorm(tokens, p[pre + "ln2_g"], p[pre + "ln2_b"])
            ff = forward_op("linear", (normed2,), (p[pre + "ff1_w"], p[pre + "ff1_b"]))
            ff = forward_op("relu", (ff,))
            ff = forward_op("linear", (ff,), (p[pre + "ff2_w"], p[pre + "ff2_b"]))
            ff = self._dropout(ff, self.dropout, dropout_rng)
            tokens = forward_op("add", (tokens, ff))
        return self._layernorm(tokens, p["final_ln_g"], p["final_ln_b"])

    def forward(self, x, dropout_rng=None, fixed_attention=None) -> Tensor:
        x = self._as_input(x)
        p = self.p
        proj = forward_op("linear", (x,), (p["proj_w"], p["proj_b"]))
        tokens = forward_op("concat", (p["class_token"], proj), axis=0)
        mats: list[list[np.ndarray]] = []
        encoded = self._encoder(tokens, 1, dropout_rng, fixed_attention, collect=mats)
        cls_repr = forward_op("slice", (encoded,), axis=0, start=0, stop=1)
        logits = forward_op("linear", (cls_repr,), (p["cls_w"], p["cls_b"]))
        self.last_attention = mats
        return logits

    def forward_batch(self, stacked, bag_size: int, dropout_rng=None) -> Tensor:
        """(B*K, D) rows of B same-size bags → (B, C) logits.

        Bags share the transformer stack through the grouped attention
        kernels; class tokens sit at row b*(K+1). Training-loop path only.
        """
        stacked = np.asarray(stacked, dtype=np.float64)
        n_bags, rem = divmod(stacked.shape[0], bag_size)
        if rem or n_bags < 1:
            raise ValueError(f"{stacked.shape[0]} rows not a multiple of bag size {bag_size}")
        p = self.p
        proj = forward_op("linear", (Tensor(stacked),), (p["proj_w"], p["proj_b"]))
        tokens = forward_op("group_prepend", (p["class_token"], proj), n_groups=n_bags)
        encoded = self._encoder(tokens, n_bags, dropout_rng)
        cls_rows = forward_op(
            "take_rows", (encoded,), indices=tuple(b * (bag_size + 1) for b in range(n_bags))
        )
        return forward_op("linear", (cls_rows,), (p["cls_w"], p["cls_b"]))


ARCHITECTURES = {
    Featurizer.architecture: Featurizer,
    AttnMILModel.architecture: AttnMILModel,
    MiniTransMIL.architecture: MiniTransMIL,
}


def attnmil_forward(model: AttnMILModel, bag):
    """Bag → (logits (C,), attention (K,), trace)."""
    features = bag.instance_features if hasattr(bag, "instance_features") else bag
    with record_trace() as trace, no_grad():
        logits = model.forward(features)
    return logits.data[0].copy(), model.last_attention.copy(), trace


def transmil_forward(model: MiniTransMIL, bag):
    """Bag → (logits (C,), attention matrices [layer][head], trace)."""
    features = bag.instance_features if hasattr(bag, "instance_features") else bag
    with record_trace() as trace, no_grad():
        logits = model.forward(features)
    mats = [[m.copy() for m in layer] for layer in model.last_attention]
    return logits.data[0].copy(), mats, trace


def predict(model: MILModel, bag):
    """(class probabilities (C,), predicted class with lowest-index ties)."""
    features = bag.instance_features if hasattr(bag, "instance_features") else bag
    with no_grad():
        logits = model.forward(features).data[0]
    shifted = logits - logits.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    return probs, int(np.argmax(probs))


def save_checkpoint(model, directory, seed=None, train_config=None) -> Path:
    """JSON manifest + little-endian float64 blob, manifest order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    manifest = {
        "format": 1,
        "architecture": model.architecture,
        "hyperparameters": model.hyperparameters(),
        "seed": seed,
        "train_config": train_config,
        "params": [{"name": n, "shape": list(t.data.shape)} for n, t in named],
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named)
    (directory / "params.bin").write_bytes(blob)
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{directory}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{directory}/manifest.json: {exc}") from exc
    arch = manifest.get("architecture")
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"{directory}: unknown architecture {arch!r}")
    blob = (directory / "params.bin").read_bytes()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n_bytes = int(np.prod(shape)) * 8
        if offset + n_bytes > len(blob):
            raise CheckpointError(
                f"{directory}/params.bin: blob ends inside {entry['name']}"
            )
        params[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)), offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += n_bytes
    if offset != len(blob):
        raise CheckpointError(
            f"{directory}/params.bin: {len(blob) - offset} trailing bytes"
        )
    return ARCHITECTURES[arch].from_state(manifest["hyperparameters"], params)
