"""Per-instance attributions for trained MIL models.

The central method propagates relevance backwards through the recorded
forward trace: the class logit is decomposed layer by layer until every
instance feature holds its share. Attention weights act as constants of the
propagation, so the subnetworks that compute them (gating MLP, query/key
projections) receive no relevance. What sticks to bias terms or numerical
stabilizers along the way is tracked, making the conservation deficit of
each explanation an auditable number instead of silent leakage.

Baselines: raw attention, attention rollout, gradient-times-input, singleton
bags, leave-one-out, their mean, and seeded Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import AttnMILModel, Featurizer, MiniTransMIL
from .tensor_core import Tensor, backward, forward_op, no_grad, record_trace

METHOD_LRP = "lrp"
METHOD_ATTENTION = "attn"
METHOD_ROLLOUT = "rollout"
METHOD_GXI = "gxi"
METHOD_SINGLE = "single"
METHOD_ONE_REMOVED = "one-removed"
METHOD_COMBINED = "combined"
METHOD_RANDOM = "rand"


class PropagationError(RuntimeError):
    """Relevance reached a layer kind with no propagation rule."""


@dataclass
class LRPConfig:
    gamma: float = 0.25
    epsilon: float = 1e-6
    rule_overrides: dict = field(default_factory=dict)  # layer kind -> rule tag

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class Attribution:
    method: str
    target_class: int | None
    scores: np.ndarray  # (K,)
    feature_relevance: np.ndarray | None = None  # (K, D)
    pixel_relevance: np.ndarray | None = None  # (K, 784)
    conservation_deficit: float | None = None
    absorbed_relevance: float | None = None


def _features(bag) -> np.ndarray:
    return bag.instance_features if hasattr(bag, "instance_features") else np.asarray(bag, dtype=np.float64)


def _sign(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0.0, 1.0, -1.0)


def _relu_fed_outputs(records) -> set:
    return {rec.input_ids[0] for rec in records if rec.kind == "relu"}


def _linear_rule(rec, r_out, cfg: LRPConfig, use_gamma: bool):
    x, w = rec.inputs[0], rec.params[0]
    if use_gamma and cfg.gamma > 0.0:
        w = w + cfg.gamma * np.maximum(w, 0.0)
        z = x @ w
        if len(rec.params) == 2:
            b = rec.params[1]
            z = z + (b + cfg.gamma * np.maximum(b, 0.0))
    else:
        z = rec.output
    ratio = r_out / (z + cfg.epsilon * _sign(z))
    return x * (ratio @ w.T)


def _attention_mix_rule(rec, r_out, cfg: LRPConfig):
    p, v = rec.inputs
    ratio = r_out / (rec.output + cfg.epsilon * _sign(rec.output))
    return v * (p.T @ ratio)


def _head_mix_rule(rec, r_out, cfg: LRPConfig):
    a, v = rec.inputs
    n_heads = rec.meta["n_heads"]
    if rec.meta.get("n_groups", 1) != 1:
        raise PropagationError("head_mix relevance rule covers single-bag traces only")
    t, d = v.shape
    dh = d // n_heads
    ratio = r_out / (rec.output + cfg.epsilon * _sign(rec.output))
    r_v = np.empty_like(v)
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        a_h = a[h * t : (h + 1) * t]
        r_v[:, lo:hi] = v[:, lo:hi] * (a_h.T @ ratio[:, lo:hi])
    return r_v


def _layernorm_rule(rec, r_out, cfg: LRPConfig):
    x, (g, _b) = rec.inputs[0], rec.params
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + rec.meta["eps"])
    ratio = r_out / (rec.output + cfg.epsilon * _sign(rec.output))
    s = (g / sigma) * ratio
    return x * (s - s.sum(axis=-1, keepdims=True) / x.shape[-1])


def _add_rule(rec, r_out, cfg: LRPConfig):
    a, b = rec.inputs
    ratio = r_out / (rec.output + cfg.epsilon * _sign(rec.output))
    return a * ratio, b * ratio


def _slice_embed(rec, r_out):
    full = np.zeros(rec.inputs[0].shape)
    idx = [slice(None)] * full.ndim
    idx[rec.meta["axis"]] = slice(rec.meta["start"], rec.meta["stop"])
    full[tuple(idx)] = r_out
    return full


_PASS_THROUGH = ("relu", "tanh", "sigmoid", "scale")


def _propagate(records, relevance: dict, cfg: LRPConfig, input_id: int):
    """Walk records newest-first, pushing relevance from outputs to inputs.

    Returns total absorbed relevance: per-layer losses to bias terms and
    stabilizers plus whatever remains parked on non-input leaves.
    """
    relu_fed = _relu_fed_outputs(records)
    absorbed = 0.0

    def give(node_id, r):
        relevance[node_id] = relevance[node_id] + r if node_id in relevance else r

    for rec in reversed(records):
        r_out = relevance.pop(rec.output_id, None)
        if r_out is None:
            continue
        kind = rec.kind
        rule = cfg.rule_overrides.get(kind)
        if kind in _PASS_THROUGH or rule == "pass":
            give(rec.input_ids[0], r_out)
            continue
        if kind == "linear":
            use_gamma = rule == "gamma" or (rule is None and rec.output_id in relu_fed)
            r_in = _linear_rule(rec, r_out, cfg, use_gamma)
            give(rec.input_ids[0], r_in)
            absorbed += float(r_out.sum() - r_in.sum())
        elif kind == "attention_mix":
            r_v = _attention_mix_rule(rec, r_out, cfg)
            give(rec.input_ids[1], r_v)
            absorbed += float(r_out.sum() - r_v.sum())
        elif kind == "head_mix":
            r_v = _head_mix_rule(rec, r_out, cfg)
            give(rec.input_ids[1], r_v)
            absorbed += float(r_out.sum() - r_v.sum())
        elif kind == "layernorm":
            r_in = _layernorm_rule(rec, r_out, cfg)
            give(rec.input_ids[0], r_in)
            absorbed += float(r_out.sum() - r_in.sum())
        elif kind == "add":
            r_a, r_b = _add_rule(rec, r_out, cfg)
            give(rec.input_ids[0], r_a)
            give(rec.input_ids[1], r_b)
            absorbed += float(r_out.sum() - r_a.sum() - r_b.sum())
        elif kind == "concat":
            axis = rec.meta["axis"]
            offset = 0
            for node_id, part in zip(rec.input_ids, rec.inputs):
                width = part.shape[axis]
                idx = [slice(None)] * r_out.ndim
                idx[axis] = slice(offset, offset + width)
                give(node_id, r_out[tuple(idx)])
                offset += width
        elif kind == "slice":
            give(rec.input_ids[0], _slice_embed(rec, r_out))
        elif kind == "transpose":
            give(rec.input_ids[0], r_out.T.copy())
        elif kind == "reshape":
            give(rec.input_ids[0], r_out.reshape(rec.inputs[0].shape))
        else:
            raise PropagationError(
                f"relevance reached layer kind {kind!r}, which has no rule"
            )

    leftover = 0.0
    for node_id, r in relevance.items():
        if node_id != input_id:
            leftover += float(np.asarray(r).sum())
    return absorbed + leftover


def explain_lrp(model, bag, target_class: int, config: LRPConfig | None = None) -> Attribution:
    """Relevance decomposition of the class logit down to instance features."""
    cfg = config or LRPConfig()
    features = _features(bag)
    x = Tensor(features)
    with record_trace() as trace, no_grad():
        logits = model.forward(x)
    if not trace.records:
        raise PropagationError("forward produced no trace records")
    if not 0 <= target_class < logits.data.shape[1]:
        raise ValueError(f"class {target_class} out of range")
    logit_value = float(logits.data[0, target_class])
    seed = np.zeros_like(logits.data)
    seed[0, target_class] = logit_value
    relevance = {trace.records[-1].output_id: seed}
    absorbed = _propagate(trace.records, relevance, cfg, x.node_id)
    feature_rel = relevance.get(x.node_id)
    if feature_rel is None:
        feature_rel = np.zeros_like(features)
    scores = feature_rel.sum(axis=1)
    return Attribution(
        method=METHOD_LRP,
        target_class=target_class,
        scores=scores,
        feature_relevance=feature_rel,
        conservation_deficit=logit_value - float(scores.sum()),
        absorbed_relevance=absorbed,
    )


def explain_attention(model, bag) -> Attribution:
    if not isinstance(model, AttnMILModel):
        raise TypeError("attention scores require the gated-attention model")
    with no_grad():
        model.forward(_features(bag))
    return Attribution(
        method=METHOD_ATTENTION, target_class=None, scores=model.last_attention.copy()
    )


def attention_rollout(model, bag) -> Attribution:
    """Head-averaged attention products, class-token row, identity-mixed."""
    if not isinstance(model, MiniTransMIL):
        raise TypeError("attention rollout requires the transformer model")
    features = _features(bag)
    with no_grad():
        model.forward(features)
    rolled = None
    for layer_mats in model.last_attention:
        mean_heads = np.mean(layer_mats, axis=0)
        mixed = 0.5 * mean_heads + 0.5 * np.eye(mean_heads.shape[0])
        rolled = mixed if rolled is None else mixed @ rolled
    return Attribution(
        method=METHOD_ROLLOUT, target_class=None, scores=rolled[0, 1:].copy()
    )


def explain_gxi(model, bag, target_class: int) -> Attribution:
    features = _features(bag)
    x = Tensor(features, requires_grad=True)
    logits = model.forward(x)
    if not 0 <= target_class < logits.data.shape[1]:
        raise ValueError(f"class {target_class} out of range")
    backward(forward_op("pick", (logits,), index=target_class))
    return Attribution(
        method=METHOD_GXI,
        target_class=target_class,
        scores=(x.grad * features).sum(axis=1),
    )


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def explain_single(model, bag, target_class: int) -> Attribution:
    """Class probability of each instance in isolation."""
    features = _features(bag)
    with no_grad():
        logits = model.forward_batch(features, 1).data
    return Attribution(
        method=METHOD_SINGLE,
        target_class=target_class,
        scores=_softmax_rows(logits)[:, target_class].copy(),
    )


def explain_one_removed(model, bag, target_class: int) -> Attribution:
    """Probability drop when an instance is deleted from the bag."""
    features = _features(bag)
    k = features.shape[0]
    if k < 2:
        raise ValueError("one-removed needs at least 2 instances")
    with no_grad():
        full = _softmax_rows(model.forward(features).data)[0, target_class]
        keep = ~np.eye(k, dtype=bool)
        dropped = np.concatenate([features[keep[i]] for i in range(k)], axis=0)
        logits = model.forward_batch(dropped, k - 1).data
    return Attribution(
        method=METHOD_ONE_REMOVED,
        target_class=target_class,
        scores=full - _softmax_rows(logits)[:, target_class],
    )


def explain_combined(model, bag, target_class: int) -> Attribution:
    single = explain_single(model, bag, target_class)
    removed = explain_one_removed(model, bag, target_class)
    return Attribution(
        method=METHOD_COMBINED,
        target_class=target_class,
        scores=0.5 * (single.scores + removed.scores),
    )


def explain_random(bag, seed) -> Attribution:
    entropy = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    rng = np.random.default_rng(np.random.SeedSequence(entropy + (301,)))
    k = _features(bag).shape[0]
    return Attribution(
        method=METHOD_RANDOM, target_class=None, scores=rng.standard_normal(k)
    )


ALL_METHODS = (
    METHOD_LRP,
    METHOD_ATTENTION,
    METHOD_ROLLOUT,
    METHOD_GXI,
    METHOD_SINGLE,
    METHOD_ONE_REMOVED,
    METHOD_COMBINED,
    METHOD_RANDOM,
)
CLASS_FREE_METHODS = (METHOD_ATTENTION, METHOD_ROLLOUT, METHOD_RANDOM)


def make_explainer(method: str, lrp_config: LRPConfig | None = None, seed: int = 0):
    """Adapter with the uniform signature fn(model, bag, target_class, bag_index).

    The returned callable produces the method's score vector; its
    ``class_dependent`` attribute tells evaluation loops whether the target
    class changes the output. The random baseline derives an independent
    stream from (seed, bag_index).
    """
    if method == METHOD_LRP:
        fn = lambda model, bag, c, i: explain_lrp(model, bag, c, lrp_config).scores
    elif method == METHOD_ATTENTION:
        fn = lambda model, bag, c, i: explain_attention(model, bag).scores
    elif method == METHOD_ROLLOUT:
        fn = lambda model, bag, c, i: attention_rollout(model, bag).scores
    elif method == METHOD_GXI:
        fn = lambda model, bag, c, i: explain_gxi(model, bag, c).scores
    elif method == METHOD_SINGLE:
        fn = lambda model, bag, c, i: explain_single(model, bag, c).scores
    elif method == METHOD_ONE_REMOVED:
        fn = lambda model, bag, c, i: explain_one_removed(model, bag, c).scores
    elif method == METHOD_COMBINED:
        fn = lambda model, bag, c, i: explain_combined(model, bag, c).scores
    elif method == METHOD_RANDOM:
        fn = lambda model, bag, c, i: explain_random(bag, (seed, i)).scores
    else:
        raise ValueError(f"unknown explanation method {method!r}")
    fn.class_dependent = method not in CLASS_FREE_METHODS
    fn.method = method
    return fn


def pixel_relevance(
    featurizer: Featurizer,
    image: np.ndarray,
    feature_rel: np.ndarray,
    config: LRPConfig | None = None,
) -> np.ndarray:
    """Continue a 64-d feature relevance vector down to the 784 pixels."""
    if not isinstance(featurizer, Featurizer):
        raise TypeError("pixel relevance requires the built-in digit featurizer")
    cfg = config or LRPConfig()
    image = np.asarray(image, dtype=np.float64).reshape(1, 784)
    p = featurizer.params
    x = Tensor(image)
    with record_trace() as trace, no_grad():
        h = forward_op("relu", (forward_op("linear", (x,), (Tensor(p["w1"]), Tensor(p["b1"]))),))
        forward_op("relu", (forward_op("linear", (h,), (Tensor(p["w2"]), Tensor(p["b2"]))),))
    relevance = {trace.records[-1].output_id: np.asarray(feature_rel, dtype=np.float64).reshape(1, 64)}
    _propagate(trace.records, relevance, cfg, x.node_id)
    return relevance[x.node_id].reshape(784)
