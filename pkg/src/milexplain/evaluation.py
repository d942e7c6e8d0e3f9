"""Scoring of explanations: agreement with ground truth and faithfulness.

Two complementary judgments. Against synthetic bags the ground-truth
evidence is known, so attributions are scored with AUPRC-2: average
precision at spotting positive-evidence instances plus average precision
at spotting negative-evidence ones. Without ground truth, faithfulness is
measured behaviorally: delete the highest-scored instances first and watch
the class probability fall. The faster it falls, the better the ranking;
the area under that deletion curve (AUPC, lower is better) summarizes it.
Method differences are tested with paired t-tests under Bonferroni
correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import t as _student_t

from .datasets import evidence_scores
from .explainers import Attribution, METHOD_LRP, METHOD_RANDOM
from .tensor_core import no_grad


@dataclass
class PerturbationCurve:
    scores: np.ndarray  # f(X^(k)) for k = 0..100
    aupc: float = field(init=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (101,):
            raise ValueError(f"expected 101 scores, got {self.scores.shape}")
        self.aupc = math.fsum(self.scores) / 100.0


@dataclass
class MethodStat:
    mean: float
    std: float
    n: int


@dataclass
class Comparison:
    method_a: str
    method_b: str
    t_stat: float
    p_value: float
    p_adjusted: float


@dataclass
class EvalReport:
    metric: str
    methods: dict[str, MethodStat]
    comparisons: list[Comparison] = field(default_factory=list)
    n_items: int = 0
    n_excluded: int = 0

    def to_jsonable(self) -> dict:
        return {
            "metric": self.metric,
            "n_items": self.n_items,
            "n_excluded": self.n_excluded,
            "methods": {
                name: {"mean": s.mean, "std": s.std, "n": s.n}
                for name, s in self.methods.items()
            },
            "comparisons": [
                {
                    "method_a": c.method_a,
                    "method_b": c.method_b,
                    "t_stat": c.t_stat,
                    "p_value": c.p_value,
                    "p_adjusted": c.p_adjusted,
                }
                for c in self.comparisons
            ],
        }


def auprc(targets, scores) -> float:
    """Average precision with score-tied instances sharing one operating point."""
    targets = np.asarray(targets).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if targets.shape != scores.shape or targets.ndim != 1:
        raise ValueError("targets and scores must be equal-length vectors")
    n_pos = int(targets.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive target")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_targets = targets[order]
    tp = np.cumsum(sorted_targets)
    block_ends = np.nonzero(np.append(np.diff(sorted_scores) != 0.0, True))[0]
    # exact rational accumulation: the result is a uniquely defined float
    total = Fraction(0)
    prev_tp = 0
    for end in block_ends:
        gained = int(tp[end]) - prev_tp
        if gained:
            total += Fraction(gained * int(tp[end]), int(end) + 1)
            prev_tp = int(tp[end])
    return float(total / n_pos)


def auprc2(evidence, scores) -> float:
    """Mean average precision over the positive- and negative-evidence sides."""
    ev = np.asarray(getattr(evidence, "scores", evidence), dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if ev.shape != scores.shape:
        raise ValueError(f"evidence {ev.shape} vs scores {scores.shape}")
    sides = []
    if (ev > 0).any():
        sides.append(auprc(ev > 0, scores))
    if (ev < 0).any():
        sides.append(auprc(ev < 0, -scores))
    if not sides:
        raise ValueError("no nonzero evidence on either side")
    return float(np.mean(sides))


def _class_probabilities(model, features: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = model.forward(features).data[0]
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def morf_curve(model, bag, attribution) -> PerturbationCurve:
    """Delete instances most-relevant-first in 100 rank groups.

    Group i covers descending ranks in ((i-1)*K/100, i*K/100]; at k=100 the
    bag becomes a single all-zeros instance. The probability tracked is the
    model's predicted class on the untouched bag.
    """
    features = bag.instance_features if hasattr(bag, "instance_features") else np.asarray(bag, dtype=np.float64)
    scores = attribution.scores if isinstance(attribution, Attribution) else np.asarray(attribution, dtype=np.float64)
    k_total = features.shape[0]
    if scores.shape != (k_total,):
        raise ValueError(f"attribution covers {scores.shape}, bag has {k_total} instances")
    p0 = _class_probabilities(model, features)
    target = int(np.argmax(p0))
    order = np.argsort(-scores, kind="stable")
    out = np.empty(101)
    out[0] = p0[target]
    prev_removed = 0
    for k in range(1, 100):
        n_removed = (k * k_total) // 100
        if n_removed == prev_removed:
            out[k] = out[k - 1]
            continue
        prev_removed = n_removed
        keep = np.setdiff1d(np.arange(k_total), order[:n_removed])
        out[k] = _class_probabilities(model, features[keep])[target]
    out[100] = _class_probabilities(model, np.zeros((1, features.shape[1])))[target]
    return PerturbationCurve(out)


def aupc(curve) -> float:
    if isinstance(curve, PerturbationCurve):
        return curve.aupc
    scores = np.asarray(curve, dtype=np.float64)
    if scores.shape != (101,):
        raise ValueError(f"expected 101 scores, got {scores.shape}")
    return math.fsum(scores) / 100.0


def paired_t_test(a, b) -> tuple[float, float]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length vectors")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    if np.all(d == 0.0):
        return 0.0, 1.0
    mean = d.mean()
    se = d.std(ddof=1) / np.sqrt(n)
    if se == 0.0:
        return float(np.inf * np.sign(mean)), 0.0
    t_stat = mean / se
    p = 2.0 * float(_student_t.sf(abs(t_stat), n - 1))
    return float(t_stat), p


def bonferroni(p_values, m: int):
    if m < 1:
        raise ValueError("need at least one test")
    return [min(1.0, p * m) for p in p_values]


def run_toy_eval(task, model, explainers: dict, bags) -> EvalReport:
    """Mean AUPRC-2 per method over all (bag, class) pairs with evidence."""
    n_classes = task.n_classes
    values: dict[str, list] = {name: [] for name in explainers}
    n_pairs = 0
    for bag_index, bag in enumerate(bags):
        evidences = []
        for c in range(n_classes):
            ev = evidence_scores(task, bag, c).scores
            evidences.append(ev if (ev != 0).any() else None)
        if all(ev is None for ev in evidences):
            continue
        n_pairs += sum(ev is not None for ev in evidences)
        for name, explain in explainers.items():
            class_dependent = getattr(explain, "class_dependent", True)
            shared = None if class_dependent else explain(model, bag, 0, bag_index)
            for c, ev in enumerate(evidences):
                if ev is None:
                    continue
                scores = explain(model, bag, c, bag_index) if class_dependent else shared
                values[name].append(auprc2(ev, scores))
    methods = {
        name: MethodStat(float(np.mean(v)), float(np.std(v)), len(v))
        for name, v in values.items()
    }
    return EvalReport(metric="auprc2", methods=methods, n_items=n_pairs)


def run_faithfulness_eval(model, explainers: dict, bags, curve_sink=None) -> EvalReport:
    """AUPC per method over correctly classified bags, plus paired tests.

    curve_sink, when given, receives (original bag position, method name,
    PerturbationCurve) for every curve computed.
    """
    kept = []
    for position, bag in enumerate(bags):
        features = bag.instance_features
        if int(np.argmax(_class_probabilities(model, features))) == bag.label:
            kept.append((position, bag))
    if not kept:
        raise ValueError("no correctly classified bags; nothing to evaluate")
    aupcs: dict[str, np.ndarray] = {}
    for name, explain in explainers.items():
        vals = np.empty(len(kept))
        for bag_index, (position, bag) in enumerate(kept):
            target = int(np.argmax(_class_probabilities(model, bag.instance_features)))
            scores = explain(model, bag, target, bag_index)
            curve = morf_curve(model, bag, scores)
            if curve_sink is not None:
                curve_sink(position, name, curve)
            vals[bag_index] = curve.aupc
        aupcs[name] = vals
    methods = {
        name: MethodStat(float(v.mean()), float(v.std()), len(v))
        for name, v in aupcs.items()
    }
    pairs = []
    seen = set()
    for anchor in (METHOD_RANDOM, METHOD_LRP):
        if anchor not in aupcs:
            continue
        for other in aupcs:
            if other == anchor or frozenset((anchor, other)) in seen:
                continue
            seen.add(frozenset((anchor, other)))
            pairs.append((anchor, other))
    raw = [paired_t_test(aupcs[a], aupcs[b]) for a, b in pairs]
    adjusted = bonferroni([p for _, p in raw], len(pairs)) if pairs else []
    comparisons = [
        Comparison(a, b, t_stat, p, p_adj)
        for (a, b), (t_stat, p), p_adj in zip(pairs, raw, adjusted)
    ]
    return EvalReport(
        metric="aupc",
        methods=methods,
        comparisons=comparisons,
        n_items=len(kept),
        n_excluded=len(bags) - len(kept),
    )


def postprocess_heatmap(attribution) -> tuple[np.ndarray, np.ndarray]:
    """Whisker-clip scores and map to a zero-centered red/blue palette.

    Returns (clipped scores, (K, 3) uint8 RGB rows). Zero is white; the
    clipped extreme of larger magnitude saturates its side.
    """
    scores = attribution.scores if isinstance(attribution, Attribution) else np.asarray(attribution, dtype=np.float64)
    q1, q3 = np.percentile(scores, [25.0, 75.0])
    iqr = q3 - q1
    clipped = np.clip(scores, q1 - 1.5 * iqr, q3 + 1.5 * iqr)
    scale = max(abs(float(clipped.min())), abs(float(clipped.max())))
    rgb = np.full((len(clipped), 3), 255, dtype=np.uint8)
    if scale > 0.0:
        frac = clipped / scale
        fade = np.rint(255 * (1.0 - np.abs(frac))).astype(np.uint8)
        pos = frac >= 0
        rgb[pos, 1] = fade[pos]
        rgb[pos, 2] = fade[pos]
        rgb[~pos, 0] = fade[~pos]
        rgb[~pos, 1] = fade[~pos]
    return clipped, rgb


def heatmap_svg(rgb: np.ndarray, n_cols: int = 10, cell: int = 16) -> str:
    """Grid of colored cells, row-major by instance id."""
    k = len(rgb)
    n_rows = (k + n_cols - 1) // n_cols
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{n_cols * cell}" height="{n_rows * cell}">'
    ]
    for i, (r, g, b) in enumerate(rgb.tolist()):
        x, y = (i % n_cols) * cell, (i // n_cols) * cell
        parts.append(
            f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
