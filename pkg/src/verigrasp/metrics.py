"""Evaluation metrics with exact, countable definitions.

Every metric here has a brute-force twin in the test suite; the
implementations below are written so the two routes agree exactly (pair
counting for ranking metrics, sequential accumulation where float order
matters). Entropy-derived confidence is ``1 - H / ln(n)`` with n the
number of attention candidates; all logarithms are natural.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .world import MAX_STEP


def _check_binary(labels) -> np.ndarray:
    arr = np.asarray(labels, dtype=bool)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("labels must be a nonempty 1-d boolean array")
    if arr.all() or not arr.any():
        raise ValidationError("need both classes present")
    return arr


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank (a half-integer)."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + 1 + j + 1) / 2.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counted half.

    Computed from average ranks, which is exactly the pair-counting
    definition because all intermediate values are half-integers.
    """
    labels = _check_binary(labels)
    scores = np.asarray(scores, dtype=float)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must align")
    ranks = _average_ranks(scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    rank_sum = float(np.sum(ranks[labels]))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def aupr(scores, labels) -> float:
    """Average precision over descending score thresholds, tie groups atomic."""
    labels = _check_binary(labels)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="mergesort")
    n_pos = int(labels.sum())

    ap = 0.0
    tp = 0
    fp = 0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        tp_prev = tp
        for k in range(i, j + 1):
            if labels[order[k]]:
                tp += 1
            else:
                fp += 1
        if tp > tp_prev:
            ap += ((tp - tp_prev) / n_pos) * (tp / (tp + fp))
        i = j + 1
    return ap


def ece(confidences, outcomes, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width bins on [0, 1].

    Bin b collects confidences in [b/n_bins, (b+1)/n_bins), with 1.0
    falling into the last bin; empty bins contribute zero weight.
    """
    conf = np.asarray(confidences, dtype=float)
    correct = np.asarray(outcomes, dtype=bool)
    if conf.shape != correct.shape or conf.size == 0:
        raise ValidationError("confidences and outcomes must align and be nonempty")
    if np.any(conf < 0.0) or np.any(conf > 1.0):
        raise ValidationError("confidences must lie in [0, 1]")

    total = 0.0
    n = conf.size
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        acc = float(correct[mask].sum()) / count
        avg_conf = float(conf[mask].sum()) / count
        total += (count / n) * abs(acc - avg_conf)
    return total


def fpr_at_tpr(scores, labels, tpr_target: float = 0.95) -> float:
    """False-positive rate at the loosest threshold reaching the TPR target.

    Positives are flagged when score >= threshold; thresholds sweep the
    distinct scores from high to low.
    """
    labels = _check_binary(labels)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos

    order = np.argsort(-scores, kind="mergesort")
    tp = 0
    fp = 0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        for k in range(i, j + 1):
            if labels[order[k]]:
                tp += 1
            else:
                fp += 1
        if tp / n_pos >= tpr_target:
            return fp / n_neg
        i = j + 1
    return 1.0


def coverage_at_accuracy(entropies, correct, accuracy_target: float = 0.95) -> float:
    """Max fraction of episodes acted on while keeping selective accuracy
    at or above the target; acting means entropy <= threshold."""
    h = np.asarray(entropies, dtype=float)
    ok = np.asarray(correct, dtype=bool)
    if h.shape != ok.shape or h.size == 0:
        raise ValidationError("entropies and outcomes must align and be nonempty")
    best = 0.0
    for threshold in np.unique(h):
        acted = h <= threshold
        n_acted = int(acted.sum())
        if n_acted == 0:
            continue
        if float(ok[acted].sum()) / n_acted >= accuracy_target:
            best = max(best, n_acted / h.size)
    return best


def retrieval_rank(logits: np.ndarray, true_index: int) -> int:
    """Pessimistic rank of the true candidate: ties count as ranked above."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= true_index < logits.size:
        raise ValidationError("true index out of range")
    target = logits[true_index]
    above = int(np.sum(logits > target))
    tied = int(np.sum(logits == target)) - 1
    return 1 + above + tied


def recall_at_k(episodes, k: int) -> float:
    """Fraction of (logits, true_index) episodes ranked within the top k."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    episodes = list(episodes)
    if not episodes:
        raise ValidationError("no retrieval episodes")
    hits = sum(1 for logits, idx in episodes if retrieval_rank(logits, idx) <= k)
    return hits / len(episodes)


# ---------- discrete information quantities ----------

def mutual_information_plugin(xs, ys) -> float:
    """Plug-in MI (nats) of the empirical joint of two discrete sequences."""
    xs, ys = list(xs), list(ys)
    if len(xs) != len(ys) or not xs:
        raise ValidationError("MI needs two equal-length nonempty sequences")
    n = len(xs)
    joint: dict[tuple, int] = {}
    mx: dict = {}
    my: dict = {}
    for x, y in zip(xs, ys):
        joint[(x, y)] = joint.get((x, y), 0) + 1
        mx[x] = mx.get(x, 0) + 1
        my[y] = my.get(y, 0) + 1
    mi = 0.0
    for (x, y), c in joint.items():
        mi += (c / n) * np.log(c * n / (mx[x] * my[y]))
    # the population quantity is nonnegative; rounding can leave -1e-17
    return max(float(mi), 0.0)


def conditional_mutual_information(xs, ys, cs) -> float:
    """I(X; Y | C) as the context-weighted average of per-context MI."""
    xs, ys, cs = list(xs), list(ys), list(cs)
    if not (len(xs) == len(ys) == len(cs)) or not xs:
        raise ValidationError("conditional MI needs three aligned sequences")
    n = len(xs)
    by_context: dict = {}
    for x, y, c in zip(xs, ys, cs):
        by_context.setdefault(c, ([], []))
        by_context[c][0].append(x)
        by_context[c][1].append(y)
    total = 0.0
    for _, (cx, cy) in by_context.items():
        total += (len(cx) / n) * mutual_information_plugin(cx, cy)
    return total


def quantize_delta(delta, n_bins: int = 5,
                   lo: float = -MAX_STEP, hi: float = MAX_STEP) -> tuple[int, ...]:
    """Uniformly bin each displacement dimension into n_bins cells."""
    d = np.asarray(delta, dtype=float)
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, n_bins - 1)
    return tuple(int(i) for i in idx)


@dataclass(frozen=True)
class LanguageInfluenceEstimate:
    """Conditional MI between instruction and action, plus its normalized
    complement (1 = actions ignore language entirely, 0 = full use)."""

    mutual_information: float
    normalizer: float
    ignorance_index: float
    n_contexts: int
    per_context: dict[object, float] = field(default_factory=dict)


def language_influence(samples) -> LanguageInfluenceEstimate:
    """Estimate instruction-to-action influence on a finite trace grid.

    ``samples`` is an iterable of (context_key, instruction_key, action_key)
    triples with hashable keys; callers pick the action abstraction (for
    continuous actions, quantize first — see ``quantize_delta``). Contexts
    with a single distinct instruction carry no signal and are excluded
    from the normalizer.
    """
    by_context: dict = {}
    for context, instruction, action_key in samples:
        if isinstance(action_key, (np.ndarray, list)):
            raise ValidationError(
                "continuous actions must be quantized before the plug-in "
                "estimate; pass hashable keys (see quantize_delta)")
        by_context.setdefault(context, ([], []))
        by_context[context][0].append(instruction)
        by_context[context][1].append(action_key)
    if not by_context:
        raise ValidationError("no language influence samples")

    n = sum(len(v[0]) for v in by_context.values())
    mi_sum = 0.0
    norm_sum = 0.0
    per_context = {}
    for context, (instr, acts) in by_context.items():
        w = len(instr) / n
        mi_c = mutual_information_plugin(instr, acts)
        per_context[context] = mi_c
        mi_sum += w * mi_c
        n_distinct = len(set(instr))
        if n_distinct > 1:
            norm_sum += w * float(np.log(n_distinct))
    if norm_sum <= 0.0:
        raise ValidationError("every context has a single instruction; index undefined")

    index = 1.0 - mi_sum / norm_sum
    return LanguageInfluenceEstimate(
        mutual_information=mi_sum,
        normalizer=norm_sum,
        ignorance_index=float(min(max(index, 0.0), 1.0)),
        n_contexts=len(by_context),
        per_context=per_context,
    )


def bottleneck_decomposition(samples) -> dict[str, float]:
    """Three plug-in terms of the goal-mediation identity on a finite grid.

    ``samples`` is an iterable of (context, instruction, goal_key,
    action_key). When the action is a deterministic function of (goal,
    context), ``direct`` equals ``through_goal - residual`` exactly.
    """
    rows = list(samples)
    if not rows:
        raise ValidationError("no decomposition samples")
    cs = [r[0] for r in rows]
    ls = [r[1] for r in rows]
    gs = [r[2] for r in rows]
    acts = [r[3] for r in rows]
    direct = conditional_mutual_information(ls, acts, cs)
    through_goal = conditional_mutual_information(ls, gs, cs)
    residual = conditional_mutual_information(ls, gs, list(zip(acts, cs)))
    return {
        "direct": direct,
        "through_goal": through_goal,
        "residual": residual,
        "gap": direct - (through_goal - residual),
    }


# ---------- report assembly over episode records ----------

def confidence_from_entropy(entropy: float, n_candidates: int) -> float:
    if n_candidates <= 1:
        return 1.0
    return 1.0 - entropy / float(np.log(n_candidates))


def detection_report(records) -> dict[str, float]:
    """Ambiguity-detection metrics over always-act episode records."""
    records = list(records)
    scores = [r.entropy for r in records]
    labels = [r.ambiguous for r in records]
    conf = [confidence_from_entropy(r.entropy, len(r.attention_ids)) for r in records]
    predicted_ambiguous = [c < 0.5 for c in conf]
    calib_outcome = [p == a for p, a in zip(predicted_ambiguous, labels)]
    return {
        "auroc": auroc(scores, labels),
        "aupr": aupr(scores, labels),
        "ece": ece(conf, calib_outcome),
        "fpr_at_95": fpr_at_tpr(scores, labels),
        "cov_at_95": coverage_at_accuracy(scores, [r.success for r in records]),
    }


def gated_report(records) -> dict[str, float]:
    """Clarify/act quality over records evaluated with a selective gate."""
    records = list(records)
    amb = [r for r in records if r.ambiguous]
    unamb = [r for r in records if not r.ambiguous]
    if not amb or not unamb:
        raise ValidationError("gated report needs both ambiguous and unambiguous episodes")
    return {
        "clar_at_ambig": sum(r.clarified for r in amb) / len(amb),
        "unambig_success": sum(r.success for r in unamb) / len(unamb),
        "total_success": sum(r.success for r in records) / len(records),
    }


def macro_total(detection: dict[str, float], gated: dict[str, float]) -> float:
    """Macro average of the normalized headline metrics (errors inverted)."""
    parts = [
        detection["auroc"],
        detection["aupr"],
        1.0 - detection["ece"],
        detection["cov_at_95"],
        1.0 - detection["fpr_at_95"],
        gated["clar_at_ambig"],
        gated["unambig_success"],
    ]
    return float(np.mean(parts))
