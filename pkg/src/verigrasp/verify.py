"""Numerical verification battery for the pipeline's formal claims.

Groups every check the theory rests on behind plain report functions:
entropy identities, the contrastive lower bound on grounding information
(with its two closed-form corner cases), the goal-mediation decomposition,
the action bottleneck replay, retrieval quality, and the language-
ignorance comparison across conditioning choices. The CLI's verify-theory
command and the acceptance tests both call straight into this module.

All reports are dicts of plain floats/bools so they serialize to JSON
untouched.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import gradcheck, losses, metrics, runner, training
from .benchmark import BenchmarkDataset
from .errors import ValidationError
from .planner import GraspTemplate
from .training import Checkpoint

ENTROPY_TOL = 1e-12


# ---------- entropy identities ----------

def entropy_battery(n_samples: int = 10000, seed: int = 0,
                    max_support: int = 32) -> dict:
    """Identity checks on the attention-entropy implementation.

    Uniform distributions must give ln n and one-hot distributions exactly
    zero; every random distribution must land in [0, ln n]; permuting a
    distribution must not change its entropy beyond summation roundoff.
    """
    from .attention import attention_entropy

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    worst_uniform = 0.0
    worst_onehot = 0.0
    worst_range = 0.0
    worst_perm = 0.0
    for _ in range(n_samples):
        n = int(rng.integers(2, max_support + 1))

        h_uniform = attention_entropy(np.full(n, 1.0 / n))
        worst_uniform = max(worst_uniform, abs(h_uniform - np.log(n)))

        onehot = np.zeros(n)
        onehot[int(rng.integers(n))] = 1.0
        worst_onehot = max(worst_onehot, abs(attention_entropy(onehot)))

        w = rng.dirichlet(np.full(n, float(rng.uniform(0.1, 3.0))))
        h = attention_entropy(w)
        worst_range = max(worst_range, max(-h, h - np.log(n)))

        h_perm = attention_entropy(w[rng.permutation(n)])
        worst_perm = max(worst_perm, abs(h - h_perm))

    passed = (worst_uniform <= ENTROPY_TOL and worst_onehot <= ENTROPY_TOL
              and worst_range <= ENTROPY_TOL and worst_perm <= ENTROPY_TOL)
    return {
        "n_samples": n_samples,
        "max_uniform_deviation": float(worst_uniform),
        "max_onehot_deviation": float(worst_onehot),
        "max_range_violation": float(worst_range),
        "max_permutation_deviation": float(worst_perm),
        "tol": ENTROPY_TOL,
        "passed": bool(passed),
    }


# ---------- contrastive bound corner cases ----------

def bound_corner_independent(n_candidates: int = 8, n_draws: int = 2000,
                             dim: int = 16, seed: int = 0) -> dict:
    """Independent (query, key) joint: the mean loss cannot dip below ln N.

    With zero mutual information the bound degenerates to
    E[loss] >= ln N; the check allows two standard errors of slack on the
    Monte Carlo estimate.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x52]))
    vals = []
    for _ in range(n_draws):
        query = rng.normal(size=dim)
        keys = rng.normal(size=(n_candidates, dim))  # positive equally unrelated
        loss, _, _ = losses.contrastive_loss(query, keys, 0, temperature=1.0)
        vals.append(loss)
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / np.sqrt(n_draws))
    target = float(np.log(n_candidates))
    return {
        "n_candidates": n_candidates,
        "n_draws": n_draws,
        "mean_loss": mean,
        "stderr": stderr,
        "ln_n": target,
        "passed": bool(mean >= target - 2.0 * stderr),
    }


def bound_corner_bijective(temperature: float = 0.07, tol: float = 0.05) -> dict:
    """Four-class bijective joint with a perfect critic: slack collapses.

    Classes map one-to-one onto orthonormal key prototypes and each query
    is its class prototype, so cosine similarity is 1 for the match and 0
    otherwise. Candidate sets enumerate one key per class, making the
    slack I - (ln N - E[loss]) = E[loss], which must vanish within
    ``tol`` nats. This is deterministic; no sampling involved.
    """
    n = 4
    prototypes = np.eye(n)
    total = 0.0
    for s in range(n):
        loss, _, _ = losses.contrastive_loss(prototypes[s], prototypes, s, temperature)
        total += loss
    mean_loss = total / n
    mi = float(np.log(n))  # bijective map of a uniform class variable
    bound_value = float(np.log(n)) - mean_loss
    slack = mi - bound_value
    return {
        "n_candidates": n,
        "mean_loss": mean_loss,
        "mutual_information": mi,
        "bound_value": bound_value,
        "slack": slack,
        "tol": tol,
        "passed": bool(0.0 <= slack <= tol),
    }


def bound_reports(ds: BenchmarkDataset, ckpt: Checkpoint,
                  sizes: tuple[int, ...] = (4, 8, 16), seed: int = 0) -> dict:
    """Trained-checkpoint bound checks plus the two corner cases."""
    out = {
        "checkpoint": {
            str(n): dataclasses.asdict(training.verify_infonce_bound(ds, ckpt, n, seed=seed))
            for n in sizes
        },
        "corner_independent": bound_corner_independent(seed=seed),
        "corner_bijective": bound_corner_bijective(),
    }
    out["passed"] = bool(
        all(r["satisfied"] for r in out["checkpoint"].values())
        and out["corner_independent"]["passed"]
        and out["corner_bijective"]["passed"])
    return out


# ---------- retrieval ----------

def retrieval_episodes(ds: BenchmarkDataset, ckpt: Checkpoint, n_candidates: int,
                       seed: int = 0, splits: tuple[str, ...] = ("test",)):
    """(cosine scores, true index) episodes: one positive key per query plus
    distractor keys whose entities do not satisfy the query's template.

    Distractors are filtered the same way training negatives are: a key whose
    entity also satisfies the template is an equally valid referent, so
    ranking it above the recorded one would not be a grounding error, and
    keeping such keys in the candidate set would turn the metric into a
    measure of template collision frequency rather than grounding quality.
    """
    pairs, queries, keys = training.grounding_pairs(
        ds, ckpt.params, ckpt.config.ablation, splits)
    if len(pairs) <= n_candidates:
        raise ValidationError(
            f"need more than {n_candidates} grounding pairs, have {len(pairs)}")
    q = np.stack(queries)
    k = np.stack(keys)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    k = k / np.linalg.norm(k, axis=1, keepdims=True)

    templates = {t: GraspTemplate.from_canonical(t)
                 for t in {p.template_key for p in pairs}}
    non_matching = {
        t_key: np.array([j for j, p in enumerate(pairs)
                         if not template.admits_class(p.class_key)])
        for t_key, template in templates.items()
    }

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x53]))
    episodes = []
    for i, pair in enumerate(pairs):
        neg = non_matching[pair.template_key]
        if len(neg) < n_candidates - 1:
            raise ValidationError(
                f"template {pair.template_key!r} has only {len(neg)} "
                f"non-matching keys, need {n_candidates - 1}")
        pick = rng.choice(len(neg), size=n_candidates - 1, replace=False)
        cand = np.concatenate([[i], neg[pick]])
        episodes.append((k[cand] @ q[i], 0))
    return episodes


def retrieval_report(ds: BenchmarkDataset, ckpt: Checkpoint,
                     sizes: tuple[int, ...] = (8, 16, 32), seed: int = 0) -> dict:
    return {
        str(n): metrics.recall_at_k(retrieval_episodes(ds, ckpt, n, seed), 1)
        for n in sizes
    }


# ---------- goal mediation: decomposition, bottleneck, ignorance ----------

def decomposition_report(ds: BenchmarkDataset, ckpt: Checkpoint,
                         split: str = "test", tol: float = 1e-6) -> dict:
    """Plug-in check of the mediation identity on the evaluation grid."""
    samples = runner.goal_conditioned_samples(ckpt.params, ckpt.config.ablation, ds, split)
    rows = [(c, i, g, metrics.quantize_delta(d)) for c, i, d, g in samples]
    report = metrics.bottleneck_decomposition(rows)
    report["tol"] = tol
    report["passed"] = bool(abs(report["gap"]) <= tol)
    return report


def bottleneck_report(records, params, n_episodes: int = 100) -> dict:
    """Audit the logged inputs and replay actions with foreign instructions."""
    from .policy import bottleneck_audit

    acted = [r for r in records if r.acted and r.steps][:n_episodes]
    if len(acted) < n_episodes:
        raise ValidationError(
            f"need {n_episodes} acted episodes for the replay check, have {len(acted)}")
    audit = bottleneck_audit(acted)
    replay = runner.shuffled_instruction_replay(acted, params)
    return {
        "audit_ok": audit.ok,
        "n_violations": len(audit.violations),
        "replay": replay,
        "passed": bool(audit.ok and replay["all_identical"]),
    }


def influence_comparison(ds: BenchmarkDataset, ckpt: Checkpoint,
                         split: str = "test", seed: int = 0) -> dict:
    """Language-ignorance index under three conditioning choices.

    The grounded-goal pipeline competes against two imitation baselines fed
    raw instruction features (bag-of-words, parsed template) instead of a
    goal embedding. Actions are abstracted to rollout endpoints labelled by
    the nearest entity; lower index = endpoints track language more closely.
    """
    goal_samples = runner.goal_endpoint_samples(
        ckpt.params, ckpt.config.ablation, ds, split)
    out = {"goal": metrics.language_influence(goal_samples).ignorance_index}
    for kind in ("bow", "template"):
        pol = training.train_feature_policy(ds, kind, seed=seed)
        samples = runner.feature_endpoint_samples(pol, kind, ds, split)
        out[kind] = metrics.language_influence(samples).ignorance_index
    out["goal_lowest"] = bool(out["goal"] < out["bow"] and out["goal"] < out["template"])
    out["passed"] = out["goal_lowest"]
    return out


# ---------- assembled battery ----------

def theory_battery(ds: BenchmarkDataset, ckpt: Checkpoint,
                   grad_instances: int = 100, seed: int = 0,
                   include_robustness: bool = True) -> dict:
    """Everything verify-theory reports, as one JSON-ready dict."""
    families = gradcheck.run_family_checks(n_instances=grad_instances, seed=seed)
    composed = gradcheck.check_composed(seed=seed, ablation=ckpt.config.ablation)
    gradients = {
        "families": families,
        "composed_max_rel_error": max(composed.values()),
        "composed": composed,
        "passed": bool(all(f["passed"] for f in families.values())
                       and max(composed.values()) < 1e-4),
    }

    records = runner.evaluate_split(ckpt.params, ckpt.config.ablation, ds,
                                    "test", ckpt.config.ablation)
    report = {
        "gradients": gradients,
        "entropy": entropy_battery(seed=seed),
        "bound": bound_reports(ds, ckpt, seed=seed),
        "decomposition": decomposition_report(ds, ckpt),
        "bottleneck": bottleneck_report(records, ckpt.params),
        "retrieval": retrieval_report(ds, ckpt, seed=seed),
        "influence": influence_comparison(ds, ckpt, seed=seed),
    }
    if include_robustness:
        sweep = runner.robustness_sweep(ckpt.params, ckpt.config.ablation, ds)
        report["robustness"] = {
            "sweep": sweep,
            "passed": bool(all(k["exact_at_zero"] for k in sweep.values())),
        }
    report["passed"] = bool(all(
        section["passed"] for name, section in report.items()
        if isinstance(section, dict) and "passed" in section))
    return report
