"""Entropy-gated clarify/act decisions and risk-coverage analysis.

The decision rule is fixed: clarify exactly when the attention entropy is
strictly above the threshold, act otherwise (equality acts). Thresholds are
calibrated on validation logs by sweeping the midpoints between consecutive
distinct entropies plus one candidate below the minimum and one above the
maximum; on perfectly separated logs this lands in the middle of the gap.

Risk-coverage curves sweep the same rule: each distinct entropy value is a
threshold, coverage is the fraction acted on (nondecreasing in the
threshold) and risk is the failure rate among acted episodes. The act-on-all
endpoint (threshold at the max entropy, coverage 1.0, risk equal to the
overall failure rate) is always part of the curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class SelectivePolicy:
    threshold: float
    degenerate: bool = False

    def __post_init__(self):
        if self.threshold < 0:
            raise ValidationError("entropy threshold must be nonnegative")


@dataclass(frozen=True)
class RiskCoveragePoint:
    threshold: float
    coverage: float
    risk: float
    n_acted: int


def decide(policy: SelectivePolicy, entropy: float) -> str:
    """"clarify" when entropy > threshold, "act" otherwise (strict)."""
    if entropy < 0:
        raise ValidationError("entropy must be nonnegative")
    return "clarify" if entropy > policy.threshold else "act"


def _threshold_candidates(entropies: np.ndarray) -> list[float]:
    uniq = np.unique(entropies)
    cands = [float(uniq[0]) / 2.0]  # below the minimum: clarify everything possible
    for a, b in zip(uniq[:-1], uniq[1:]):
        cands.append(float(a + b) / 2.0)
    cands.append(float(uniq[-1]) + 1.0)  # above the maximum: act on everything
    return cands


def _gated_success(record, threshold: float) -> bool:
    clarified = record.entropy > threshold
    if clarified:
        return record.ambiguous
    return record.success


def calibrate_threshold(records, target: str = "max_total") -> SelectivePolicy:
    """Pick the decision threshold from always-act validation records.

    ``max_total`` maximizes overall benchmark success (clarify is correct
    on ambiguous episodes, an acted success is correct on unambiguous
    ones). ``cov_at_95`` maximizes coverage subject to selective accuracy
    at least 0.95 among acted episodes. Ties resolve to the smallest
    threshold.
    """
    records = list(records)
    if not records:
        raise ValidationError("cannot calibrate on an empty log")
    if target not in ("max_total", "cov_at_95"):
        raise ValidationError(f"unknown calibration target {target!r}")

    entropies = np.asarray([r.entropy for r in records], dtype=float)
    if np.all(entropies == entropies[0]):
        return SelectivePolicy(threshold=float(entropies[0]), degenerate=True)

    best_threshold = None
    best_score = -np.inf
    for threshold in _threshold_candidates(entropies):
        if threshold < 0:
            continue
        if target == "max_total":
            score = sum(_gated_success(r, threshold) for r in records) / len(records)
        else:
            acted = [r for r in records if r.entropy <= threshold]
            if not acted:
                score = 0.0
            else:
                accuracy = sum(r.success for r in acted) / len(acted)
                score = len(acted) / len(records) if accuracy >= 0.95 else 0.0
        if score > best_score or (score == best_score and threshold < best_threshold):
            best_score = score
            best_threshold = threshold
    return SelectivePolicy(threshold=float(best_threshold))


def risk_coverage_curve(records) -> list[RiskCoveragePoint]:
    """One point per distinct entropy threshold, sorted by coverage.

    Thresholds acting on nothing are skipped (risk would be 0/0); the final
    point always has coverage 1.0.
    """
    records = list(records)
    if not records:
        raise ValidationError("cannot build a risk-coverage curve from no records")
    entropies = np.asarray([r.entropy for r in records], dtype=float)
    successes = np.asarray([r.success for r in records], dtype=bool)

    points = []
    for threshold in np.unique(entropies):
        acted = entropies <= threshold
        n_acted = int(acted.sum())
        if n_acted == 0:
            continue
        failures = n_acted - int(successes[acted].sum())
        points.append(RiskCoveragePoint(
            threshold=float(threshold),
            coverage=n_acted / len(records),
            risk=failures / n_acted,
            n_acted=n_acted,
        ))
    return points


def risk_at_coverage(points: list[RiskCoveragePoint], coverage: float) -> float:
    """Risk of the smallest curve point covering at least ``coverage``."""
    if not points:
        raise ValidationError("empty risk-coverage curve")
    for point in points:
        if point.coverage >= coverage:
            return point.risk
    return points[-1].risk


def compare_risk_coverage(records_a, records_b, coverages=None,
                          n_boot: int = 200, seed: int = 0) -> dict:
    """Bootstrap comparison of two risk-coverage curves at matched coverage.

    Returns the observed fraction of grid points where curve A is at or
    below curve B, plus the 10th percentile of the bootstrap distribution
    of that fraction (resampling episodes within each log independently).
    """
    records_a = list(records_a)
    records_b = list(records_b)
    if coverages is None:
        coverages = [0.1 * k for k in range(1, 11)]

    def frac_leq(recs_a, recs_b) -> float:
        curve_a = risk_coverage_curve(recs_a)
        curve_b = risk_coverage_curve(recs_b)
        hits = sum(1 for c in coverages
                   if risk_at_coverage(curve_a, c) <= risk_at_coverage(curve_b, c) + 1e-12)
        return hits / len(coverages)

    observed = frac_leq(records_a, records_b)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2E]))
    boot = []
    for _ in range(n_boot):
        sample_a = [records_a[int(i)] for i in rng.integers(0, len(records_a), len(records_a))]
        sample_b = [records_b[int(i)] for i in rng.integers(0, len(records_b), len(records_b))]
        boot.append(frac_leq(sample_a, sample_b))
    boot = np.asarray(boot)
    return {
        "observed_fraction": observed,
        "bootstrap_p10": float(np.percentile(boot, 10)),
        "bootstrap_mean": float(boot.mean()),
        "coverages": list(coverages),
    }
