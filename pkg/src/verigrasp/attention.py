"""Single-head cross-attention from a grasp template onto the entity set.

The template query attends over entity rows (appearance plus position); the
attention-pooled value vector is the grounded goal handed to the policy, and
the entropy of the attention weights is the ambiguity signal used for
selective prediction. Entropy is measured in nats throughout.

The backward pass is written out analytically because training needs exact
gradients of this block; the finite-difference suite in the tests holds it
to that claim. Caches are single-use: reusing one raises StaleCacheError.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StaleCacheError, ValidationError
from .entities import APPEARANCE_DIM, ENTITY_FEATURE_DIM
from .planner import TEMPLATE_FEATURE_DIM, TOKEN_VOCAB

ATTENTION_DIM = 32
ENTROPY_TOL = 1e-6

# Init gains for the query/key/value maps. With unit-ish entity rows and the
# 1/sqrt(d) logit scaling, a plain 1/sqrt(fan_in) init leaves the softmax
# indistinguishable from uniform and the entropy signal never separates.
# The grounding critic aligns query/key directions but is norm-blind, so the
# norm product |q||k| acts as a fixed inverse temperature: the key gain is
# set high enough that a learned cosine gap becomes a multi-nat logit gap,
# while the query gain stays moderate because the critic rotates the query
# at a rate proportional to 1/|q|. The value gain only sets the scale of the
# pooled goal fed to the policy.
ATTENTION_QUERY_GAIN = 3.0
ATTENTION_KEY_GAIN = 12.0
ATTENTION_VALUE_GAIN = 3.0
# The policy has to read the referent's position back out of the pooled
# value vector to land inside the grasp radius. With isotropic value
# columns the appearance block (32 unit-norm dims) drowns the 3 position
# dims, so the position columns keep full gain and the appearance columns
# start heavily damped. Training may grow them back if appearance helps.
VALUE_APPEARANCE_SCALE = 0.1


@dataclass
class AttentionParams:
    """Query/key/value maps. The language query map only exists for the
    planner-free ablation, which embeds bag-of-words instructions directly."""

    w_query: np.ndarray  # (ATTENTION_DIM, TEMPLATE_FEATURE_DIM)
    w_key: np.ndarray  # (ATTENTION_DIM, ENTITY_FEATURE_DIM)
    w_value: np.ndarray  # (ATTENTION_DIM, ENTITY_FEATURE_DIM)
    w_query_lang: np.ndarray | None = None  # (ATTENTION_DIM, len(TOKEN_VOCAB))


def init_attention(rng: np.random.Generator, with_lang_query: bool = False) -> AttentionParams:
    def block(rows, cols, gain):
        return rng.normal(0.0, gain / np.sqrt(cols), size=(rows, cols))

    w_value = block(ATTENTION_DIM, ENTITY_FEATURE_DIM, ATTENTION_VALUE_GAIN)
    w_value[:, :APPEARANCE_DIM] *= VALUE_APPEARANCE_SCALE
    return AttentionParams(
        w_query=block(ATTENTION_DIM, TEMPLATE_FEATURE_DIM, ATTENTION_QUERY_GAIN),
        w_key=block(ATTENTION_DIM, ENTITY_FEATURE_DIM, ATTENTION_KEY_GAIN),
        w_value=w_value,
        w_query_lang=(
            block(ATTENTION_DIM, len(TOKEN_VOCAB), ATTENTION_QUERY_GAIN)
            if with_lang_query
            else None
        ),
    )


@dataclass(frozen=True)
class GroundedGoal:
    """Output of the verification stage for one (template, scene) pair."""

    embedding: np.ndarray  # (ATTENTION_DIM,)
    weights: np.ndarray  # (n,), the attention distribution
    logits: np.ndarray  # (n,), pre-softmax scores
    entropy: float  # nats, in [0, ln n]
    top_entity_id: int
    entity_ids: tuple[int, ...]


@dataclass
class AttentionCache:
    query_input: np.ndarray
    features: np.ndarray
    q: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    use_lang_query: bool
    consumed: bool = False


@dataclass
class AttentionGrads:
    d_w_query: np.ndarray
    d_w_key: np.ndarray
    d_w_value: np.ndarray
    d_query_input: np.ndarray
    d_features: np.ndarray
    lang_query: bool = False


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    exp = np.exp(shifted)
    return exp / np.sum(exp)


def attention_entropy(weights: np.ndarray, tol: float = ENTROPY_TOL) -> float:
    """Shannon entropy in nats with the 0 * ln 0 = 0 convention.

    Rejects vectors that are not a probability distribution within ``tol``.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValidationError("entropy expects a nonempty 1-d weight vector")
    if np.any(w < -tol) or abs(float(np.sum(w)) - 1.0) > tol:
        raise ValidationError(
            f"weights are not a distribution (sum {float(np.sum(w)):.9f})")
    w = np.clip(w, 0.0, None)
    nz = w[w > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def attend(query_input: np.ndarray, features: np.ndarray,
           entity_ids: tuple[int, ...], params: AttentionParams,
           use_lang_query: bool = False) -> tuple[GroundedGoal, AttentionCache]:
    """Scaled dot-product attention of one query over the entity rows.

    Returns the grounded goal plus a cache for the analytic backward pass.
    The top entity is the argmax attention weight with exact ties broken
    toward the lowest entity id.
    """
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValidationError("attention needs at least one entity row")
    if features.shape[0] != len(entity_ids):
        raise ValidationError("entity id list does not match feature rows")

    w_q = params.w_query_lang if use_lang_query else params.w_query
    if w_q is None:
        raise ValidationError("language query map requested but not initialised")

    q = w_q @ query_input
    keys = features @ params.w_key.T
    values = features @ params.w_value.T
    logits = keys @ q / np.sqrt(ATTENTION_DIM)
    weights = softmax(logits)
    goal = values.T @ weights

    top = np.max(weights)
    tied = [entity_ids[i] for i in range(len(entity_ids)) if weights[i] == top]
    cache = AttentionCache(
        query_input=query_input, features=features, q=q,
        keys=keys, values=values, weights=weights, use_lang_query=use_lang_query)
    return GroundedGoal(
        embedding=goal,
        weights=weights,
        logits=logits,
        entropy=attention_entropy(weights),
        top_entity_id=min(tied),
        entity_ids=tuple(entity_ids),
    ), cache


def attention_backward(d_goal: np.ndarray, cache: AttentionCache,
                       params: AttentionParams,
                       d_weights: np.ndarray | None = None) -> AttentionGrads:
    """Analytic gradients of a scalar loss through one attention call.

    ``d_goal`` is the upstream gradient on the pooled embedding and
    ``d_weights`` an optional extra gradient directly on the attention
    distribution. Zero upstream yields exact zero gradients.
    """
    if cache.consumed:
        raise StaleCacheError("attention cache already consumed")
    cache.consumed = True

    alpha = cache.weights
    d_values = np.outer(alpha, d_goal)
    d_alpha = cache.values @ d_goal
    if d_weights is not None:
        d_alpha = d_alpha + d_weights

    # softmax backward: dl = alpha * (d_alpha - <alpha, d_alpha>)
    d_logits = alpha * (d_alpha - float(alpha @ d_alpha))

    scale = 1.0 / np.sqrt(ATTENTION_DIM)
    d_q = cache.keys.T @ d_logits * scale
    d_keys = np.outer(d_logits, cache.q) * scale

    w_q = params.w_query_lang if cache.use_lang_query else params.w_query
    d_w_query = np.outer(d_q, cache.query_input)
    d_query_input = w_q.T @ d_q
    d_w_key = d_keys.T @ cache.features
    d_w_value = d_values.T @ cache.features
    d_features = d_keys @ params.w_key + d_values @ params.w_value

    return AttentionGrads(
        d_w_query=d_w_query,
        d_w_key=d_w_key,
        d_w_value=d_w_value,
        d_query_input=d_query_input,
        d_features=d_features,
        lang_query=cache.use_lang_query,
    )
