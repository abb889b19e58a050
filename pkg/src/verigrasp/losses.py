"""Training losses: contrastive grounding alignment and action imitation.

The contrastive loss scores one query (a template embedding) against a
candidate list of entity key embeddings, exactly one of which is the
positive. Similarity is cosine, scaled by a temperature, and the loss is
cross-entropy against the positive index. With all candidates equally
similar the loss is ln N; with a single candidate it is zero.

Both losses return their analytic input gradients alongside the value so
the trainer never has to re-derive them.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

DEFAULT_TEMPERATURE = 0.07


def cosine_rows(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    nq = np.linalg.norm(query)
    nk = np.linalg.norm(keys, axis=1)
    if nq < 1e-12 or np.any(nk < 1e-12):
        raise ValidationError("zero-norm vector in cosine similarity")
    return (keys @ query) / (nq * nk)


def contrastive_loss(query: np.ndarray, keys: np.ndarray, positive_index: int,
                     temperature: float = DEFAULT_TEMPERATURE):
    """InfoNCE-style loss of one query against its candidate keys.

    Returns ``(loss, d_query, d_keys)`` where the gradients are exact.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValidationError("candidate key matrix must be nonempty")
    if not 0 <= positive_index < keys.shape[0]:
        raise ValidationError(f"positive index {positive_index} out of range")

    nq = float(np.linalg.norm(query))
    nk = np.linalg.norm(keys, axis=1)
    if nq < 1e-12 or np.any(nk < 1e-12):
        raise ValidationError("zero-norm vector in contrastive loss")

    cos = (keys @ query) / (nq * nk)
    logits = cos / temperature
    shifted = logits - np.max(logits)
    exp = np.exp(shifted)
    probs = exp / np.sum(exp)
    loss = float(-(shifted[positive_index] - np.log(np.sum(exp))))

    d_cos = probs.copy()
    d_cos[positive_index] -= 1.0
    d_cos /= temperature

    # cosine backward for each row k_i against the shared query
    inv = 1.0 / (nq * nk)
    d_query = (keys * inv[:, None] - np.outer(cos / nq**2, query)).T @ d_cos
    d_keys = d_cos[:, None] * (query[None, :] * inv[:, None]
                               - (cos / nk**2)[:, None] * keys)
    return loss, d_query, d_keys


def action_loss(predicted: np.ndarray, expert: np.ndarray):
    """Squared L2 imitation loss over the full action vector.

    Returns ``(loss, d_predicted)``.
    """
    predicted = np.asarray(predicted, dtype=float)
    expert = np.asarray(expert, dtype=float)
    if predicted.shape != expert.shape:
        raise ValidationError(
            f"action shape mismatch: {predicted.shape} vs {expert.shape}")
    diff = predicted - expert
    return float(np.sum(diff * diff)), 2.0 * diff
