"""Model bundle and the forward plumbing shared by training and evaluation.

The full pipeline runs: parse instruction -> encode entities -> cross-attend
-> (optionally gate on entropy) -> act. Ablations rewire exactly one stage:

  full               the intact pipeline
  no_contrastive     identical wiring, contrastive loss weight forced to 0
  direct_query       skips the planner; bag-of-words instruction features
                     feed a dedicated language query map
  patch_features     replaces entity rows with noise-mixed patch rows,
                     destroying per-entity structure before attention
  language_to_policy bag-of-words features are appended to the policy
                     input, deliberately breaking the bottleneck

Everything here is pure: ablation plus parameters plus inputs determine the
outputs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention, entities, planner, policy
from .attention import AttentionParams, GroundedGoal
from .entities import EncoderParams, EntitySet
from .errors import ValidationError
from .planner import GraspTemplate
from .policy import PolicyParams
from .world import Scene, Perturbation

ABLATIONS = ("full", "no_contrastive", "direct_query", "patch_features",
             "language_to_policy")

POLICY_BASE_DIM = attention.ATTENTION_DIM + policy.OBS_DIM + 3


@dataclass
class ModelParams:
    encoder: EncoderParams
    attention: AttentionParams
    policy: PolicyParams


def policy_input_dim(ablation: str) -> int:
    if ablation == "language_to_policy":
        return POLICY_BASE_DIM + len(planner.TOKEN_VOCAB)
    return POLICY_BASE_DIM


def init_model(seed: int, ablation: str) -> ModelParams:
    if ablation not in ABLATIONS:
        raise ValidationError(f"unknown ablation {ablation!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11]))
    enc = entities.init_encoder(rng)
    att = attention.init_attention(rng, with_lang_query=(ablation == "direct_query"))
    pol = policy.init_policy(rng, policy_input_dim(ablation))
    return ModelParams(encoder=enc, attention=att, policy=pol)


def query_features(tokens: tuple[str, ...], template: GraspTemplate,
                   ablation: str) -> tuple[np.ndarray, bool]:
    """Query input vector and whether it uses the language query map."""
    if ablation == "direct_query":
        return planner.bag_of_words(tokens), True
    return planner.featurize_template(template), False


def patch_mixing_matrix(scene_id: int, n: int) -> np.ndarray:
    """Fixed row-stochastic mixer for the patch_features ablation."""
    rng = np.random.default_rng(np.random.SeedSequence([scene_id & 0x7FFFFFFF, 0x5D]))
    m = rng.uniform(0.2, 1.0, size=(n, n))
    return m / m.sum(axis=1, keepdims=True)


def entity_rows(entity_set: EntitySet, ablation: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Attention input rows, plus the mixing matrix if one was applied."""
    features = entity_set.features
    if ablation == "patch_features":
        mix = patch_mixing_matrix(entity_set.scene_id, features.shape[0])
        return mix @ features, mix
    return features, None


def ground(tokens: tuple[str, ...], entity_set: EntitySet, params: ModelParams,
           ablation: str) -> tuple[GroundedGoal, dict]:
    """Run parse, query embedding and attention for one instruction.

    Returns the grounded goal plus a cache bundle used by the trainer for
    the backward pass.
    """
    template = planner.extract_template(tokens)
    q_input, use_lang = query_features(tokens, template, ablation)
    rows, mix = entity_rows(entity_set, ablation)
    goal, att_cache = attention.attend(
        q_input, rows, entity_set.ids(), params.attention, use_lang_query=use_lang)
    return goal, {
        "template": template,
        "query_input": q_input,
        "use_lang": use_lang,
        "rows": rows,
        "mix": mix,
        "attention": att_cache,
    }


def entity_set_for_scene(scene: Scene, params: ModelParams,
                         perturbation: Perturbation | None = None,
                         visible_ids: tuple[int, ...] | None = None) -> EntitySet:
    """Single-frame entity set: encode the scene, no memory involvement."""
    graph = entities.encode_entities(scene, params.encoder, perturbation,
                                     step=0, visible_ids=visible_ids)
    return entities.assemble_entity_set(graph, entities.EntityMemory())


def build_policy_input(goal: GroundedGoal, entity_set: EntitySet,
                       gripper: np.ndarray, tokens: tuple[str, ...],
                       ablation: str) -> policy.PolicyInput:
    obs = policy.observation_summary(entity_set.positions)
    bow = planner.bag_of_words(tokens) if ablation == "language_to_policy" else None
    return policy.PolicyInput(
        goal=goal.embedding, obs=obs,
        gripper=np.asarray(gripper, dtype=float),
        instruction_bow=bow)
