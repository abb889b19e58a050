"""Closed-loop episode evaluation and the verification harnesses built on it.

An episode takes one (scene, instruction) pair through the full pipeline:
parse, encode, attend, optionally gate on entropy, then roll the policy
until it attempts a grip or exhausts the step budget. Scoring is strict:
acting on an ambiguous instruction is always a failure, clarifying on an
ambiguous instruction is a success, and an unambiguous episode succeeds
only when the demanded referent is grasped.

Grounding failures (the resolver returning no candidates) trigger a single
deterministic re-parse and then a forced clarify; benchmark labels make
this path unreachable on generated data, but it is kept for malformed
custom scenes.

The episode fan-out honours the VERIGRASP_WORKERS environment variable;
results are merged in episode order so worker count never changes output.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import pipeline, planner, policy, selective, world
from .benchmark import BenchmarkDataset
from .errors import ValidationError
from .logs import EpisodeRecord, StepLog
from .pipeline import ModelParams
from .planner import Instruction
from .selective import SelectivePolicy
from .world import Perturbation, Scene

MAX_EPISODE_STEPS = 40


def run_episode(params: ModelParams, ablation: str, scene: Scene,
                instruction: Instruction, episode_id: int, split: str,
                config_tag: str, gate: SelectivePolicy | None = None,
                perturbation: Perturbation | None = None,
                max_steps: int = MAX_EPISODE_STEPS) -> EpisodeRecord:
    if perturbation is not None:
        scene = world.apply_perturbation(scene, perturbation)
    entity_set = pipeline.entity_set_for_scene(scene, params, perturbation)
    goal, bundle = pipeline.ground(instruction.tokens, entity_set, params, ablation)
    template = bundle["template"]

    candidates = planner.resolve_template(template, entity_set)
    grounding_failed = False
    if not candidates:
        # one deterministic re-invocation of the slow path, then give up
        template = planner.extract_template(instruction.tokens)
        candidates = planner.resolve_template(template, entity_set)
        grounding_failed = not candidates

    clarified = grounding_failed
    if not clarified and gate is not None:
        clarified = selective.decide(gate, goal.entropy) == "clarify"

    steps: list[StepLog] = []
    acted = not clarified
    success = False
    grasped_id = None
    if clarified:
        success = instruction.ambiguous
    else:
        pos = np.asarray(scene.gripper_position, dtype=float)
        outcome = None
        for _ in range(max_steps):
            p_input = pipeline.build_policy_input(
                goal, entity_set, pos, instruction.tokens, ablation)
            action, _ = policy.policy_forward(p_input, params.policy)
            current = dataclasses.replace(scene, gripper_position=tuple(float(v) for v in pos))
            outcome = world.execute_pick(current, action)
            steps.append(StepLog(
                policy_input={k: [float(x) for x in v] for k, v in p_input.blocks().items()},
                delta=action.delta,
                grip=action.grip,
            ))
            pos = np.asarray(outcome.gripper_position, dtype=float)
            if outcome.grip_attempted:
                break
        if outcome is not None and outcome.grip_attempted and outcome.success:
            grasped_id = outcome.grasped_id
            if not instruction.ambiguous:
                success = grasped_id == instruction.referent_ids[0]

    return EpisodeRecord(
        episode_id=episode_id,
        scene_id=scene.rng_seed,
        split=split,
        config_tag=config_tag,
        instruction_tokens=instruction.tokens,
        ambiguous=instruction.ambiguous,
        referent_ids=instruction.referent_ids,
        template=template.canonical(),
        entropy=goal.entropy,
        attention_ids=goal.entity_ids,
        attention_weights=tuple(float(w) for w in goal.weights),
        attention_logits=tuple(float(v) for v in goal.logits),
        top_entity_id=goal.top_entity_id,
        grounding_failed=grounding_failed,
        clarified=clarified,
        acted=acted,
        success=success,
        grasped_id=grasped_id,
        steps=tuple(steps),
    )


def _worklist(ds: BenchmarkDataset, split: str):
    split_ids = set(ds.split[split])
    return [(idx, ds.scene_by_id(ins.scene_id), ins)
            for idx, ins in enumerate(ds.instructions) if ins.scene_id in split_ids]


def _evaluate_chunk(payload):
    params, ablation, split, tag, gate, chunk = payload
    return [run_episode(params, ablation, scene, ins, episode_id, split, tag, gate)
            for episode_id, scene, ins in chunk]


def worker_count() -> int:
    raw = os.environ.get("VERIGRASP_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"VERIGRASP_WORKERS must be an integer, got {raw!r}")
    return max(1, n)


def evaluate_split(params: ModelParams, ablation: str, ds: BenchmarkDataset,
                   split: str, config_tag: str,
                   gate: SelectivePolicy | None = None) -> list[EpisodeRecord]:
    """Run every instruction of a split; deterministic in episode order."""
    work = _worklist(ds, split)
    workers = worker_count()
    if workers == 1 or len(work) < 2 * workers:
        records = _evaluate_chunk((params, ablation, split, config_tag, gate, work))
    else:
        chunks = [work[i::workers] for i in range(workers)]
        payloads = [(params, ablation, split, config_tag, gate, c) for c in chunks]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_evaluate_chunk, payloads))
        records = [rec for part in parts for rec in part]
    return sorted(records, key=lambda r: r.episode_id)


def apply_gate(records: list[EpisodeRecord], gate: SelectivePolicy) -> list[EpisodeRecord]:
    """Replay the clarify-or-act decision over always-act records.

    Equivalent to re-running the episodes with the gate installed, because
    the rollout itself never consults the gate; clarified episodes drop
    their steps and are re-scored (clarify is correct exactly on ambiguous
    instructions).
    """
    out = []
    for r in records:
        if r.clarified:
            out.append(r)
            continue
        if selective.decide(gate, r.entropy) == "clarify":
            out.append(dataclasses.replace(
                r, clarified=True, acted=False, success=r.ambiguous,
                grasped_id=None, steps=()))
        else:
            out.append(r)
    return out


# ---------- bottleneck replay ----------

def replay_step_actions(record: EpisodeRecord, params: ModelParams) -> list[np.ndarray]:
    """Recompute each logged step's action from its logged input blocks.

    The instruction plays no part here unless the log contains an
    instruction-derived input block, which is exactly what the bottleneck
    claim forbids (and what the language_to_policy ablation introduces).
    """
    actions = []
    for step in record.steps:
        p_input = policy.PolicyInput(
            goal=np.asarray(step.policy_input["goal"], dtype=float),
            obs=np.asarray(step.policy_input["obs"], dtype=float),
            gripper=np.asarray(step.policy_input["gripper"], dtype=float),
            instruction_bow=(np.asarray(step.policy_input["instruction_bow"], dtype=float)
                             if "instruction_bow" in step.policy_input else None),
        )
        action, _ = policy.policy_forward(p_input, params.policy)
        actions.append(policy.action_to_array(action))
    return actions


def shuffled_instruction_replay(records: list[EpisodeRecord], params: ModelParams,
                                seed: int = 0) -> dict:
    """Pair each acted episode with another episode's instruction and check
    the replayed actions are bitwise identical to the logged ones."""
    acted = [r for r in records if r.acted and r.steps]
    if len(acted) < 2:
        raise ValidationError("need at least two acted episodes to shuffle")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x31]))
    perm = rng.permutation(len(acted))
    # derangement-ish: make sure nobody keeps their own instruction
    for i in range(len(acted)):
        if perm[i] == i:
            j = (i + 1) % len(acted)
            perm[i], perm[j] = perm[j], perm[i]

    identical = 0
    for i, record in enumerate(acted):
        foreign = acted[int(perm[i])].instruction_tokens
        assert foreign is not None  # the swap is metadata-only by construction
        replayed = replay_step_actions(record, params)
        logged = [np.array([*s.delta, s.grip], dtype=float) for s in record.steps]
        if all(np.array_equal(a, b) for a, b in zip(replayed, logged)):
            identical += 1
    return {"n_episodes": len(acted), "n_identical": identical,
            "all_identical": identical == len(acted)}


# ---------- robustness sweep ----------

def first_action(params: ModelParams, ablation: str, scene: Scene,
                 instruction: Instruction,
                 perturbation: Perturbation | None = None) -> np.ndarray:
    if perturbation is not None:
        scene = world.apply_perturbation(scene, perturbation)
    entity_set = pipeline.entity_set_for_scene(scene, params, perturbation)
    goal, _ = pipeline.ground(instruction.tokens, entity_set, params, ablation)
    p_input = pipeline.build_policy_input(
        goal, entity_set, np.asarray(scene.gripper_position, dtype=float),
        instruction.tokens, ablation)
    action, _ = policy.policy_forward(p_input, params.policy)
    return policy.action_to_array(action)


def robustness_sweep(params: ModelParams, ablation: str, ds: BenchmarkDataset,
                     split: str = "test",
                     kinds: tuple[str, ...] = ("viewpoint", "layout", "feature_noise"),
                     magnitudes: tuple[float, ...] = (0.01, 0.025, 0.05, 0.075, 0.1),
                     perturbation_seed: int = 11) -> dict:
    """Mean first-action displacement against perturbation magnitude.

    Reports a linear fit (slope, intercept, R^2) per kind and verifies the
    zero-magnitude perturbation changes nothing bit for bit.
    """
    work = _worklist(ds, split)
    clean = {eid: first_action(params, ablation, scene, ins)
             for eid, scene, ins in work}

    out = {}
    for kind in kinds:
        zero = Perturbation(kind=kind, magnitude=0.0, seed=perturbation_seed)
        exact_at_zero = all(
            np.array_equal(first_action(params, ablation, scene, ins, zero), clean[eid])
            for eid, scene, ins in work)

        displacements = []
        for magnitude in magnitudes:
            p = Perturbation(kind=kind, magnitude=magnitude, seed=perturbation_seed)
            shifts = [np.linalg.norm(
                first_action(params, ablation, scene, ins, p) - clean[eid])
                for eid, scene, ins in work]
            displacements.append(float(np.mean(shifts)))

        slope, intercept = np.polyfit(magnitudes, displacements, 1)
        predicted = slope * np.asarray(magnitudes) + intercept
        residual = np.asarray(displacements) - predicted
        ss_tot = float(np.sum((displacements - np.mean(displacements)) ** 2))
        r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(residual**2)) / ss_tot
        out[kind] = {
            "magnitudes": list(magnitudes),
            "mean_displacement": displacements,
            "slope": float(slope),
            "intercept": float(intercept),
            "r_squared": r2,
            "exact_at_zero": exact_at_zero,
        }
    return out


# ---------- language-influence trace collection ----------

def goal_conditioned_samples(params: ModelParams, ablation: str,
                             ds: BenchmarkDataset, split: str):
    """(context, instruction, first action, goal key) per split episode.

    The goal key is the rounded goal embedding as a hashable tuple; on a
    finite grid the action is a deterministic function of (goal, context),
    which is what the decomposition identity requires.
    """
    samples = []
    for _, scene, ins in _worklist(ds, split):
        entity_set = pipeline.entity_set_for_scene(scene, params)
        goal, _ = pipeline.ground(ins.tokens, entity_set, params, ablation)
        p_input = pipeline.build_policy_input(
            goal, entity_set, np.asarray(scene.gripper_position, dtype=float),
            ins.tokens, ablation)
        action, _ = policy.policy_forward(p_input, params.policy)
        goal_key = tuple(np.round(goal.embedding, 12))
        samples.append((scene.rng_seed, ins.text, np.asarray(action.delta), goal_key))
    return samples


def feature_conditioned_samples(pol_params: policy.PolicyParams, feature_kind: str,
                                ds: BenchmarkDataset, split: str):
    """First actions of a policy fed raw instruction features instead of a
    grounded goal; used for the three-way language-influence comparison."""
    samples = []
    for _, scene, ins in _worklist(ds, split):
        template = planner.extract_template(ins.tokens)
        feat = (planner.bag_of_words(ins.tokens) if feature_kind == "bow"
                else planner.featurize_template(template))
        positions = np.stack([np.asarray(o.position, dtype=float) for o in scene.objects])
        x = np.concatenate([feat, policy.observation_summary(positions),
                            np.asarray(scene.gripper_position, dtype=float)])
        actions, _ = policy.policy_forward_batch(x[None, :], pol_params)
        samples.append((scene.rng_seed, ins.text, actions[0, :3]))
    return samples


def _nearest_object_id(scene: Scene, pos: np.ndarray) -> int:
    """Object whose centre is closest to ``pos``; ties break to lowest id."""
    return min(
        scene.objects,
        key=lambda o: (float(np.linalg.norm(np.asarray(o.position, dtype=float) - pos)),
                       o.obj_id),
    ).obj_id


def _roll_to_endpoint(step_fn, start: np.ndarray,
                      max_steps: int = MAX_EPISODE_STEPS) -> np.ndarray:
    """Iterate clamped policy steps until a grip fires or the budget runs
    out; returns the final gripper position (execution-order: move, then
    grip at the new pose)."""
    lo = np.array([b[0] for b in world.TABLE_BOUNDS])
    hi = np.array([b[1] for b in world.TABLE_BOUNDS])
    pos = np.asarray(start, dtype=float)
    for _ in range(max_steps):
        delta, grip = step_fn(pos)
        pos = np.clip(pos + world.clamp_step(np.asarray(delta, dtype=float)), lo, hi)
        if grip >= 0.5:
            break
    return pos


def goal_endpoint_samples(params: ModelParams, ablation: str,
                          ds: BenchmarkDataset, split: str):
    """(context, instruction, nearest-entity label of the rollout endpoint).

    The endpoint label is the action abstraction used by the language-
    influence comparison: it keeps the instruction-driven choice of target
    while discarding step-level variation, which displacement bins would
    otherwise count as influence even when it carries no intent (a policy
    emitting arbitrary instruction-dependent wiggles would look maximally
    language-driven under a first-step binning).
    """
    samples = []
    for _, scene, ins in _worklist(ds, split):
        entity_set = pipeline.entity_set_for_scene(scene, params)
        goal, _ = pipeline.ground(ins.tokens, entity_set, params, ablation)

        def step_fn(pos, _goal=goal, _es=entity_set, _tokens=ins.tokens):
            p_input = pipeline.build_policy_input(_goal, _es, pos, _tokens, ablation)
            action, _ = policy.policy_forward(p_input, params.policy)
            return np.asarray(action.delta, dtype=float), action.grip

        end = _roll_to_endpoint(step_fn, np.asarray(scene.gripper_position, dtype=float))
        samples.append((scene.rng_seed, ins.text, _nearest_object_id(scene, end)))
    return samples


def feature_endpoint_samples(pol_params: policy.PolicyParams, feature_kind: str,
                             ds: BenchmarkDataset, split: str):
    """Feature-conditioned twin of goal_endpoint_samples."""
    samples = []
    for _, scene, ins in _worklist(ds, split):
        template = planner.extract_template(ins.tokens)
        feat = (planner.bag_of_words(ins.tokens) if feature_kind == "bow"
                else planner.featurize_template(template))
        positions = np.stack([np.asarray(o.position, dtype=float) for o in scene.objects])
        obs = policy.observation_summary(positions)

        def step_fn(pos, _feat=feat, _obs=obs):
            x = np.concatenate([_feat, _obs, pos])
            actions, _ = policy.policy_forward_batch(x[None, :], pol_params)
            return actions[0, :3], float(actions[0, 3])

        end = _roll_to_endpoint(step_fn, np.asarray(scene.gripper_position, dtype=float))
        samples.append((scene.rng_seed, ins.text, _nearest_object_id(scene, end)))
    return samples
