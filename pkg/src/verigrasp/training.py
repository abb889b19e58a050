"""Joint training of encoder, attention and policy by SGD with momentum.

Supervision comes from scripted straight-line demonstrations on the train
split. Each sampled episode contributes an imitation term (mean squared
action error over the demo steps) and a contrastive grounding term pairing
the template query with the demonstrated target entity against in-batch
negatives drawn from the same and other scenes. The total per-episode loss
is ``action + weight * contrastive``; the no_contrastive ablation forces
the weight to zero without touching anything else.

All gradients are assembled from the analytic backward passes of the
individual blocks; the finite-difference suite checks the full composition.
Training is bitwise deterministic for a fixed config: same seed, same
checkpoint file, byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention, entities, losses, metrics, pipeline, planner, policy, world
from .benchmark import BenchmarkDataset
from .entities import EntityNode
from .errors import TrainingDivergence, ValidationError
from .pipeline import ABLATIONS, ModelParams
from .planner import GraspTemplate
from .world import Demonstration

CHECKPOINT_VERSION = "verigrasp-ckpt-v1"

_PARAM_ORDER = (
    "encoder.weight",
    "attention.w_query",
    "attention.w_key",
    "attention.w_value",
    "attention.w_query_lang",
    "policy.w1",
    "policy.b1",
    "policy.w2",
    "policy.b2",
)


@dataclass
class TrainConfig:
    seed: int = 0
    ablation: str = "full"
    steps: int = 12000
    batch_size: int = 8
    lr: float = 0.01
    lr_final: float | None = 0.0005  # cosine-decay floor; None keeps lr constant
    momentum: float = 0.9
    contrastive_weight: float = 0.1
    temperature: float = 0.07
    contrastive_candidates: int = 8
    alignment_noise: float = 0.0
    # Imitation fits expert states only, so rollout drift leaves the data
    # manifold and the grip boundary is seen once per episode. Each expert
    # state is duplicated with position jitter and relabelled by the scripted
    # teacher, which covers drift and multiplies grip-boundary examples.
    augment_copies: int = 2
    augment_jitter: float = 0.04
    grad_clip: float | None = 5.0  # global gradient-norm ceiling; None disables

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"unknown ablation {self.ablation!r}")
        if self.contrastive_weight < 0:
            raise ValidationError("contrastive_weight must be nonnegative")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValidationError("steps and batch_size must be positive")
        if self.lr_final is not None and not 0.0 <= self.lr_final <= self.lr:
            raise ValidationError("lr_final must lie in [0, lr]")
        if self.augment_copies < 0 or self.augment_jitter < 0:
            raise ValidationError("augmentation knobs must be nonnegative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive when set")
        if not 0.0 <= self.alignment_noise <= 1.0:
            raise ValidationError("alignment_noise must be a probability")

    @property
    def effective_contrastive_weight(self) -> float:
        return 0.0 if self.ablation == "no_contrastive" else self.contrastive_weight

    def lr_at(self, step: int) -> float:
        """Cosine decay from lr to lr_final; constant when lr_final is None."""
        if self.lr_final is None:
            return self.lr
        frac = step / max(1, self.steps - 1)
        return self.lr_final + (self.lr - self.lr_final) * 0.5 * (1.0 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class LossReport:
    step: int
    action: float
    contrastive: float
    weight: float
    total: float


@dataclass(frozen=True)
class AlignmentPair:
    template: GraspTemplate
    positive_entity_id: int
    scene_id: int
    t_end: int
    corrupted: bool


def generate_alignment_pairs(template: GraspTemplate, demo: Demonstration,
                             entous, noise_rate: float = 0.0,
                             rng: np.random.Generator | None = None) -> list[AlignmentPair]:
    """Derive the weak alignment label from the end of a demonstration.

    The positive is the entity nearest the final gripper position, ties
    broken toward the lowest id. ``entous`` is a sequence of EntityNode or
    bare ``(id, position)`` pairs. With probability ``noise_rate`` the
    positive is swapped for a different entity and flagged as corrupted,
    emulating segmenter mistakes.
    """
    ids, positions = [], []
    for ent in entous:
        if isinstance(ent, EntityNode):
            ids.append(ent.entity_id)
            positions.append(ent.position)
        else:
            i, p = ent
            ids.append(int(i))
            positions.append(np.asarray(p, dtype=float))
    if not ids:
        raise ValidationError("alignment pairing needs at least one entity")
    if noise_rate > 0 and rng is None:
        raise ValidationError("noise_rate > 0 requires an rng")

    end = np.asarray(demo.gripper_path[-1], dtype=float)
    dists = [float(np.linalg.norm(p - end)) for p in positions]
    best = min(range(len(ids)), key=lambda i: (dists[i], ids[i]))
    positive = ids[best]
    corrupted = False
    if noise_rate > 0 and len(ids) > 1 and rng.uniform() < noise_rate:
        others = [i for i in ids if i != positive]
        positive = int(others[int(rng.integers(len(others)))])
        corrupted = True
    scene_id = entous[0].scene_id if isinstance(entous[0], EntityNode) else -1
    return [AlignmentPair(
        template=template, positive_entity_id=positive,
        scene_id=scene_id, t_end=len(demo.actions), corrupted=corrupted)]


# ---------- training episode preparation ----------

@dataclass
class TrainingEpisode:
    scene_id: int
    tokens: tuple[str, ...]
    template: GraspTemplate
    query_input: np.ndarray
    use_lang: bool
    raw_inputs: np.ndarray  # (n, ENTITY_INPUT_DIM), encoder input rows
    positions: np.ndarray  # (n, 3)
    ids: tuple[int, ...]
    class_keys: tuple[str, ...]  # "category/color/size" per entity row
    obs: np.ndarray
    bow: np.ndarray | None
    path: np.ndarray  # (T, 3) gripper positions fed to the policy
    expert: np.ndarray  # (T, 4) expert actions
    positive_row: int
    corrupted: bool
    # Ambiguous instructions still ground (their positives align the query to
    # the whole matching set) but their demonstrations reach one arbitrary
    # match, so their action targets are multimodal given the pooled goal and
    # only add irreducible noise to the imitation term.
    imitate: bool = True


def _augment_states(path: np.ndarray, config: TrainConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Append jittered copies of the expert states; the caller relabels
    every state with the teacher's control field."""
    lo = np.array([b[0] for b in world.TABLE_BOUNDS])
    hi = np.array([b[1] for b in world.TABLE_BOUNDS])
    states = [path]
    for _ in range(config.augment_copies):
        jit = path + rng.normal(0.0, config.augment_jitter, size=path.shape)
        states.append(np.clip(jit, lo, hi))
    return np.concatenate(states, axis=0)


def demo_target(instruction: planner.Instruction, episode_index: int, ds_seed: int) -> int:
    """Which referent the scripted teacher reaches for; ambiguous
    instructions get a dataset-seeded arbitrary choice."""
    if not instruction.ambiguous:
        return instruction.referent_ids[0]
    rng = np.random.default_rng(np.random.SeedSequence([ds_seed, episode_index, 4]))
    return int(instruction.referent_ids[int(rng.integers(len(instruction.referent_ids)))])


def prepare_training_episodes(ds: BenchmarkDataset, config: TrainConfig,
                              split: str = "train") -> list[TrainingEpisode]:
    episodes = []
    split_ids = set(ds.split[split])
    for episode_index, ins in enumerate(ds.instructions):
        if ins.scene_id not in split_ids:
            continue
        scene = ds.scene_by_id(ins.scene_id)
        template = planner.extract_template(ins.tokens)
        target = demo_target(ins, episode_index, ds.seed)
        demo = world.scripted_demonstration(scene, target)
        target_pos = np.asarray(scene.object_by_id(target).position, dtype=float)
        path = np.asarray(demo.gripper_path[:-1], dtype=float)
        if not ins.ambiguous and config.augment_copies > 0:
            path = _augment_states(
                path, config,
                np.random.default_rng(np.random.SeedSequence([ds.seed, episode_index, 6])))
        expert = np.stack([world.expert_control_field(target_pos, s) for s in path])

        pair_rng = np.random.default_rng(np.random.SeedSequence([ds.seed, episode_index, 5]))
        ents = [(o.obj_id, o.position) for o in scene.objects]
        pair = generate_alignment_pairs(
            template, demo, ents, config.alignment_noise, pair_rng)[0]

        ids = tuple(o.obj_id for o in scene.objects)
        raw_inputs, _ = entities.entity_inputs(scene)
        positions = np.stack([np.asarray(o.position, dtype=float) for o in scene.objects])
        q_input, use_lang = pipeline.query_features(ins.tokens, template, config.ablation)
        bow = (planner.bag_of_words(ins.tokens)
               if config.ablation == "language_to_policy" else None)
        episodes.append(TrainingEpisode(
            scene_id=ins.scene_id,
            tokens=ins.tokens,
            template=template,
            query_input=q_input,
            use_lang=use_lang,
            raw_inputs=raw_inputs,
            positions=positions,
            ids=ids,
            class_keys=tuple(f"{o.category}/{o.color}/{o.size}" for o in scene.objects),
            obs=policy.observation_summary(positions),
            bow=bow,
            path=path,
            expert=expert,
            positive_row=ids.index(pair.positive_entity_id),
            corrupted=pair.corrupted,
            imitate=not ins.ambiguous,
        ))
    if not episodes:
        raise ValidationError(f"no training episodes in split {split!r}")
    return episodes


# ---------- gradient assembly ----------

def _zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    grads = {
        "encoder.weight": np.zeros_like(params.encoder.weight),
        "attention.w_query": np.zeros_like(params.attention.w_query),
        "attention.w_key": np.zeros_like(params.attention.w_key),
        "attention.w_value": np.zeros_like(params.attention.w_value),
        "policy.w1": np.zeros_like(params.policy.w1),
        "policy.b1": np.zeros_like(params.policy.b1),
        "policy.w2": np.zeros_like(params.policy.w2),
        "policy.b2": np.zeros_like(params.policy.b2),
    }
    if params.attention.w_query_lang is not None:
        grads["attention.w_query_lang"] = np.zeros_like(params.attention.w_query_lang)
    return grads


@dataclass
class _EpisodeForward:
    episode: TrainingEpisode
    app_cache: dict
    rows: np.ndarray
    mix: np.ndarray | None
    goal_cache: attention.AttentionCache
    d_rows: np.ndarray
    action_loss: float


def batch_losses_and_grads(params: ModelParams, batch: list[TrainingEpisode],
                           config: TrainConfig, rng: np.random.Generator):
    """Forward and backward over one minibatch.

    Returns ``(grads, mean_action_loss, mean_contrastive_loss)`` where the
    gradients already include the 1/B batch averaging and the contrastive
    weight.
    """
    lam = config.effective_contrastive_weight
    inv_b = 1.0 / len(batch)
    n_imitated = sum(1 for ep in batch if ep.imitate)
    inv_i = 1.0 / n_imitated if n_imitated else 0.0
    grads = _zero_grads(params)
    forwards: list[_EpisodeForward] = []
    action_total = 0.0

    for ep in batch:
        app, app_cache = entities.appearance_forward(ep.raw_inputs, params.encoder)
        features = np.concatenate([app, ep.positions], axis=1)
        if config.ablation == "patch_features":
            mix = pipeline.patch_mixing_matrix(ep.scene_id, features.shape[0])
            rows = mix @ features
        else:
            mix, rows = None, features
        goal, att_cache = attention.attend(
            ep.query_input, rows, ep.ids, params.attention, use_lang_query=ep.use_lang)

        if not ep.imitate:
            forwards.append(_EpisodeForward(
                episode=ep, app_cache=app_cache, rows=rows, mix=mix,
                goal_cache=att_cache, d_rows=np.zeros_like(rows),
                action_loss=0.0))
            continue

        t_steps = ep.path.shape[0]
        parts = [np.tile(goal.embedding, (t_steps, 1)),
                 np.tile(ep.obs, (t_steps, 1)), ep.path]
        if ep.bow is not None:
            parts.append(np.tile(ep.bow, (t_steps, 1)))
        x = np.concatenate(parts, axis=1)
        _, pol_cache = policy.policy_forward_batch(x, params.policy)

        # regress the pre-saturation outputs; see policy_backward_batch_raw
        diff = pol_cache.raw - ep.expert
        ep_action_loss = float(np.sum(diff * diff)) / t_steps
        action_total += ep_action_loss
        d_pred = (2.0 / t_steps) * diff * inv_i

        pol_grads = policy.policy_backward_batch_raw(d_pred, pol_cache, params.policy)
        grads["policy.w1"] += pol_grads.d_w1
        grads["policy.b1"] += pol_grads.d_b1
        grads["policy.w2"] += pol_grads.d_w2
        grads["policy.b2"] += pol_grads.d_b2

        d_goal = pol_grads.d_x[:, :attention.ATTENTION_DIM].sum(axis=0)
        att_grads = attention.attention_backward(d_goal, att_cache, params.attention)
        if att_grads.lang_query:
            grads["attention.w_query_lang"] += att_grads.d_w_query
        else:
            grads["attention.w_query"] += att_grads.d_w_query
        grads["attention.w_key"] += att_grads.d_w_key
        grads["attention.w_value"] += att_grads.d_w_value

        forwards.append(_EpisodeForward(
            episode=ep, app_cache=app_cache, rows=rows, mix=mix,
            goal_cache=att_cache, d_rows=att_grads.d_features,
            action_loss=ep_action_loss))

    contrastive_total = 0.0
    if lam > 0.0:
        contrastive_total = _add_contrastive_grads(params, forwards, config, rng,
                                                   grads, lam * inv_b)
    else:
        # still report the (unweighted) contrastive loss for the curves
        contrastive_total = _contrastive_value_only(params, forwards, config, rng)

    for fwd in forwards:
        d_features = fwd.d_rows if fwd.mix is None else fwd.mix.T @ fwd.d_rows
        d_app = d_features[:, :entities.APPEARANCE_DIM]
        grads["encoder.weight"] += entities.appearance_backward(d_app, fwd.app_cache)

    return grads, action_total * inv_i, contrastive_total * inv_b


def _candidate_pool(forwards: list[_EpisodeForward]) -> list[tuple[int, int]]:
    pool = []
    for e_idx, fwd in enumerate(forwards):
        for r_idx in range(fwd.rows.shape[0]):
            pool.append((e_idx, r_idx))
    return pool


def _satisfies(template: GraspTemplate, class_key: str) -> bool:
    return template.admits_class(class_key)


def _draw_candidates(fwd_idx: int, fwd: _EpisodeForward, pool, n_candidates: int,
                     rng: np.random.Generator,
                     forwards: list[_EpisodeForward]) -> list[tuple[int, int]]:
    """Candidate rows for one episode's contrastive term.

    Negatives are rows that do not satisfy the episode's template; any row
    the instruction could refer to is a false negative, and pushing the
    query away from it would penalise exactly the split attention that
    ambiguous instructions are supposed to produce. The same scene's
    non-matching entities come first (those are the distractors attention
    must beat at decision time), then the batch pool fills the rest.
    """
    ep = fwd.episode
    candidates = [(fwd_idx, ep.positive_row)]
    for r_idx, key in enumerate(ep.class_keys):
        if len(candidates) >= n_candidates:
            break
        if not _satisfies(ep.template, key):
            candidates.append((fwd_idx, r_idx))
    attempts = 0
    while len(candidates) < n_candidates and attempts < 200:
        e_idx, r_idx = pool[int(rng.integers(len(pool)))]
        if not _satisfies(ep.template, forwards[e_idx].episode.class_keys[r_idx]):
            candidates.append((e_idx, r_idx))
        attempts += 1
    return candidates


def _add_contrastive_grads(params: ModelParams, forwards, config: TrainConfig,
                           rng: np.random.Generator, grads, scale: float) -> float:
    pool = _candidate_pool(forwards)
    total = 0.0
    for fwd_idx, fwd in enumerate(forwards):
        cands = _draw_candidates(fwd_idx, fwd, pool, config.contrastive_candidates, rng, forwards)
        rows_cand = np.stack([forwards[e].rows[r] for e, r in cands])
        keys = rows_cand @ params.attention.w_key.T
        q = fwd.goal_cache.q
        loss, d_q, d_keys = losses.contrastive_loss(q, keys, 0, config.temperature)
        total += loss

        if fwd.episode.use_lang:
            grads["attention.w_query_lang"] += scale * np.outer(d_q, fwd.episode.query_input)
        else:
            grads["attention.w_query"] += scale * np.outer(d_q, fwd.episode.query_input)
        grads["attention.w_key"] += scale * (d_keys.T @ rows_cand)
        d_rows_cand = d_keys @ params.attention.w_key
        for j, (e, r) in enumerate(cands):
            forwards[e].d_rows[r] += scale * d_rows_cand[j]
    return total


def _contrastive_value_only(params: ModelParams, forwards, config: TrainConfig,
                            rng: np.random.Generator) -> float:
    pool = _candidate_pool(forwards)
    total = 0.0
    for fwd_idx, fwd in enumerate(forwards):
        cands = _draw_candidates(fwd_idx, fwd, pool, config.contrastive_candidates, rng, forwards)
        rows_cand = np.stack([forwards[e].rows[r] for e, r in cands])
        keys = rows_cand @ params.attention.w_key.T
        loss, _, _ = losses.contrastive_loss(fwd.goal_cache.q, keys, 0, config.temperature)
        total += loss
    return total


# ---------- optimizer loop ----------

def train(ds: BenchmarkDataset, config: TrainConfig) -> tuple["Checkpoint", list[LossReport]]:
    """Full training run; returns the checkpoint and per-step loss curves."""
    params = pipeline.init_model(config.seed, config.ablation)
    episodes = prepare_training_episodes(ds, config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7]))
    velocity = {k: np.zeros_like(v) for k, v in _zero_grads(params).items()}
    blocks = param_blocks(params)
    curves: list[LossReport] = []
    lam = config.effective_contrastive_weight

    for step in range(config.steps):
        idx = rng.integers(0, len(episodes), size=config.batch_size)
        batch = [episodes[int(i)] for i in idx]
        grads, act, contrastive = batch_losses_and_grads(params, batch, config, rng)

        total = act + lam * contrastive
        if not np.isfinite(total):
            raise TrainingDivergence(step, {
                "action_loss": act, "contrastive_loss": contrastive,
                "ablation": config.ablation, "seed": config.seed})

        if config.grad_clip is not None:
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if gnorm > config.grad_clip:
                factor = config.grad_clip / gnorm
                for grad in grads.values():
                    grad *= factor

        lr = config.lr_at(step)
        for name, grad in grads.items():
            velocity[name] = config.momentum * velocity[name] + grad
            blocks[name] -= lr * velocity[name]

        curves.append(LossReport(step=step, action=act, contrastive=contrastive,
                                 weight=lam, total=total))

    return Checkpoint(version=CHECKPOINT_VERSION, config=config, params=params), curves


def write_curves(curves: list[LossReport], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        fh.write("step,action_loss,contrastive_loss,total\n")
        for row in curves:
            fh.write(f"{row.step},{row.action!r},{row.contrastive!r},{row.total!r}\n")


# ---------- checkpoints ----------

@dataclass
class Checkpoint:
    version: str
    config: TrainConfig
    params: ModelParams


def param_blocks(params: ModelParams) -> dict[str, np.ndarray]:
    blocks = {
        "encoder.weight": params.encoder.weight,
        "attention.w_query": params.attention.w_query,
        "attention.w_key": params.attention.w_key,
        "attention.w_value": params.attention.w_value,
        "policy.w1": params.policy.w1,
        "policy.b1": params.policy.b1,
        "policy.w2": params.policy.w2,
        "policy.b2": params.policy.b2,
    }
    if params.attention.w_query_lang is not None:
        blocks["attention.w_query_lang"] = params.attention.w_query_lang
    return blocks


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    blocks = param_blocks(ckpt.params)
    payload = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.config_hash(),
        "params": {name: blocks[name].tolist()
                   for name in _PARAM_ORDER if name in blocks},
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"checkpoint version mismatch: {payload.get('version')!r} "
            f"(expected {CHECKPOINT_VERSION})")
    config = TrainConfig.from_dict(payload["config"])
    if payload.get("config_hash") != config.config_hash():
        raise ValidationError("checkpoint config hash does not match its config")

    raw = payload["params"]
    try:
        att = attention.AttentionParams(
            w_query=np.array(raw["attention.w_query"], dtype=float),
            w_key=np.array(raw["attention.w_key"], dtype=float),
            w_value=np.array(raw["attention.w_value"], dtype=float),
            w_query_lang=(np.array(raw["attention.w_query_lang"], dtype=float)
                          if "attention.w_query_lang" in raw else None),
        )
        params = ModelParams(
            encoder=entities.EncoderParams(
                weight=np.array(raw["encoder.weight"], dtype=float)),
            attention=att,
            policy=policy.PolicyParams(
                w1=np.array(raw["policy.w1"], dtype=float),
                b1=np.array(raw["policy.b1"], dtype=float),
                w2=np.array(raw["policy.w2"], dtype=float),
                b2=np.array(raw["policy.b2"], dtype=float),
            ),
        )
    except KeyError as exc:
        raise ValidationError(f"checkpoint missing parameter block {exc}") from exc
    return Checkpoint(version=payload["version"], config=config, params=params)


# ---------- information bound verification ----------

@dataclass(frozen=True)
class BoundPair:
    template_key: str
    class_key: str
    query_index: int
    key_index: int


@dataclass(frozen=True)
class BoundReport:
    n_candidates: int
    n_pairs: int
    mutual_information: float
    mean_loss: float
    loss_stderr: float
    bound_value: float
    epsilon: float
    satisfied: bool


def grounding_pairs(ds: BenchmarkDataset, params: ModelParams, ablation: str,
                    splits: tuple[str, ...] = ("val", "test")):
    """(template, target entity) pairs with embeddings, for the bound check.

    Targets follow the same dataset-seeded choice as the scripted teacher,
    so the empirical joint matches the supervision distribution.
    """
    split_ids = {sid for name in splits for sid in ds.split[name]}
    queries: list[np.ndarray] = []
    keys: list[np.ndarray] = []
    pairs: list[BoundPair] = []
    eset_cache: dict[int, tuple] = {}
    for episode_index, ins in enumerate(ds.instructions):
        if ins.scene_id not in split_ids:
            continue
        if ins.scene_id not in eset_cache:
            scene = ds.scene_by_id(ins.scene_id)
            eset = pipeline.entity_set_for_scene(scene, params)
            rows, _ = pipeline.entity_rows(eset, ablation)
            eset_cache[ins.scene_id] = (scene, eset, rows)
        scene, eset, rows = eset_cache[ins.scene_id]

        template = planner.extract_template(ins.tokens)
        q_input, use_lang = pipeline.query_features(ins.tokens, template, ablation)
        w_q = (params.attention.w_query_lang if use_lang
               else params.attention.w_query)
        target = demo_target(ins, episode_index, ds.seed)
        row_idx = eset.ids().index(target)
        obj = scene.object_by_id(target)

        queries.append(w_q @ q_input)
        keys.append(params.attention.w_key @ rows[row_idx])
        pairs.append(BoundPair(
            template_key=template.canonical(),
            class_key=f"{obj.category}/{obj.color}/{obj.size}",
            query_index=len(queries) - 1,
            key_index=len(keys) - 1,
        ))
    return pairs, np.stack(queries), np.stack(keys)


def verify_infonce_bound(ds: BenchmarkDataset, ckpt: Checkpoint,
                         n_candidates: int, seed: int = 0,
                         repeats: int = 4,
                         splits: tuple[str, ...] = ("val", "test")) -> BoundReport:
    """Monte Carlo check that ln N minus the mean contrastive loss lower
    bounds the plug-in template/class mutual information.

    Negatives are drawn iid from the empirical marginal of target entities
    (with replacement, collisions allowed). ``epsilon`` is two standard
    errors of the loss estimate.
    """
    if n_candidates < 1:
        raise ValidationError("need at least one candidate")
    pairs, queries, keys = grounding_pairs(ds, ckpt.params, ckpt.config.ablation, splits)
    if len(pairs) < n_candidates:
        raise ValidationError(
            f"only {len(pairs)} pairs available for N={n_candidates}")

    qn = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    kn = keys / np.linalg.norm(keys, axis=1, keepdims=True)
    cos = qn @ kn.T  # cosine of every query against every key
    tau = ckpt.config.temperature

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1f]))
    samples = []
    for _ in range(repeats):
        for i, pair in enumerate(pairs):
            neg = rng.integers(0, len(pairs), size=n_candidates - 1)
            cand = np.concatenate([[pair.key_index],
                                   [pairs[int(j)].key_index for j in neg]]).astype(int)
            logits = cos[pair.query_index, cand] / tau
            shifted = logits - logits.max()
            samples.append(float(np.log(np.sum(np.exp(shifted))) - shifted[0]))

    samples = np.asarray(samples)
    mean_loss = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(len(samples)))
    mi = metrics.mutual_information_plugin(
        [p.template_key for p in pairs], [p.class_key for p in pairs])
    bound_value = float(np.log(n_candidates) - mean_loss)
    epsilon = 2.0 * stderr
    return BoundReport(
        n_candidates=n_candidates,
        n_pairs=len(pairs),
        mutual_information=mi,
        mean_loss=mean_loss,
        loss_stderr=stderr,
        bound_value=bound_value,
        epsilon=epsilon,
        satisfied=bound_value <= mi + epsilon,
    )


# ---------- feature-conditioned baseline policies ----------

def train_feature_policy(ds: BenchmarkDataset, feature_kind: str,
                         seed: int = 0, steps: int = 800, batch_size: int = 32,
                         lr: float = 0.03, momentum: float = 0.9) -> policy.PolicyParams:
    """Imitation-only policy conditioned directly on instruction features.

    ``feature_kind`` is "bow" (raw bag-of-words) or "template" (parsed slot
    features). These baselines see no per-entity state, which is the point:
    they quantify how much language can influence actions without the
    grounding stage.
    """
    if feature_kind not in ("bow", "template"):
        raise ValidationError(f"unknown feature kind {feature_kind!r}")

    xs, ys = [], []
    split_ids = set(ds.split["train"])
    for episode_index, ins in enumerate(ds.instructions):
        if ins.scene_id not in split_ids:
            continue
        scene = ds.scene_by_id(ins.scene_id)
        template = planner.extract_template(ins.tokens)
        feat = (planner.bag_of_words(ins.tokens) if feature_kind == "bow"
                else planner.featurize_template(template))
        target = demo_target(ins, episode_index, ds.seed)
        demo = world.scripted_demonstration(scene, target)
        positions = np.stack([np.asarray(o.position, dtype=float) for o in scene.objects])
        obs = policy.observation_summary(positions)
        for t, action in enumerate(demo.actions):
            xs.append(np.concatenate([feat, obs, demo.gripper_path[t]]))
            ys.append(policy.action_to_array(action))

    x_all = np.stack(xs)
    y_all = np.stack(ys)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9]))
    params = policy.init_policy(rng, x_all.shape[1])
    velocity = {k: np.zeros_like(v) for k, v in vars(params).items()}

    for step in range(steps):
        idx = rng.integers(0, x_all.shape[0], size=batch_size)
        xb, yb = x_all[idx], y_all[idx]
        pred, cache = policy.policy_forward_batch(xb, params)
        diff = pred - yb
        loss = float(np.mean(np.sum(diff * diff, axis=1)))
        if not np.isfinite(loss):
            raise TrainingDivergence(step, {"feature_kind": feature_kind, "loss": loss})
        grads = policy.policy_backward_batch((2.0 / batch_size) * diff, cache, params)
        for name, grad in (("w1", grads.d_w1), ("b1", grads.d_b1),
                           ("w2", grads.d_w2), ("b2", grads.d_b2)):
            velocity[name] = momentum * velocity[name] + grad
            block = getattr(params, name)
            block -= lr * velocity[name]

    return params
