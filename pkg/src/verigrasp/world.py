"""Tabletop world: scenes, perturbations, pick primitives, scripted reaches.

Everything is desk-scale and fully deterministic given a seed. Objects sit on
a unit table (z = 0), the gripper floats above it, and a pick succeeds when a
grip is closed within the grasp radius of exactly one object.

Distance conventions used throughout:
  - table bounds: [0, 1] x [0, 1] x [0, 0.3]
  - grasp radius: 0.03
  - minimum object separation at generation time: 0.08
  - maximum per-step gripper displacement: 0.1

Perturbations form a small transform group. ``magnitude`` is the group
distance from the identity: radians for viewpoint rotation, metres of maximal
displacement for layout jitter, and the feature-channel amplitude for the two
appearance-only kinds (which leave positions untouched and are consumed by
the entity encoder instead).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, ValidationError

CATEGORIES = ("block", "mug", "bottle", "fruit")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")

TABLE_BOUNDS = ((0.0, 1.0), (0.0, 1.0), (0.0, 0.3))
GRASP_RADIUS = 0.03
MIN_SEPARATION = 0.08
MAX_STEP = 0.1

PERTURBATION_KINDS = ("viewpoint", "lighting", "layout", "feature_noise")

# kinds that move positions; the other two only touch appearance channels
_GEOMETRIC_KINDS = ("viewpoint", "layout")


@dataclass(frozen=True)
class WorldObject:
    """One rigid object resting on the table."""

    obj_id: int
    category: str
    color: str
    size: str
    position: tuple[float, float, float]

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValidationError(f"unknown category {self.category!r}")
        if self.color not in COLORS:
            raise ValidationError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise ValidationError(f"unknown size {self.size!r}")


@dataclass(frozen=True)
class Scene:
    """A static tabletop arrangement plus the gripper start pose.

    ``rng_seed`` doubles as the scene identity inside a generated corpus.
    ``clamped_ids`` records objects that had to be clamped back onto the
    table by a perturbation; it is empty for freshly generated scenes.
    """

    objects: tuple[WorldObject, ...]
    gripper_position: tuple[float, float, float]
    rng_seed: int
    clamped_ids: tuple[int, ...] = ()

    def object_by_id(self, obj_id: int) -> WorldObject:
        for obj in self.objects:
            if obj.obj_id == obj_id:
                return obj
        raise ValidationError(f"object {obj_id} not in scene {self.rng_seed}")


@dataclass(frozen=True)
class Perturbation:
    """A member of the scene transform group.

    ``magnitude`` is nonnegative; for viewpoint rotations the direction of
    rotation is carried by ``sign`` so that an inverse (same magnitude,
    opposite sign) exists without breaking the nonnegativity invariant.
    ``seed`` decorrelates the random draws of layout jitter and the
    appearance noise channels between otherwise identical perturbations.
    """

    kind: str
    magnitude: float
    seed: int = 0
    sign: int = 1

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValidationError(f"unknown perturbation kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValidationError("perturbation magnitude must be nonnegative")
        if self.sign not in (-1, 1):
            raise ValidationError("perturbation sign must be -1 or +1")

    def inverse(self) -> "Perturbation":
        return dataclasses.replace(self, sign=-self.sign)


@dataclass(frozen=True)
class ActionVector:
    """One low-level command: a displacement plus a grip channel in [0, 1]."""

    delta: tuple[float, float, float]
    grip: float


@dataclass(frozen=True)
class StepOutcome:
    gripper_position: tuple[float, float, float]
    grip_attempted: bool
    grasped_id: int | None
    success: bool
    ambiguous_grasp: bool


@dataclass(frozen=True)
class Demonstration:
    """A scripted straight-line reach ending in a grip."""

    target_id: int
    actions: tuple[ActionVector, ...]
    gripper_path: tuple[tuple[float, float, float], ...]
    success: bool


@dataclass(frozen=True)
class SceneConfig:
    """Flat, typed knobs for scene generation."""

    count_choices: tuple[int, ...] = (3, 4, 5, 6)
    count_weights: tuple[float, ...] | None = None
    min_separation: float = MIN_SEPARATION
    placement_margin: float = 0.05
    max_attempts: int = 50

    def to_dict(self) -> dict:
        return {
            "count_choices": list(self.count_choices),
            "count_weights": None if self.count_weights is None else list(self.count_weights),
            "min_separation": self.min_separation,
            "placement_margin": self.placement_margin,
            "max_attempts": self.max_attempts,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown scene config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        if "count_choices" in kwargs:
            kwargs["count_choices"] = tuple(int(c) for c in kwargs["count_choices"])
        if kwargs.get("count_weights") is not None:
            kwargs["count_weights"] = tuple(float(w) for w in kwargs["count_weights"])
        return cls(**kwargs)


# ---------- helpers ----------

def _as_vec(p) -> np.ndarray:
    return np.asarray(p, dtype=float)


def clamp_step(delta: np.ndarray, max_step: float = MAX_STEP) -> np.ndarray:
    """Scale ``delta`` down to ``max_step`` if its norm exceeds it."""
    d = float(np.linalg.norm(delta))
    if d <= max_step:
        return np.asarray(delta, dtype=float)
    return np.asarray(delta, dtype=float) * (max_step / d)


def _clamp_to_bounds(pos: np.ndarray) -> tuple[np.ndarray, bool]:
    lo = np.array([b[0] for b in TABLE_BOUNDS])
    hi = np.array([b[1] for b in TABLE_BOUNDS])
    clipped = np.clip(pos, lo, hi)
    return clipped, bool(np.any(clipped != pos))


def in_bounds(pos) -> bool:
    p = _as_vec(pos)
    return all(b[0] <= v <= b[1] for v, b in zip(p, TABLE_BOUNDS))


# ---------- generation ----------

def generate_scene(seed: int, config: SceneConfig | None = None) -> Scene:
    """Sample a scene: object count, attributes, positions, gripper pose.

    Positions are rejection-sampled to respect the pairwise separation
    minimum. Attributes are iid uniform over their vocabularies. The whole
    draw is a pure function of ``seed`` and ``config``.
    """
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    for _ in range(config.max_attempts):
        count = int(rng.choice(config.count_choices, p=config.count_weights))
        positions = _place_objects(rng, count, config)
        if positions is None:
            continue
        objects = []
        for i, pos in enumerate(positions):
            objects.append(WorldObject(
                obj_id=i,
                category=str(rng.choice(CATEGORIES)),
                color=str(rng.choice(COLORS)),
                size=str(rng.choice(SIZES)),
                position=(float(pos[0]), float(pos[1]), 0.0),
            ))
        gx, gy = rng.uniform(0.2, 0.8, size=2)
        gz = rng.uniform(0.10, 0.20)
        return Scene(
            objects=tuple(objects),
            gripper_position=(float(gx), float(gy), float(gz)),
            rng_seed=int(seed),
        )
    raise GenerationError(
        f"could not place objects after {config.max_attempts} scene attempts (seed {seed})")


def _place_objects(rng: np.random.Generator, count: int, config: SceneConfig):
    lo = config.placement_margin
    hi = 1.0 - config.placement_margin
    placed: list[np.ndarray] = []
    for _ in range(count):
        ok = False
        for _ in range(100):
            cand = rng.uniform(lo, hi, size=2)
            if all(np.linalg.norm(cand - p) >= config.min_separation for p in placed):
                placed.append(cand)
                ok = True
                break
        if not ok:
            return None
    return placed


# ---------- perturbations ----------

def apply_perturbation(scene: Scene, perturbation: Perturbation) -> Scene:
    """Apply one group element to a scene.

    Appearance-only kinds (lighting, feature_noise) return the scene
    unchanged; their magnitude is consumed later by the entity encoder.
    A zero magnitude is an exact identity for every kind.
    """
    if perturbation.magnitude == 0.0:
        return scene
    if perturbation.kind not in _GEOMETRIC_KINDS:
        return scene

    if perturbation.kind == "viewpoint":
        return _rotate_scene(scene, perturbation.sign * perturbation.magnitude)
    return _jitter_layout(scene, perturbation)


def _rotate_scene(scene: Scene, angle: float) -> Scene:
    """Rigidly rotate every position about the table centre (z axis)."""
    centre = np.array([0.5, 0.5, 0.0])
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    clamped: list[int] = []
    new_objects = []
    for obj in scene.objects:
        p = rot @ (_as_vec(obj.position) - centre) + centre
        p, was_clamped = _clamp_to_bounds(p)
        if was_clamped:
            clamped.append(obj.obj_id)
        new_objects.append(dataclasses.replace(obj, position=tuple(float(v) for v in p)))

    g = rot @ (_as_vec(scene.gripper_position) - centre) + centre
    g, _ = _clamp_to_bounds(g)
    return dataclasses.replace(
        scene,
        objects=tuple(new_objects),
        gripper_position=tuple(float(v) for v in g),
        clamped_ids=tuple(clamped),
    )


def _jitter_layout(scene: Scene, perturbation: Perturbation) -> Scene:
    """Displace each object in the table plane by at most ``magnitude``."""
    rng = np.random.default_rng(
        np.random.SeedSequence([scene.rng_seed, perturbation.seed, 0x1a]))
    clamped: list[int] = []
    new_objects = []
    for obj in scene.objects:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        radius = perturbation.magnitude * np.sqrt(rng.uniform())
        offset = np.array([radius * np.cos(theta), radius * np.sin(theta), 0.0])
        p, was_clamped = _clamp_to_bounds(_as_vec(obj.position) + offset)
        if was_clamped:
            clamped.append(obj.obj_id)
        new_objects.append(dataclasses.replace(obj, position=tuple(float(v) for v in p)))
    return dataclasses.replace(scene, objects=tuple(new_objects), clamped_ids=tuple(clamped))


def appearance_noise(scene: Scene, perturbation: Perturbation | None, n_objects: int) -> np.ndarray:
    """Per-object appearance noise channel induced by a perturbation.

    Lighting is a single global shift shared by every object; feature noise
    is drawn independently per object. Both scale linearly with magnitude,
    and geometric perturbations contribute nothing here.
    """
    if perturbation is None or perturbation.kind in _GEOMETRIC_KINDS:
        return np.zeros(n_objects)
    rng = np.random.default_rng(
        np.random.SeedSequence([scene.rng_seed, perturbation.seed, 0x2b]))
    if perturbation.kind == "lighting":
        shift = rng.uniform(-1.0, 1.0)
        return np.full(n_objects, perturbation.magnitude * shift)
    return perturbation.magnitude * rng.uniform(-1.0, 1.0, size=n_objects)


# ---------- pick primitive ----------

def execute_pick(scene: Scene, action: ActionVector) -> StepOutcome:
    """Advance the gripper by one action and resolve a grip if requested.

    The displacement is clamped to the per-step maximum and the gripper is
    kept inside the table bounds. A grip succeeds when exactly one object
    lies within the grasp radius; two or more is an ambiguous grasp and
    counts as failure.
    """
    delta = clamp_step(_as_vec(action.delta))
    new_pos, _ = _clamp_to_bounds(_as_vec(scene.gripper_position) + delta)
    grip = action.grip >= 0.5

    grasped_id = None
    success = False
    ambiguous = False
    if grip:
        near = [o.obj_id for o in scene.objects
                if np.linalg.norm(_as_vec(o.position) - new_pos) <= GRASP_RADIUS]
        if len(near) == 1:
            grasped_id = near[0]
            success = True
        elif len(near) > 1:
            ambiguous = True

    return StepOutcome(
        gripper_position=tuple(float(v) for v in new_pos),
        grip_attempted=grip,
        grasped_id=grasped_id,
        success=success,
        ambiguous_grasp=ambiguous,
    )


# Proportional gain of the scripted teacher. The raw control field
# EXPERT_GAIN * (target - pos) is globally linear in the state, which is
# what makes it learnable to high precision; execution clamps it to the
# per-step maximum, which reproduces full steps far out and geometric
# convergence near the target (the gripping step lands within
# (1 - EXPERT_GAIN) * MAX_STEP of the target, inside the grasp radius).
EXPERT_GAIN = 0.9


def expert_control_field(target, pos) -> np.ndarray:
    """The teacher's pre-clamp regression target at an arbitrary state:
    proportional displacement plus a grip proximity ramp.

    The ramp hits 0.5 exactly at one step out, so thresholding reproduces
    the grab-when-reachable rule while giving imitation a Lipschitz target
    instead of a step function."""
    remaining = _as_vec(target) - _as_vec(pos)
    dist = float(np.linalg.norm(remaining))
    grip = float(np.clip(1.0 - dist / (2.0 * MAX_STEP), 0.0, 1.0))
    return np.array([*(EXPERT_GAIN * remaining), grip], dtype=float)


def expert_action_at(target, pos) -> ActionVector:
    """The executed teacher action: the control field with the displacement
    clamped to the per-step maximum, exactly as the policy's own output is."""
    field = expert_control_field(target, pos)
    delta = clamp_step(field[:3])
    return ActionVector(tuple(float(v) for v in delta), float(field[3]))


def scripted_demonstration(scene: Scene, target_id: int, max_steps: int = 40) -> Demonstration:
    """Straight-line expert reach toward ``target_id`` ending in a grip.

    Raises if the target does not exist or the step budget runs out (which
    cannot happen on a bounded table with the default budget).
    """
    target = _as_vec(scene.object_by_id(target_id).position)
    pos = _as_vec(scene.gripper_position)
    actions: list[ActionVector] = []
    path = [tuple(float(v) for v in pos)]

    for _ in range(max_steps):
        action = expert_action_at(target, pos)
        actions.append(action)
        pos = pos + _as_vec(action.delta)
        path.append(tuple(float(v) for v in pos))
        if action.grip >= 0.5:
            return Demonstration(
                target_id=target_id,
                actions=tuple(actions),
                gripper_path=tuple(path),
                success=True,
            )

    raise GenerationError(
        f"target {target_id} unreachable within {max_steps} steps in scene {scene.rng_seed}")


# ---------- serialization ----------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "rng_seed": scene.rng_seed,
        "gripper_position": list(scene.gripper_position),
        "clamped_ids": list(scene.clamped_ids),
        "objects": [
            {
                "obj_id": o.obj_id,
                "category": o.category,
                "color": o.color,
                "size": o.size,
                "position": list(o.position),
            }
            for o in scene.objects
        ],
    }


def scene_from_dict(raw: dict) -> Scene:
    try:
        objects = tuple(
            WorldObject(
                obj_id=int(o["obj_id"]),
                category=o["category"],
                color=o["color"],
                size=o["size"],
                position=tuple(float(v) for v in o["position"]),
            )
            for o in raw["objects"]
        )
        return Scene(
            objects=objects,
            gripper_position=tuple(float(v) for v in raw["gripper_position"]),
            rng_seed=int(raw["rng_seed"]),
            clamped_ids=tuple(int(i) for i in raw.get("clamped_ids", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed scene record: {exc}") from exc


def scene_to_json(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))
