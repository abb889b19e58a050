"""Procedural tabletop benchmark with controlled referential ambiguity.

A dataset is 48 scenes (32 train / 8 val / 8 test) and 2,400 instructions,
exactly half ambiguous. Object counts per scene are drawn from a fixed
multiset (five 3s, ten 4s, twenty-three 5s, ten 6s, shuffled by seed) so the
corpus mean of about 4.79 objects per scene holds for every seed, not just
on average. Attributes are iid uniform over the shared vocabularies.

Ambiguous instructions come from the attribute-dropping rule: start from an
object's full (category, color, size) description and drop attributes until
at least two scene objects match what remains. Unambiguous instructions
name a unique object through one of its minimal distinguishing attribute
subsets. Scenes that admit no ambiguous template, or no uniquely nameable
object, are resampled during generation.

Export is three files with stable field order (scenes.jsonl,
instructions.jsonl, split.json); the dataset digest is a sha256 over their
canonical bytes, so regeneration with the same seed is digest-identical.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import planner, world
from .errors import GenerationError, ValidationError
from .planner import GraspTemplate, Instruction
from .world import Scene, SceneConfig

DATASET_VERSION = "verigrasp-bench-v1"

N_SCENES = 48
SPLIT_SIZES = {"train": 32, "val": 8, "test": 8}
INSTRUCTIONS_PER_SCENE = {"ambiguous": 25, "unambiguous": 25}

# object-count multiset, mean 230/48 = 4.7917
_COUNT_MULTISET = [3] * 5 + [4] * 10 + [5] * 23 + [6] * 10

_SLOT_NAMES = ("category", "color", "size")


@dataclass(frozen=True)
class BenchmarkDataset:
    scenes: tuple[Scene, ...]
    instructions: tuple[Instruction, ...]
    split: dict[str, tuple[int, ...]]  # split name -> scene ids
    seed: int

    def scene_by_id(self, scene_id: int) -> Scene:
        for s in self.scenes:
            if s.rng_seed == scene_id:
                return s
        raise ValidationError(f"unknown scene id {scene_id}")

    def split_of(self, scene_id: int) -> str:
        for name, ids in self.split.items():
            if scene_id in ids:
                return name
        raise ValidationError(f"scene id {scene_id} missing from split map")

    def instructions_for(self, scene_id: int) -> tuple[Instruction, ...]:
        return tuple(i for i in self.instructions if i.scene_id == scene_id)


# ---------- template enumeration over a scene ----------

def _object_template(obj: world.WorldObject, keep: tuple[str, ...]) -> GraspTemplate:
    return GraspTemplate(
        category=obj.category if "category" in keep else None,
        color=obj.color if "color" in keep else None,
        size=obj.size if "size" in keep else None,
    )


def _matching_ids(template: GraspTemplate, scene: Scene) -> tuple[int, ...]:
    out = []
    for obj in scene.objects:
        if template.category is not None and obj.category != template.category:
            continue
        if template.color is not None and obj.color != template.color:
            continue
        if template.size is not None and obj.size != template.size:
            continue
        out.append(obj.obj_id)
    return tuple(out)


def _keep_subsets():
    for r in (3, 2, 1):
        yield from itertools.combinations(_SLOT_NAMES, r)


def ambiguous_templates(scene: Scene) -> list[tuple[GraspTemplate, tuple[int, ...]]]:
    """Distinct templates matching at least two objects, via attribute drops."""
    seen: dict[str, tuple[GraspTemplate, tuple[int, ...]]] = {}
    for obj in scene.objects:
        for keep in _keep_subsets():
            tpl = _object_template(obj, keep)
            ids = _matching_ids(tpl, scene)
            if len(ids) >= 2:
                seen.setdefault(tpl.canonical(), (tpl, ids))
    return [seen[k] for k in sorted(seen)]


def unambiguous_templates(scene: Scene) -> list[tuple[GraspTemplate, int]]:
    """Minimal distinguishing descriptions, one entry per (template, object).

    For each object only the smallest attribute subsets that single it out
    are kept, so "the mug" is preferred over "the red mug" when unique.
    """
    out: dict[str, tuple[GraspTemplate, int]] = {}
    for obj in scene.objects:
        best_len = None
        for keep in sorted(_keep_subsets(), key=len):
            if best_len is not None and len(keep) > best_len:
                break
            tpl = _object_template(obj, keep)
            ids = _matching_ids(tpl, scene)
            if ids == (obj.obj_id,):
                best_len = len(keep)
                out.setdefault(tpl.canonical(), (tpl, obj.obj_id))
    return [out[k] for k in sorted(out)]


def scene_admits_both(scene: Scene) -> bool:
    return bool(ambiguous_templates(scene)) and bool(unambiguous_templates(scene))


# ---------- generation ----------

def _scene_seed(master_seed: int, scene_index: int, attempt: int) -> int:
    state = np.random.SeedSequence([master_seed, scene_index, 2, attempt]).generate_state(1)
    return int(state[0])


def _generate_valid_scene(master_seed: int, scene_index: int, count: int,
                          config: SceneConfig) -> Scene:
    cfg = SceneConfig(
        count_choices=(count,),
        count_weights=None,
        min_separation=config.min_separation,
        placement_margin=config.placement_margin,
        max_attempts=config.max_attempts,
    )
    for attempt in range(200):
        scene = world.generate_scene(_scene_seed(master_seed, scene_index, attempt), cfg)
        if scene_admits_both(scene):
            return scene
    raise GenerationError(
        f"no valid scene found for index {scene_index} (master seed {master_seed})")


def build_dataset(seed: int, config: SceneConfig | None = None) -> BenchmarkDataset:
    """Deterministically build the full benchmark for one master seed."""
    config = config or SceneConfig()
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    counts = [int(c) for c in order_rng.permutation(_COUNT_MULTISET)]

    scenes: list[Scene] = []
    seen_ids: set[int] = set()
    for index in range(N_SCENES):
        scene = _generate_valid_scene(seed, index, counts[index], config)
        if scene.rng_seed in seen_ids:
            raise GenerationError(f"scene seed collision at index {index}")
        seen_ids.add(scene.rng_seed)
        scenes.append(scene)

    instructions: list[Instruction] = []
    for index, scene in enumerate(scenes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index, 3]))
        amb = ambiguous_templates(scene)
        unamb = unambiguous_templates(scene)
        for _ in range(INSTRUCTIONS_PER_SCENE["unambiguous"]):
            tpl, ref = unamb[int(rng.integers(len(unamb)))]
            tokens = planner.realize(tpl, int(rng.integers(len(planner.VERB_PHRASES))))
            instructions.append(Instruction(
                tokens=tokens, scene_id=scene.rng_seed,
                ambiguous=False, referent_ids=(ref,)))
        for _ in range(INSTRUCTIONS_PER_SCENE["ambiguous"]):
            tpl, refs = amb[int(rng.integers(len(amb)))]
            tokens = planner.realize(tpl, int(rng.integers(len(planner.VERB_PHRASES))))
            instructions.append(Instruction(
                tokens=tokens, scene_id=scene.rng_seed,
                ambiguous=True, referent_ids=refs))

    ids = [s.rng_seed for s in scenes]
    split = {
        "train": tuple(ids[:SPLIT_SIZES["train"]]),
        "val": tuple(ids[SPLIT_SIZES["train"]:SPLIT_SIZES["train"] + SPLIT_SIZES["val"]]),
        "test": tuple(ids[SPLIT_SIZES["train"] + SPLIT_SIZES["val"]:]),
    }
    return BenchmarkDataset(
        scenes=tuple(scenes), instructions=tuple(instructions),
        split=split, seed=seed)


# ---------- serialization ----------

def _instruction_to_dict(episode_id: int, ins: Instruction) -> dict:
    return {
        "episode_id": episode_id,
        "scene_id": ins.scene_id,
        "tokens": list(ins.tokens),
        "ambiguous": ins.ambiguous,
        "referent_ids": list(ins.referent_ids),
    }


def _canonical_parts(ds: BenchmarkDataset) -> tuple[str, str, str]:
    scenes_part = "".join(world.scene_to_json(s) + "\n" for s in ds.scenes)
    instr_part = "".join(
        json.dumps(_instruction_to_dict(i, ins), separators=(",", ":")) + "\n"
        for i, ins in enumerate(ds.instructions))
    split_part = json.dumps(
        {"version": DATASET_VERSION, "seed": ds.seed,
         "split": {k: list(v) for k, v in ds.split.items()}},
        separators=(",", ":"), sort_keys=False) + "\n"
    return scenes_part, instr_part, split_part


def dataset_digest(ds: BenchmarkDataset) -> str:
    digest = hashlib.sha256()
    for part in _canonical_parts(ds):
        digest.update(part.encode())
    return digest.hexdigest()


def export_dataset(ds: BenchmarkDataset, out_dir: str | Path) -> dict[str, str]:
    """Write the three dataset files; returns per-file sha256 digests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes_part, instr_part, split_part = _canonical_parts(ds)
    files = {
        "scenes.jsonl": scenes_part,
        "instructions.jsonl": instr_part,
        "split.json": split_part,
    }
    digests = {}
    for name, payload in files.items():
        (out / name).write_text(payload)
        digests[name] = hashlib.sha256(payload.encode()).hexdigest()
    return digests


def import_dataset(in_dir: str | Path) -> BenchmarkDataset:
    """Read a dataset back, validating structure and cross-references."""
    in_dir = Path(in_dir)
    for name in ("scenes.jsonl", "instructions.jsonl", "split.json"):
        if not (in_dir / name).exists():
            raise ValidationError(f"missing dataset file: {in_dir / name}")

    scenes = []
    for line_no, line in enumerate((in_dir / "scenes.jsonl").read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            scenes.append(world.scene_from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"scenes.jsonl:{line_no}: invalid JSON: {exc}") from exc

    scene_ids = {s.rng_seed for s in scenes}
    instructions = []
    for line_no, line in enumerate((in_dir / "instructions.jsonl").read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            ins = Instruction(
                tokens=tuple(raw["tokens"]),
                scene_id=int(raw["scene_id"]),
                ambiguous=bool(raw["ambiguous"]),
                referent_ids=tuple(int(i) for i in raw["referent_ids"]),
            )
        except json.JSONDecodeError as exc:
            raise ValidationError(f"instructions.jsonl:{line_no}: invalid JSON: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"instructions.jsonl:{line_no}: bad record: {exc}") from exc
        if ins.scene_id not in scene_ids:
            raise ValidationError(
                f"instructions.jsonl:{line_no}: unknown scene id {ins.scene_id}")
        instructions.append(ins)

    try:
        meta = json.loads((in_dir / "split.json").read_text())
        split = {k: tuple(int(i) for i in v) for k, v in meta["split"].items()}
        seed = int(meta["seed"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"split.json: malformed: {exc}") from exc

    listed = [i for ids in split.values() for i in ids]
    if sorted(listed) != sorted(scene_ids):
        raise ValidationError("split.json does not partition the scene ids")

    return BenchmarkDataset(
        scenes=tuple(scenes), instructions=tuple(instructions),
        split=split, seed=seed)


def dataset_stats(ds: BenchmarkDataset) -> dict:
    counts = [len(s.objects) for s in ds.scenes]
    n_amb = sum(1 for i in ds.instructions if i.ambiguous)
    per_split = {name: len(ids) for name, ids in ds.split.items()}
    return {
        "n_scenes": len(ds.scenes),
        "n_instructions": len(ds.instructions),
        "n_ambiguous": n_amb,
        "n_unambiguous": len(ds.instructions) - n_amb,
        "mean_objects": float(np.mean(counts)),
        "min_objects": int(min(counts)),
        "max_objects": int(max(counts)),
        "scenes_per_split": per_split,
    }
