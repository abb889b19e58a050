"""Episode records and their JSONL serialization.

One record per evaluated (scene, instruction) episode, carrying everything
the metrics and audits need downstream: the attention distribution and its
entropy, the clarify/act decision, the rollout outcome, and the named
policy input blocks of every step. Records round-trip through JSONL with a
fixed field order so file digests are stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError


@dataclass(frozen=True)
class StepLog:
    policy_input: dict[str, list[float]]
    delta: tuple[float, float, float]
    grip: float


@dataclass(frozen=True)
class EpisodeRecord:
    episode_id: int
    scene_id: int
    split: str
    config_tag: str
    instruction_tokens: tuple[str, ...]
    ambiguous: bool
    referent_ids: tuple[int, ...]
    template: str
    entropy: float
    attention_ids: tuple[int, ...]
    attention_weights: tuple[float, ...]
    attention_logits: tuple[float, ...]
    top_entity_id: int
    grounding_failed: bool
    clarified: bool
    acted: bool
    success: bool
    grasped_id: int | None
    steps: tuple[StepLog, ...] = ()


def record_to_dict(rec: EpisodeRecord) -> dict:
    return {
        "episode_id": rec.episode_id,
        "scene_id": rec.scene_id,
        "split": rec.split,
        "config_tag": rec.config_tag,
        "instruction_tokens": list(rec.instruction_tokens),
        "ambiguous": rec.ambiguous,
        "referent_ids": list(rec.referent_ids),
        "template": rec.template,
        "entropy": rec.entropy,
        "attention_ids": list(rec.attention_ids),
        "attention_weights": list(rec.attention_weights),
        "attention_logits": list(rec.attention_logits),
        "top_entity_id": rec.top_entity_id,
        "grounding_failed": rec.grounding_failed,
        "clarified": rec.clarified,
        "acted": rec.acted,
        "success": rec.success,
        "grasped_id": rec.grasped_id,
        "steps": [
            {"policy_input": s.policy_input, "delta": list(s.delta), "grip": s.grip}
            for s in rec.steps
        ],
    }


def record_from_dict(raw: dict) -> EpisodeRecord:
    try:
        steps = tuple(
            StepLog(
                policy_input={k: list(v) for k, v in s["policy_input"].items()},
                delta=tuple(float(v) for v in s["delta"]),
                grip=float(s["grip"]),
            )
            for s in raw["steps"]
        )
        return EpisodeRecord(
            episode_id=int(raw["episode_id"]),
            scene_id=int(raw["scene_id"]),
            split=raw["split"],
            config_tag=raw["config_tag"],
            instruction_tokens=tuple(raw["instruction_tokens"]),
            ambiguous=bool(raw["ambiguous"]),
            referent_ids=tuple(int(i) for i in raw["referent_ids"]),
            template=raw["template"],
            entropy=float(raw["entropy"]),
            attention_ids=tuple(int(i) for i in raw["attention_ids"]),
            attention_weights=tuple(float(v) for v in raw["attention_weights"]),
            attention_logits=tuple(float(v) for v in raw["attention_logits"]),
            top_entity_id=int(raw["top_entity_id"]),
            grounding_failed=bool(raw["grounding_failed"]),
            clarified=bool(raw["clarified"]),
            acted=bool(raw["acted"]),
            success=bool(raw["success"]),
            grasped_id=None if raw["grasped_id"] is None else int(raw["grasped_id"]),
            steps=steps,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed episode record: {exc}") from exc


def write_episodes(records, path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), separators=(",", ":")) + "\n")


def read_episodes(path: str | Path) -> list[EpisodeRecord]:
    path = Path(path)
    records = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            records.append(record_from_dict(raw))
    return records
