"""Entity-centric scene state: per-object nodes, a FIFO memory, and the
learned appearance encoder.

Each visible object becomes one node carrying its one-hot attribute block,
its position, a synthetic detection confidence, and a learned appearance
embedding. The appearance embedding is a linear map of
(attributes, position, noise channel) followed by L2 normalization; the
noise channel is how lighting and feature-level perturbations reach the
downstream pipeline without moving any geometry.

The memory is append-only with FIFO eviction by birth step, capacity 16.
Recall deduplicates by entity id and keeps the newest copy, preferring the
current frame when both hold the same id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import world
from .errors import EmptyStateError, ValidationError
from .world import Perturbation, Scene

ATTR_DIM = 10  # 4 categories + 4 colors + 2 sizes, one hot per group
ENTITY_INPUT_DIM = ATTR_DIM + 3 + 1  # attributes, position, noise channel
APPEARANCE_DIM = 32
ENTITY_FEATURE_DIM = APPEARANCE_DIM + 3  # appearance plus raw position
MEMORY_CAPACITY = 16


def attribute_vector(category: str, color: str, size: str) -> np.ndarray:
    """One-hot block for (category, color, size), exactly one hot per group."""
    vec = np.zeros(ATTR_DIM)
    vec[world.CATEGORIES.index(category)] = 1.0
    vec[4 + world.COLORS.index(color)] = 1.0
    vec[8 + world.SIZES.index(size)] = 1.0
    return vec


def decode_attributes(vec: np.ndarray) -> tuple[str, str, str]:
    cat = world.CATEGORIES[int(np.argmax(vec[:4]))]
    col = world.COLORS[int(np.argmax(vec[4:8]))]
    size = world.SIZES[int(np.argmax(vec[8:10]))]
    return cat, col, size


@dataclass(frozen=True, eq=False)
class EntityNode:
    """One tracked object instance."""

    entity_id: int
    scene_id: int
    position: np.ndarray  # (3,)
    attributes: np.ndarray  # (ATTR_DIM,)
    appearance: np.ndarray  # (APPEARANCE_DIM,), unit L2 norm
    confidence: float
    birth_step: int

    @property
    def feature(self) -> np.ndarray:
        """Appearance plus raw position, the row fed to the attention stage."""
        return np.concatenate([self.appearance, self.position])


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[EntityNode, ...]
    step: int
    scene_id: int


@dataclass(frozen=True)
class EntityMemory:
    nodes: tuple[EntityNode, ...] = ()
    capacity: int = MEMORY_CAPACITY


@dataclass(frozen=True)
class EntitySet:
    """Current frame plus recalled memory, the working set for attention."""

    entities: tuple[EntityNode, ...]
    scene_id: int

    def __post_init__(self):
        if not self.entities:
            raise EmptyStateError("entity set must contain at least one entity")

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([e.appearance for e in self.entities])

    @property
    def features(self) -> np.ndarray:
        return np.stack([e.feature for e in self.entities])

    @property
    def positions(self) -> np.ndarray:
        return np.stack([e.position for e in self.entities])

    def ids(self) -> tuple[int, ...]:
        return tuple(e.entity_id for e in self.entities)


# ---------- appearance encoder ----------

@dataclass
class EncoderParams:
    """Single linear map from raw entity inputs to appearance space."""

    weight: np.ndarray  # (APPEARANCE_DIM, ENTITY_INPUT_DIM)


def init_encoder(rng: np.random.Generator) -> EncoderParams:
    scale = 1.0 / np.sqrt(ENTITY_INPUT_DIM)
    weight = rng.normal(0.0, scale, size=(APPEARANCE_DIM, ENTITY_INPUT_DIM))
    # Start attribute-dominant: with position and noise mixed in at full
    # strength, same-class entities point in scattered appearance directions
    # and the grounding loss has no shared direction to align queries to.
    # Training may still grow these columns back.
    weight[:, ATTR_DIM:] *= 0.25
    return EncoderParams(weight=weight)


def appearance_forward(inputs: np.ndarray, params: EncoderParams):
    """Map raw rows (n, ENTITY_INPUT_DIM) to unit appearance rows.

    Returns the appearance matrix and a cache for the backward pass.
    """
    raw = inputs @ params.weight.T
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValidationError("degenerate appearance embedding (zero norm)")
    app = raw / norms
    cache = {"inputs": inputs, "app": app, "norms": norms}
    return app, cache


def appearance_backward(d_app: np.ndarray, cache: dict) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the encoder weight.

    Backpropagates through the row-wise normalization:
    d_raw = (d_app - (d_app . app) app) / norm.
    """
    app = cache["app"]
    inner = np.sum(d_app * app, axis=1, keepdims=True)
    d_raw = (d_app - inner * app) / cache["norms"]
    return d_raw.T @ cache["inputs"]


def entity_inputs(scene: Scene, perturbation: Perturbation | None = None,
                  visible_ids: tuple[int, ...] | None = None) -> tuple[np.ndarray, list[world.WorldObject]]:
    """Raw encoder input rows for the visible objects of a scene."""
    visible = [o for o in scene.objects
               if visible_ids is None or o.obj_id in visible_ids]
    noise = world.appearance_noise(scene, perturbation, len(scene.objects))
    rows = []
    for obj in visible:
        rows.append(np.concatenate([
            attribute_vector(obj.category, obj.color, obj.size),
            np.asarray(obj.position, dtype=float),
            [noise[obj.obj_id]],
        ]))
    if not rows:
        return np.zeros((0, ENTITY_INPUT_DIM)), visible
    return np.stack(rows), visible


def _detection_confidence(scene_id: int, obj_id: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([scene_id & 0x7FFFFFFF, obj_id, 0x3C]))
    return float(0.5 + 0.5 * rng.uniform())


def encode_entities(scene: Scene, params: EncoderParams,
                    perturbation: Perturbation | None = None, step: int = 0,
                    visible_ids: tuple[int, ...] | None = None) -> SceneGraph:
    """Build the current-frame scene graph with learned appearances.

    ``visible_ids`` restricts encoding to a subset of objects, which is how
    occlusion is simulated when testing memory recall.
    """
    inputs, visible = entity_inputs(scene, perturbation, visible_ids)
    if len(visible) == 0:
        return SceneGraph(nodes=(), step=step, scene_id=scene.rng_seed)
    app, _ = appearance_forward(inputs, params)
    nodes = []
    for row, obj, a in zip(inputs, visible, app):
        nodes.append(EntityNode(
            entity_id=obj.obj_id,
            scene_id=scene.rng_seed,
            position=np.asarray(obj.position, dtype=float),
            attributes=row[:ATTR_DIM].copy(),
            appearance=a,
            confidence=_detection_confidence(scene.rng_seed, obj.obj_id),
            birth_step=step,
        ))
    return SceneGraph(nodes=tuple(nodes), step=step, scene_id=scene.rng_seed)


# ---------- memory ----------

def update_memory(memory: EntityMemory, graph: SceneGraph) -> EntityMemory:
    """Append the frame's nodes, then evict lowest birth step down to capacity.

    Appending is unconditional (no dedup on write); eviction removes the
    earliest-born node first, with insertion order breaking ties.
    """
    nodes = list(memory.nodes)
    for node in graph.nodes:
        tagged = node if node.birth_step == graph.step else _rebirth(node, graph.step)
        nodes.append(tagged)
    while len(nodes) > memory.capacity:
        oldest = min(range(len(nodes)), key=lambda i: nodes[i].birth_step)
        nodes.pop(oldest)
    return EntityMemory(nodes=tuple(nodes), capacity=memory.capacity)


def _rebirth(node: EntityNode, step: int) -> EntityNode:
    return EntityNode(
        entity_id=node.entity_id,
        scene_id=node.scene_id,
        position=node.position,
        attributes=node.attributes,
        appearance=node.appearance,
        confidence=node.confidence,
        birth_step=step,
    )


def retrieve(memory: EntityMemory) -> tuple[EntityNode, ...]:
    """Recall memory nodes deduplicated by entity id, newest copy wins."""
    kept: dict[int, EntityNode] = {}
    order: list[int] = []
    for node in memory.nodes:
        if node.entity_id not in kept:
            order.append(node.entity_id)
        kept[node.entity_id] = node  # later copies overwrite earlier ones
    return tuple(kept[i] for i in order)


def assemble_entity_set(graph: SceneGraph, memory: EntityMemory) -> EntitySet:
    """Current-frame nodes first, then memory recalls for unseen ids."""
    if not graph.nodes and not memory.nodes:
        raise EmptyStateError("cannot assemble entities from empty frame and empty memory")
    frame_ids = {n.entity_id for n in graph.nodes}
    recalled = tuple(n for n in retrieve(memory) if n.entity_id not in frame_ids)
    return EntitySet(entities=graph.nodes + recalled, scene_id=graph.scene_id)
