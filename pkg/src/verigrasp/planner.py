"""Slow symbolic side of the pipeline: instruction grammar and templates.

Instructions follow a closed paraphrase grammar:

    <verb> the [size] [color] <noun>

with verbs {"pick up", "get", "grab"}, sizes {small, large}, colors
{red, green, blue, yellow} and nouns {block, mug, bottle, apple, one}.
"apple" is the surface form of the fruit category and "one" stands for an
unspecified category ("get the red one"). Parsing is deterministic and
total over this grammar; anything else raises ParseError.

A parsed instruction becomes a grasp template with three optional attribute
slots, at least one of which is always set. Resolution filters an entity
set down to the nodes matching every set slot; an empty result is the
grounding-failure signal, not an exception.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import world
from .entities import EntityNode, EntitySet, decode_attributes
from .errors import ParseError, ValidationError

NOUN_TO_CATEGORY = {"block": "block", "mug": "mug", "bottle": "bottle", "apple": "fruit"}
CATEGORY_TO_NOUN = {v: k for k, v in NOUN_TO_CATEGORY.items()}

VERB_PHRASES = (("pick", "up"), ("get",), ("grab",))

TOKEN_VOCAB = (
    "pick", "up", "get", "grab", "the",
    "small", "large",
    "red", "green", "blue", "yellow",
    "block", "mug", "bottle", "apple", "one",
)

# query feature layout: category one-hots + "any", color + "any", size + "any"
TEMPLATE_FEATURE_DIM = 5 + 5 + 3


@dataclass(frozen=True)
class Instruction:
    """One natural-language command tied to a scene, with ground truth."""

    tokens: tuple[str, ...]
    scene_id: int
    ambiguous: bool
    referent_ids: tuple[int, ...]

    def __post_init__(self):
        if self.ambiguous != (len(self.referent_ids) >= 2):
            raise ValidationError(
                "ambiguity label inconsistent with referent count: "
                f"{self.tokens} -> {self.referent_ids}")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class GraspTemplate:
    """A verb plus up to three attribute slots; None means unconstrained."""

    category: str | None = None
    color: str | None = None
    size: str | None = None
    verb: str = "grasp"

    def __post_init__(self):
        if self.category is None and self.color is None and self.size is None:
            raise ValidationError("template must constrain at least one attribute")

    def canonical(self) -> str:
        parts = [self.verb]
        if self.size:
            parts.append(self.size)
        if self.color:
            parts.append(self.color)
        if self.category:
            parts.append(self.category)
        return "_".join(parts)

    def admits_class(self, class_key: str) -> bool:
        """True when an entity of class ``category/color/size`` satisfies
        every constrained slot of this template."""
        category, color, size = class_key.split("/")
        return ((self.category is None or self.category == category)
                and (self.color is None or self.color == color)
                and (self.size is None or self.size == size))

    @classmethod
    def from_canonical(cls, text: str) -> "GraspTemplate":
        parts = text.split("_")
        if not parts or parts[0] != "grasp":
            raise ParseError(f"bad canonical template: {text!r}")
        kwargs: dict[str, str] = {}
        for part in parts[1:]:
            if part in world.SIZES:
                slot = "size"
            elif part in world.COLORS:
                slot = "color"
            elif part in world.CATEGORIES:
                slot = "category"
            else:
                raise ParseError(f"unknown slot value {part!r} in {text!r}")
            if slot in kwargs:
                raise ParseError(f"duplicate {slot} slot in {text!r}")
            kwargs[slot] = part
        return cls(**kwargs)


def extract_template(tokens: tuple[str, ...]) -> GraspTemplate:
    """Parse an instruction into its grasp template.

    The parse is a single left-to-right pass with no backtracking, which is
    enough because the grammar is prefix-free over its token classes.
    """
    toks = list(tokens)
    if not toks:
        raise ParseError("empty instruction")

    if toks[:2] == ["pick", "up"]:
        toks = toks[2:]
    elif toks[:1] in (["get"], ["grab"]):
        toks = toks[1:]
    else:
        raise ParseError(f"no verb phrase in {' '.join(tokens)!r}")

    if not toks or toks[0] != "the":
        raise ParseError(f"missing determiner in {' '.join(tokens)!r}")
    toks = toks[1:]

    size = None
    if toks and toks[0] in world.SIZES:
        size = toks[0]
        toks = toks[1:]

    color = None
    if toks and toks[0] in world.COLORS:
        color = toks[0]
        toks = toks[1:]

    if len(toks) != 1:
        raise ParseError(f"trailing or missing noun in {' '.join(tokens)!r}")
    noun = toks[0]
    if noun == "one":
        if size is None and color is None:
            raise ParseError(f"fully unconstrained reference in {' '.join(tokens)!r}")
        category = None
    elif noun in NOUN_TO_CATEGORY:
        category = NOUN_TO_CATEGORY[noun]
    else:
        raise ParseError(f"unknown noun {noun!r} in {' '.join(tokens)!r}")

    return GraspTemplate(category=category, color=color, size=size)


def realize(template: GraspTemplate, verb_index: int) -> tuple[str, ...]:
    """Surface one paraphrase of a template (inverse of extract_template)."""
    tokens = list(VERB_PHRASES[verb_index % len(VERB_PHRASES)]) + ["the"]
    if template.size:
        tokens.append(template.size)
    if template.color:
        tokens.append(template.color)
    tokens.append(CATEGORY_TO_NOUN[template.category] if template.category else "one")
    return tuple(tokens)


def featurize_template(template: GraspTemplate) -> np.ndarray:
    """Fixed-width query features: one-hot per slot with an explicit "any"."""
    vec = np.zeros(TEMPLATE_FEATURE_DIM)
    if template.category is None:
        vec[4] = 1.0
    else:
        vec[world.CATEGORIES.index(template.category)] = 1.0
    if template.color is None:
        vec[9] = 1.0
    else:
        vec[5 + world.COLORS.index(template.color)] = 1.0
    if template.size is None:
        vec[12] = 1.0
    else:
        vec[10 + world.SIZES.index(template.size)] = 1.0
    return vec


def bag_of_words(tokens: tuple[str, ...]) -> np.ndarray:
    """Token counts over the closed vocabulary, for planner-free ablations."""
    vec = np.zeros(len(TOKEN_VOCAB))
    for tok in tokens:
        try:
            vec[TOKEN_VOCAB.index(tok)] += 1.0
        except ValueError:
            raise ParseError(f"token {tok!r} outside the benchmark vocabulary") from None
    return vec


def template_matches(template: GraspTemplate, node: EntityNode) -> bool:
    cat, col, size = decode_attributes(node.attributes)
    if template.category is not None and cat != template.category:
        return False
    if template.color is not None and col != template.color:
        return False
    if template.size is not None and size != template.size:
        return False
    return True


def resolve_template(template: GraspTemplate, entity_set: EntitySet) -> tuple[EntityNode, ...]:
    """All entities satisfying every set slot, in entity-set order.

    An empty tuple signals grounding failure and is not an error.
    """
    return tuple(n for n in entity_set.entities if template_matches(template, n))


def tiebreak_by_confidence(candidates: tuple[EntityNode, ...]) -> EntityNode:
    """Deterministic pick among candidates: max confidence, then lowest id."""
    if not candidates:
        raise ValidationError("cannot tiebreak an empty candidate set")
    return min(candidates, key=lambda n: (-n.confidence, n.entity_id))
