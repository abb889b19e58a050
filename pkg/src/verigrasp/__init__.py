"""verigrasp: verified language grounding for tabletop pick instructions.

The package splits instruction following into a slow symbolic side (parse,
template, resolve) and a fast learned side (entity encoder, cross-attention
grounding, reactive policy), with the attention entropy acting as a
calibrated ambiguity signal that gates a clarify-or-act decision.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    NumericalError,
    ParseError,
    TrainingDivergence,
    ValidationError,
    VerigraspError,
)
