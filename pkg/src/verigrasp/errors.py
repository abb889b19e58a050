"""Error taxonomy shared across the package.

Two broad families matter to callers: validation problems (bad configs,
malformed files, inconsistent inputs) and numerical problems (divergence,
violated bounds). The CLI maps them to exit codes 2 and 3 respectively.
"""


class VerigraspError(Exception):
    """Base class for everything raised on purpose by this package."""


class ValidationError(VerigraspError):
    """Bad input: config, schema, file contents, or inconsistent arguments."""


class NumericalError(VerigraspError):
    """Numerical failure: divergence, NaN loss, or a violated bound check."""


class GenerationError(ValidationError):
    """Scene or dataset generation could not satisfy its constraints."""


class ParseError(ValidationError):
    """An instruction did not match the benchmark grammar."""


class EmptyStateError(ValidationError):
    """Both the current frame and the entity memory are empty."""


class StaleCacheError(ValidationError):
    """A backward pass was invoked with a cache that was already consumed."""


class TrainingDivergence(NumericalError):
    """Loss became NaN or non-finite during training."""

    def __init__(self, step: int, diagnostics: dict):
        self.step = step
        self.diagnostics = diagnostics
        super().__init__(f"training diverged at step {step}: {diagnostics}")
