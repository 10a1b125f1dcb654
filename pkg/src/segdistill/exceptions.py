"""Exception hierarchy shared across the package.

Error categories map to CLI exit codes: ``ConfigError`` -> 2,
``NonFiniteLossError``/``SweepError`` -> 3, I/O problems -> 4.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class ShapeMismatchError(ValidationError):
    """Arrays that must agree spatially or batch-wise do not."""


class NonFiniteError(ValidationError):
    """A value that must be finite contains NaN or Inf."""


class ClassRangeError(ValidationError):
    """A label id is outside [0, class_count) and is not the ignore id."""


class EmptyBatchError(ValidationError):
    """No scorable pixels (or samples) remain after masking."""


class UnknownModelError(ValidationError):
    """Model name not present in the registry."""


class UnknownTapError(ValidationError):
    """Requested feature tap is not declared by the model."""


class UnknownPresetError(ValidationError):
    """Preset name not present in the preset table."""


class PairingError(ValidationError):
    """An image file has no matching label file (or vice versa)."""


class CheckpointError(ValidationError):
    """Checkpoint file is unreadable or does not fit the target model."""


class ConfigError(ValidationError):
    """Resolved run configuration failed schema validation."""


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss; names the offending term."""

    def __init__(self, term_name: str, step: int):
        self.term_name = term_name
        self.step = step
        super().__init__(
            f"loss term '{term_name}' became non-finite at step {step}"
        )


class SweepError(RuntimeError):
    """Every trial of a sweep failed."""
