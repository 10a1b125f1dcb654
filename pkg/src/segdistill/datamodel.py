"""Shared value types moved between loaders, models, losses and metrics.

All values are immutable after construction and safe to share across
workers; the operations here are pure functions. Dense arrays are torch
tensors, float32 by convention (float64 inputs are accepted and kept,
which the gradient checks rely on).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .exceptions import (
    ClassRangeError,
    NonFiniteError,
    ShapeMismatchError,
    ValidationError,
)

DEFAULT_IGNORE_ID = 255


@dataclass(frozen=True)
class LogitMap:
    """Per-pixel unnormalized class scores, shape (B, C, H, W)."""

    values: torch.Tensor
    class_count: int = 0

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ShapeMismatchError(
                f"logits must be (B, C, H, W), got {tuple(self.values.shape)}"
            )
        if self.class_count == 0:
            object.__setattr__(self, "class_count", int(self.values.shape[1]))
        if self.class_count != self.values.shape[1]:
            raise ShapeMismatchError(
                f"class_count {self.class_count} does not match channel dim "
                f"{self.values.shape[1]}"
            )
        if self.class_count < 2:
            raise ValidationError("need at least 2 classes")
        if min(self.values.shape[2], self.values.shape[3]) < 1:
            raise ValidationError("spatial dims must be >= 1")
        if not torch.isfinite(self.values.detach()).all():
            raise NonFiniteError("logits contain NaN or Inf")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        b, _, h, w = self.values.shape
        return b, h, w


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel class distributions, shape (B, C, H, W).

    Channel sums must equal 1 within 1e-6 (checked in float64).
    """

    values: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ShapeMismatchError(
                f"probabilities must be (B, C, H, W), got {tuple(self.values.shape)}"
            )
        v = self.values.detach()
        if not torch.isfinite(v).all():
            raise NonFiniteError("probabilities contain NaN or Inf")
        if v.min() < 0 or v.max() > 1 + 1e-6:
            raise ValidationError("probabilities must lie in [0, 1]")
        sums = v.double().sum(dim=1)
        if (sums - 1.0).abs().max() > 1e-6:
            raise ValidationError(
                f"per-pixel channel sums deviate from 1 by "
                f"{float((sums - 1.0).abs().max()):.2e}"
            )

    @property
    def class_count(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel ground-truth class ids, shape (B, H, W), with an ignore sentinel."""

    values: torch.Tensor
    ignore_id: int = DEFAULT_IGNORE_ID

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ShapeMismatchError(
                f"labels must be (B, H, W), got {tuple(self.values.shape)}"
            )
        if not self.values.dtype.is_floating_point:
            return
        raise ValidationError("labels must be an integer tensor")

    def scored_mask(self) -> torch.Tensor:
        """Boolean mask of pixels that participate in losses and metrics."""
        return self.values != self.ignore_id


@dataclass(frozen=True)
class FeatureMap:
    """Intermediate dense features, shape (B, D, h, w)."""

    values: torch.Tensor
    source_layer: str = ""

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ShapeMismatchError(
                f"features must be (B, D, h, w), got {tuple(self.values.shape)}"
            )
        if not torch.isfinite(self.values.detach()).all():
            raise NonFiniteError("features contain NaN or Inf")


@dataclass(frozen=True)
class Temperature:
    """Softmax temperature; tau > 1 softens the distribution."""

    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class LossWeights:
    """Weights for the distillation terms added to cross entropy.

    All-zero is the student-only configuration.
    """

    lambda_pi: float = 0.0
    lambda_pa: float = 0.0
    lambda_ho: float = 0.0
    lambda_ifv: float = 0.0

    def __post_init__(self):
        for name in ("lambda_pi", "lambda_pa", "lambda_ho", "lambda_ifv"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")

    def any_active(self) -> bool:
        return any(
            w > 0
            for w in (self.lambda_pi, self.lambda_pa, self.lambda_ho, self.lambda_ifv)
        )


def scaled_softmax(values: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Numerically stable softmax over the channel dim of (B, C, H, W).

    The per-pixel max is subtracted before exponentiation; teacher logits
    are routinely confident enough to overflow exp() otherwise.
    """
    z = values / tau
    z = z - z.amax(dim=1, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def scaled_log_softmax(values: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """log(softmax(values / tau)) via the max-shifted log-sum-exp form."""
    z = values / tau
    z = z - z.amax(dim=1, keepdim=True)
    return z - torch.log(torch.exp(z).sum(dim=1, keepdim=True))


def softmax(z: LogitMap, t: Temperature = Temperature(1.0)) -> ProbabilityMap:
    """Temperature-scaled per-pixel softmax of a logit map."""
    return ProbabilityMap(scaled_softmax(z.values, t.tau))


def validate_batch(logits: LogitMap, labels: LabelMap) -> None:
    """Check that a (logits, labels) pair is a consistent training batch.

    Confirms (B, H, W) agreement, the label id range and finiteness.
    Raises a distinct error per defect; never mutates its inputs.
    """
    b, c, h, w = logits.values.shape
    if tuple(labels.values.shape) != (b, h, w):
        raise ShapeMismatchError(
            f"labels {tuple(labels.values.shape)} do not match logits "
            f"(B, H, W) = {(b, h, w)}"
        )
    if not torch.isfinite(logits.values.detach()).all():
        raise NonFiniteError("logits contain NaN or Inf")
    lab = labels.values
    bad = (lab != labels.ignore_id) & ((lab < 0) | (lab >= c))
    if bad.any():
        offender = int(lab[bad][0])
        raise ClassRangeError(
            f"label id {offender} outside [0, {c}) and not ignore_id "
            f"{labels.ignore_id}"
        )
