"""Holistic (adversarial) distillation: a conditional discriminator scores
segmentation maps and competes with the student under a least-squares GAN
objective.

The discriminator sees the input image concatenated with a probability
map and produces one scalar score per batch element. During the student
update its parameters are frozen; during its own update the segmentation
inputs are detached, so neither segmentation model receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .datamodel import ProbabilityMap
from .exceptions import ShapeMismatchError, ValidationError
from .losses import TERM_HO, TERM_HO_DISC, LossValue


@dataclass(frozen=True)
class DiscriminatorScore:
    """One real-valued score per batch element."""

    score: torch.Tensor

    def __post_init__(self):
        if self.score.dim() != 1:
            raise ShapeMismatchError("scores must be one value per batch element")


class SegmentationDiscriminator(nn.Module):
    """4 stride-2 conv blocks + global average pooling + linear head.

    Input is the channel concatenation of the conditioning image and the
    segmentation probabilities.
    """

    def __init__(self, class_count: int, image_channels: int = 3, width: int = 32):
        super().__init__()
        chans = [image_channels + class_count, width, width * 2, width * 4, width * 4]
        blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            blocks += [
                nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(chans[-1], 1)

    def forward(self, probs: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        if probs.shape[0] != image.shape[0] or probs.shape[2:] != image.shape[2:]:
            raise ShapeMismatchError(
                f"segmentation {tuple(probs.shape)} and image "
                f"{tuple(image.shape)} are not spatially aligned"
            )
        x = torch.cat([image, probs], dim=1)
        x = self.blocks(x)
        x = x.mean(dim=(2, 3))
        return self.head(x).squeeze(1)


class AdversarialState:
    """Discriminator parameters plus the alternating-update bookkeeping.

    Single-owner mutable state confined to one training loop. Forward
    evaluation under frozen parameters is safe to run concurrently.
    The optimizer is momentum-free SGD so repeated updates on fixed
    inputs descend monotonically.
    """

    def __init__(
        self,
        discriminator: nn.Module,
        lr: float = 1e-4,
        momentum: float = 0.0,
        update_ratio: int = 1,
    ):
        if update_ratio < 1:
            raise ValidationError("update_ratio must be >= 1")
        self.discriminator = discriminator
        self.update_ratio = update_ratio
        self.optimizer = torch.optim.SGD(
            discriminator.parameters(), lr=lr, momentum=momentum
        )

    @classmethod
    def create(
        cls,
        class_count: int,
        image_channels: int = 3,
        lr: float = 1e-4,
        momentum: float = 0.0,
        update_ratio: int = 1,
        seed: int | None = None,
    ) -> "AdversarialState":
        if seed is None:
            disc = SegmentationDiscriminator(class_count, image_channels)
        else:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                disc = SegmentationDiscriminator(class_count, image_channels)
        return cls(disc, lr=lr, momentum=momentum, update_ratio=update_ratio)


def discriminator_forward(
    state: AdversarialState, segmentation: ProbabilityMap, image: torch.Tensor
) -> DiscriminatorScore:
    """Score a batch of segmentation maps conditioned on their images."""
    return DiscriminatorScore(state.discriminator(segmentation.values, image))


def holistic_student_loss(
    state: AdversarialState, student_probs: ProbabilityMap, image: torch.Tensor
) -> LossValue:
    """LSGAN generator objective: mean over the batch of (score - 1)^2.

    Discriminator parameters are frozen for this evaluation, so the
    gradient reaches the student (through the probabilities) only.
    """
    params = [p for p in state.discriminator.parameters()]
    prior = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        scores = state.discriminator(student_probs.values, image)
        loss = (scores - 1.0).square().mean()
    finally:
        for p, r in zip(params, prior):
            p.requires_grad_(r)
    return LossValue(TERM_HO, loss)


def discriminator_step(
    state: AdversarialState,
    student_probs: ProbabilityMap,
    teacher_probs: ProbabilityMap,
    image: torch.Tensor,
) -> LossValue:
    """One optimizer step on the LSGAN discriminator objective.

    Minimizes mean[(score(teacher) - 1)^2 + score(student)^2]; both
    probability maps are detached first. Returns the loss before the step.
    """
    s = student_probs.values.detach()
    t = teacher_probs.values.detach()
    img = image.detach()
    score_t = state.discriminator(t, img)
    score_s = state.discriminator(s, img)
    loss = ((score_t - 1.0).square() + score_s.square()).mean()
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    return LossValue(TERM_HO_DISC, loss.detach())
