"""Loss terms for student training and their weighted composition.

The student objective is cross entropy plus weighted distillation terms:
a temperature-scaled soft cross entropy against the teacher output (the
soft term is multiplied by tau^2 so its gradient scale stays comparable
across temperatures), a pair-wise affinity match and an intra-class
feature-variation match on intermediate features. The adversarial
(holistic) term lives in :mod:`segdistill.adversary`.

All functions are pure; gradients flow to student inputs only. The
feature-variation and affinity terms are cosine-based and therefore
invariant to global positive rescaling of either feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import (
    FeatureMap,
    LabelMap,
    LogitMap,
    Temperature,
    scaled_log_softmax,
    scaled_softmax,
    validate_batch,
)
from .exceptions import EmptyBatchError, NonFiniteError, ShapeMismatchError, ValidationError

TERM_CE = "ce"
TERM_PI = "pi"
TERM_PA = "pa"
TERM_IFV = "ifv"
TERM_HO = "ho"
TERM_HO_DISC = "ho_disc"

_COSINE_EPS = 1e-12


@dataclass(frozen=True)
class LossValue:
    """One scalar loss term; keeps the autograd graph alive."""

    term_name: str
    value: torch.Tensor

    def __post_init__(self):
        if self.value.dim() != 0:
            raise ValidationError(f"loss '{self.term_name}' must be a scalar")

    def item(self) -> float:
        return float(self.value.detach())

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.value.detach()))


@dataclass(frozen=True)
class TermEntry:
    raw: float
    weight: float
    weighted: float


@dataclass(frozen=True)
class CompositeLossReport:
    """Weighted total plus an itemization of every term for logging."""

    total: torch.Tensor
    per_term: dict[str, TermEntry]

    def total_value(self) -> float:
        return float(self.total.detach()) if torch.is_tensor(self.total) else float(self.total)

    def as_dict(self) -> dict:
        return {
            "total": self.total_value(),
            "terms": {
                name: {"raw": e.raw, "weight": e.weight, "weighted": e.weighted}
                for name, e in self.per_term.items()
            },
        }


def cross_entropy(student_logits: LogitMap, labels: LabelMap) -> LossValue:
    """Mean over non-ignored pixels of -log softmax(z)[true class].

    Ignored pixels are excluded from both the sum and the count, so the
    value does not depend on the logits at those positions.
    """
    validate_batch(student_logits, labels)
    mask = labels.scored_mask()
    if not mask.any():
        raise EmptyBatchError("every pixel carries the ignore id")
    logp = scaled_log_softmax(student_logits.values, 1.0)
    # clamp ignore ids to a valid index; masked out of the mean below
    idx = labels.values.clamp(min=0, max=student_logits.class_count - 1)
    picked = logp.gather(1, idx.unsqueeze(1)).squeeze(1)
    return LossValue(TERM_CE, -picked[mask].mean())


def pixelwise_distillation(
    student_logits: LogitMap, teacher_logits: LogitMap, t: Temperature
) -> LossValue:
    """Soft cross entropy against the teacher, scaled by tau^2.

    Mean over all pixels of -tau^2 * sum_c q_c log p_c where q is the
    teacher distribution at temperature tau and p the student's. The
    teacher side is detached; no gradient reaches it.
    """
    if student_logits.values.shape != teacher_logits.values.shape:
        raise ShapeMismatchError(
            f"student {tuple(student_logits.values.shape)} vs teacher "
            f"{tuple(teacher_logits.values.shape)}"
        )
    tau = t.tau
    q = scaled_softmax(teacher_logits.values.detach(), tau)
    logp = scaled_log_softmax(student_logits.values, tau)
    per_pixel = -(tau * tau) * (q * logp).sum(dim=1)
    return LossValue(TERM_PI, per_pixel.mean())


def _pool(values: torch.Tensor, pool_factor: int) -> torch.Tensor:
    if pool_factor == 1:
        return values
    return F.avg_pool2d(values, kernel_size=pool_factor, stride=pool_factor)


def _affinity(values: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between feature vectors at every position pair."""
    b, d, h, w = values.shape
    flat = values.reshape(b, d, h * w)
    unit = flat / flat.norm(dim=1, keepdim=True).clamp_min(_COSINE_EPS)
    return torch.bmm(unit.transpose(1, 2), unit)


def pairwise_affinity_loss(
    student_feat: FeatureMap, teacher_feat: FeatureMap, pool_factor: int = 2
) -> LossValue:
    """Squared-error match of cosine affinity matrices over pooled positions.

    Features are average-pooled by pool_factor first, which caps the
    O((hw)^2) affinity memory. Channel widths may differ between the two
    models; affinities are computed per model.
    """
    if pool_factor < 1:
        raise ValidationError("pool_factor must be a positive integer")
    s = _pool(student_feat.values, pool_factor)
    t = _pool(teacher_feat.values, pool_factor)
    if s.shape[0] != t.shape[0] or s.shape[2:] != t.shape[2:]:
        raise ShapeMismatchError(
            f"pooled spatial dims differ: student {tuple(s.shape)} vs "
            f"teacher {tuple(t.shape)}"
        )
    a_s = _affinity(s)
    a_t = _affinity(t.detach())
    return LossValue(TERM_PA, (a_s - a_t).square().mean())


def _downsample_labels(labels: LabelMap, h: int, w: int) -> torch.Tensor:
    lab = labels.values
    if lab.shape[1] == h and lab.shape[2] == w:
        return lab
    down = F.interpolate(lab.unsqueeze(1).float(), size=(h, w), mode="nearest")
    return down.squeeze(1).long()


def _variation_map(
    values: torch.Tensor, labels: torch.Tensor, ignore_id: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cosine similarity of each feature vector to its class prototype.

    Prototypes are per-image masked averages. Returns the variation map
    and the mask of pixels that received one.
    """
    b, d, h, w = values.shape
    var = values.new_zeros((b, h, w))
    covered = torch.zeros((b, h, w), dtype=torch.bool)
    for i in range(b):
        lab = labels[i]
        for cls in torch.unique(lab):
            c = int(cls)
            if c == ignore_id:
                continue
            mask = lab == c
            proto = values[i, :, mask].mean(dim=1)
            sim = F.cosine_similarity(
                values[i].permute(1, 2, 0)[mask], proto.unsqueeze(0), dim=1,
                eps=_COSINE_EPS,
            )
            var[i, mask] = sim
            covered[i, mask] = True
    return var, covered


def ifv_loss(
    student_feat: FeatureMap, teacher_feat: FeatureMap, labels: LabelMap
) -> LossValue:
    """Squared-error match of intra-class feature-variation maps.

    Per image and class, the prototype is the mean feature vector under
    the ground-truth mask (labels are nearest-neighbor downsampled to the
    feature resolution); the variation at a pixel is the cosine
    similarity of its feature to the prototype of its class.
    """
    s = student_feat.values
    t = teacher_feat.values
    if s.shape[0] != t.shape[0] or s.shape[2:] != t.shape[2:]:
        raise ShapeMismatchError(
            f"feature grids differ: student {tuple(s.shape)} vs teacher "
            f"{tuple(t.shape)}"
        )
    lab = _downsample_labels(labels, s.shape[2], s.shape[3])
    if not (lab != labels.ignore_id).any():
        raise EmptyBatchError("no labeled pixel at feature resolution")
    var_s, mask = _variation_map(s, lab, labels.ignore_id)
    var_t, _ = _variation_map(t.detach(), lab, labels.ignore_id)
    diff = (var_s - var_t).square()
    return LossValue(TERM_IFV, diff[mask].mean())


def compose(terms: list[tuple[LossValue, float]]) -> CompositeLossReport:
    """Weighted sum of loss terms with a per-term itemization."""
    per_term: dict[str, TermEntry] = {}
    total: torch.Tensor | float = 0.0
    for lv, weight in terms:
        if weight < 0:
            raise ValidationError(f"weight for '{lv.term_name}' must be >= 0")
        raw = lv.item()
        per_term[lv.term_name] = TermEntry(raw, weight, weight * raw)
        total = total + weight * lv.value
    if not torch.is_tensor(total):
        total = torch.tensor(float(total))
    return CompositeLossReport(total=total, per_term=per_term)


def first_non_finite_term(terms: list[tuple[LossValue, float]]) -> str | None:
    for lv, _ in terms:
        if not lv.is_finite():
            return lv.term_name
    return None


class FeatureProjection(nn.Module):
    """Learned 1x1 projection aligning student feature width to the teacher's.

    Trained jointly with the student; owned by the trainer. Acts as the
    identity when the widths already agree.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = (
            None if in_channels == out_channels
            else nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False)
        )

    def forward(self, feat: FeatureMap) -> FeatureMap:
        if self.conv is None:
            return feat
        return FeatureMap(self.conv(feat.values), source_layer=feat.source_layer)
