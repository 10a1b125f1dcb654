"""Confusion-matrix accumulation, mIoU and Shannon-entropy computations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .datamodel import LabelMap, ProbabilityMap
from .exceptions import ShapeMismatchError, ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C pixel counts; counts[g][p] = pixels with truth g predicted p.

    Ignored pixels are excluded. Accumulation is functional; merging
    per-worker matrices is plain addition.
    """

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ShapeMismatchError("confusion matrix must be square")
        if (c < 0).any():
            raise ValidationError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @classmethod
    def zeros(cls, class_count: int) -> "ConfusionMatrix":
        return cls(np.zeros((class_count, class_count), dtype=np.int64))

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def total_pixels(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: LabelMap, truth: LabelMap) -> ConfusionMatrix:
    """Return cm plus the counts of one (prediction, truth) pair.

    Pixels whose truth equals the ignore id are skipped.
    """
    if tuple(pred.values.shape) != tuple(truth.values.shape):
        raise ShapeMismatchError(
            f"pred {tuple(pred.values.shape)} vs truth {tuple(truth.values.shape)}"
        )
    c = cm.class_count
    t = truth.values.reshape(-1).cpu().numpy()
    p = pred.values.reshape(-1).cpu().numpy()
    keep = t != truth.ignore_id
    t, p = t[keep], p[keep]
    if t.size == 0:
        return cm
    if t.min() < 0 or t.max() >= c or p.min() < 0 or p.max() >= c:
        raise ValidationError("class id outside [0, C) in confusion update")
    delta = np.bincount(c * t + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + delta)


def miou(cm: ConfusionMatrix) -> float:
    """Mean intersection-over-union in percent.

    Classes absent from both truth and prediction (zero denominator) are
    excluded from the mean.
    """
    counts = cm.counts
    diag = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    valid = denom > 0
    if not valid.any():
        raise ValidationError("all IoU denominators are zero")
    iou = diag[valid] / denom[valid].astype(np.float64)
    return float(iou.mean() * 100.0)


def per_class_iou(cm: ConfusionMatrix) -> dict[int, float]:
    """IoU in percent per class with a nonzero denominator."""
    counts = cm.counts
    out = {}
    for c in range(cm.class_count):
        denom = counts[c, :].sum() + counts[:, c].sum() - counts[c, c]
        if denom > 0:
            out[c] = float(counts[c, c] / denom * 100.0)
    return out


@dataclass(frozen=True)
class EntropyStats:
    """Per-pixel Shannon entropies in nats plus their histogram."""

    values: torch.Tensor
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    temperature: float | None = None

    @property
    def pixel_count(self) -> int:
        return int(self.bin_counts.sum())


def entropy_map(p: ProbabilityMap) -> torch.Tensor:
    """Per-pixel entropy -sum_c p_c ln p_c with 0*ln(0) := 0, in float64.

    Values are clamped into [0, ln C] so float round-off never pushes a
    pixel outside the histogram range.
    """
    v = p.values.detach().double()
    term = torch.where(v > 0, v * torch.log(v), torch.zeros_like(v))
    ent = -term.sum(dim=1)
    return ent.clamp_(0.0, math.log(p.class_count))


def shannon_entropy(
    p: ProbabilityMap, bins: int = 64, temperature: float | None = None
) -> EntropyStats:
    """Entropy map and its fixed-range histogram over [0, ln C]."""
    ent = entropy_map(p)
    edges = np.linspace(0.0, math.log(p.class_count), bins + 1)
    counts, _ = np.histogram(ent.numpy(), bins=edges)
    return EntropyStats(
        values=ent, bin_edges=edges, bin_counts=counts.astype(np.int64),
        temperature=temperature,
    )
