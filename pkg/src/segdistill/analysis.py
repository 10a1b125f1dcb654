"""Temperature/entropy study of teacher outputs.

Samples images, scales teacher logits by each temperature and aggregates
per-pixel Shannon-entropy histograms. Accumulation is streaming with
fixed bins and exact integer counts; the full set of distributions is
never materialized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .data import DatasetSpec, load_split
from .datamodel import ProbabilityMap, scaled_softmax
from .exceptions import ValidationError
from .metrics import entropy_map
from .models import SegmentationModel, freeze

DEFAULT_TEMPERATURES = (1.0, 2.0, 4.0, 8.0, 16.0)
DEFAULT_SAMPLE_COUNT = 800
NEAR_MAX_MARGIN_NATS = 0.1


@dataclass(frozen=True)
class EntropyReport:
    """Histogram shares of pixel entropies per temperature.

    Pixel bookkeeping is exact integer counting, so shares sum to 1
    exactly after normalization.
    """

    class_count: int
    temperatures: tuple
    bin_edges: np.ndarray
    counts: dict  # temperature -> int64 array of bin counts
    near_max_counts: dict  # temperature -> pixels within 0.1 nat of ln C
    pixel_count: int
    sample_manifest: dict = field(default_factory=dict)

    def shares(self, tau: float) -> np.ndarray:
        if self.pixel_count == 0:
            raise ValidationError("report holds no pixels")
        return self.counts[tau] / self.pixel_count

    def lowest_bin_share(self, tau: float) -> float:
        return float(self.shares(tau)[0])

    def near_max_share(self, tau: float) -> float:
        """Share of pixels within 0.1 nat of the maximal entropy ln C."""
        if self.pixel_count == 0:
            raise ValidationError("report holds no pixels")
        return self.near_max_counts[tau] / self.pixel_count


def entropy_study(
    teacher: SegmentationModel,
    data: DatasetSpec,
    temperatures: list[float] | tuple = DEFAULT_TEMPERATURES,
    sample_count: int = DEFAULT_SAMPLE_COUNT,
    seed: int = 0,
    split: str = "val",
    bins: int = 64,
) -> EntropyReport:
    """Aggregate entropy histograms of teacher output at each temperature.

    Sampling is seeded and without replacement; histograms accumulate one
    image at a time.
    """
    temps = tuple(float(t) for t in temperatures)
    if not temps:
        raise ValidationError("need at least one temperature")
    for t in temps:
        if t <= 0:
            raise ValidationError(f"temperature must be positive, got {t}")
    dataset = load_split(data, split)
    if sample_count > len(dataset):
        raise ValidationError(
            f"sample_count {sample_count} exceeds split {split!r} size {len(dataset)}"
        )
    rng = np.random.default_rng(seed)
    indices = rng.choice(len(dataset), size=sample_count, replace=False)

    freeze(teacher)
    max_entropy = math.log(teacher.class_count)
    edges = np.linspace(0.0, max_entropy, bins + 1)
    counts = {t: np.zeros(bins, dtype=np.int64) for t in temps}
    near_max = {t: 0 for t in temps}
    pixel_count = 0
    ids = dataset.sample_ids()
    with torch.no_grad():
        for idx in indices:
            image, _ = dataset[int(idx)]
            logits, _ = teacher(image.unsqueeze(0))
            for t in temps:
                probs = ProbabilityMap(scaled_softmax(logits.values, t))
                ent = entropy_map(probs).numpy()
                c, _ = np.histogram(ent, bins=edges)
                counts[t] += c.astype(np.int64)
                near_max[t] += int((ent >= max_entropy - NEAR_MAX_MARGIN_NATS).sum())
            pixel_count += int(logits.values.shape[2] * logits.values.shape[3])

    return EntropyReport(
        class_count=teacher.class_count,
        temperatures=temps,
        bin_edges=edges,
        counts=counts,
        near_max_counts=near_max,
        pixel_count=pixel_count,
        sample_manifest={
            "split": split,
            "seed": seed,
            "image_ids": [ids[int(i)] for i in indices],
        },
    )


def render_report(report: EntropyReport, out_path: str | Path) -> tuple[Path, Path]:
    """Emit the overlaid histogram figure (SVG) and a bin-share table (CSV)."""
    if report.pixel_count == 0 or not report.temperatures:
        raise ValidationError("cannot render an empty report")
    out_path = Path(out_path)
    out_path.mkdir(parents=True, exist_ok=True)
    centers = (report.bin_edges[:-1] + report.bin_edges[1:]) / 2.0

    fig, ax = plt.subplots(figsize=(7, 4))
    for t in report.temperatures:
        ax.step(centers, report.shares(t), where="mid", label=f"tau = {t:g}")
    ax.set_xlabel("Shannon entropy (nats)")
    ax.set_ylabel("share of pixels")
    ax.set_title(f"Teacher output entropy, {report.class_count} classes")
    ax.legend()
    fig.tight_layout()
    figure_path = out_path / "entropy_histogram.svg"
    fig.savefig(figure_path)
    plt.close(fig)

    table_path = out_path / "entropy_table.csv"
    with table_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["temperature", "bin_lo", "bin_hi", "share"])
        for t in report.temperatures:
            shares = report.shares(t)
            for lo, hi, share in zip(report.bin_edges[:-1], report.bin_edges[1:], shares):
                writer.writerow([f"{t:g}", f"{lo:.6f}", f"{hi:.6f}", f"{share:.8f}"])
    return figure_path, table_path
