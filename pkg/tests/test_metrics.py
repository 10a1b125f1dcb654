"""Confusion matrix, mIoU and entropy computations against brute-force oracles."""

import math

import numpy as np
import pytest
import torch

from segdistill.datamodel import LabelMap, ProbabilityMap
from segdistill.exceptions import ShapeMismatchError, ValidationError
from segdistill.metrics import (
    ConfusionMatrix,
    accumulate,
    entropy_map,
    miou,
    per_class_iou,
    shannon_entropy,
)


def confusion_oracle(pred, truth, class_count, ignore_id=255):
    """Explicit per-pixel double loop."""
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    for g, p in zip(truth.flatten().tolist(), pred.flatten().tolist()):
        if g == ignore_id:
            continue
        counts[g][p] += 1
    return counts


def miou_oracle(counts):
    ious = []
    c = counts.shape[0]
    for k in range(c):
        denom = counts[k, :].sum() + counts[:, k].sum() - counts[k, k]
        if denom > 0:
            ious.append(counts[k, k] / denom)
    return float(np.mean(ious) * 100.0)


class TestAccumulate:
    def test_perfect_prediction_fills_diagonal(self):
        lab = torch.full((1, 2, 5), 3, dtype=torch.long)
        cm = accumulate(ConfusionMatrix.zeros(5), LabelMap(lab), LabelMap(lab))
        assert cm.counts[3, 3] == 10
        assert cm.total_pixels() == 10

    def test_all_ignored_leaves_matrix_unchanged(self):
        cm0 = ConfusionMatrix.zeros(4)
        lab = torch.full((1, 3, 3), 255, dtype=torch.long)
        pred = torch.zeros(1, 3, 3, dtype=torch.long)
        cm = accumulate(cm0, LabelMap(pred), LabelMap(lab))
        assert (cm.counts == 0).all()

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            truth = rng.integers(0, 5, size=(1, 16, 16))
            truth[rng.random(truth.shape) < 0.1] = 255
            pred = rng.integers(0, 5, size=(1, 16, 16))
            cm = accumulate(
                ConfusionMatrix.zeros(5),
                LabelMap(torch.from_numpy(pred)),
                LabelMap(torch.from_numpy(truth)),
            )
            np.testing.assert_array_equal(cm.counts, confusion_oracle(pred, truth, 5))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            accumulate(
                ConfusionMatrix.zeros(2),
                LabelMap(torch.zeros(1, 2, 2, dtype=torch.long)),
                LabelMap(torch.zeros(1, 3, 3, dtype=torch.long)),
            )

    def test_shard_merge_equals_concatenation(self):
        rng = np.random.default_rng(11)
        truth = rng.integers(0, 4, size=(4, 8, 8))
        pred = rng.integers(0, 4, size=(4, 8, 8))
        whole = accumulate(
            ConfusionMatrix.zeros(4),
            LabelMap(torch.from_numpy(pred)),
            LabelMap(torch.from_numpy(truth)),
        )
        parts = ConfusionMatrix.zeros(4)
        for i in range(4):
            parts = parts.merge(
                accumulate(
                    ConfusionMatrix.zeros(4),
                    LabelMap(torch.from_numpy(pred[i : i + 1])),
                    LabelMap(torch.from_numpy(truth[i : i + 1])),
                )
            )
        np.testing.assert_array_equal(whole.counts, parts.counts)


class TestMiou:
    def test_diagonal_matrix_is_perfect(self):
        assert miou(ConfusionMatrix(np.diag([5, 9, 13]))) == 100.0

    def test_hand_case(self):
        value = miou(ConfusionMatrix(np.array([[50, 50], [0, 100]])))
        assert abs(value - 58.33) < 0.01

    def test_absent_class_excluded_from_mean(self):
        counts = np.zeros((3, 3), dtype=np.int64)
        counts[:2, :2] = np.array([[50, 50], [0, 100]])
        value = miou(ConfusionMatrix(counts))
        assert abs(value - 58.33) < 0.01

    def test_all_zero_denominators_rejected(self):
        with pytest.raises(ValidationError):
            miou(ConfusionMatrix.zeros(3))

    def test_matches_oracle_on_random_matrices(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            counts = rng.integers(0, 40, size=(6, 6))
            counts[rng.integers(0, 6)] = 0
            cm = ConfusionMatrix(counts)
            try:
                got = miou(cm)
            except ValidationError:
                continue
            assert abs(got - miou_oracle(cm.counts)) < 1e-9

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        counts = rng.integers(0, 50, size=(5, 5))
        perm = rng.permutation(5)
        permuted = counts[np.ix_(perm, perm)]
        assert abs(miou(ConfusionMatrix(counts)) - miou(ConfusionMatrix(permuted))) < 1e-9

    def test_per_class_iou_keys(self):
        counts = np.array([[10, 0, 0], [0, 5, 0], [0, 0, 0]])
        per = per_class_iou(ConfusionMatrix(counts))
        assert set(per) == {0, 1}
        assert per[0] == 100.0


def one_pixel_probs(*probs):
    t = torch.tensor(probs, dtype=torch.float64).view(1, len(probs), 1, 1)
    return ProbabilityMap(t)


class TestShannonEntropy:
    def test_one_hot_has_zero_entropy(self):
        stats = shannon_entropy(one_pixel_probs(1.0, 0.0, 0.0, 0.0))
        assert float(stats.values) == 0.0

    def test_uniform_19_matches_log(self):
        p = ProbabilityMap(torch.full((1, 19, 2, 2), 1 / 19, dtype=torch.float64))
        stats = shannon_entropy(p)
        assert abs(float(stats.values[0, 0, 0]) - math.log(19)) < 1e-6
        assert abs(math.log(19) - 2.9444) < 1e-3

    def test_two_point_uniform(self):
        stats = shannon_entropy(one_pixel_probs(0.5, 0.5, 0.0))
        assert abs(float(stats.values) - math.log(2)) < 1e-12

    def test_uniform_is_unique_maximizer(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            raw = rng.dirichlet(np.ones(8))
            if np.abs(raw - 1 / 8).max() < 1e-3:
                continue
            p = ProbabilityMap(torch.from_numpy(raw).view(1, 8, 1, 1))
            assert float(shannon_entropy(p).values) < math.log(8)

    def test_histogram_covers_all_pixels(self):
        torch.manual_seed(0)
        z = torch.randn(2, 6, 9, 9)
        p = ProbabilityMap(torch.softmax(z, dim=1))
        stats = shannon_entropy(p, bins=64)
        assert stats.bin_counts.sum() == 2 * 9 * 9
        assert len(stats.bin_counts) == 64
        assert stats.bin_edges[0] == 0.0
        assert abs(stats.bin_edges[-1] - math.log(6)) < 1e-12

    def test_entropy_values_stay_in_range(self):
        torch.manual_seed(4)
        z = torch.randn(1, 5, 16, 16) * 30
        p = ProbabilityMap(torch.softmax(z, dim=1))
        ent = entropy_map(p)
        assert float(ent.min()) >= 0.0
        assert float(ent.max()) <= math.log(5)
