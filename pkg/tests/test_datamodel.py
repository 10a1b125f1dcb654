"""Value types, temperature-scaled softmax and batch validation."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from segdistill.datamodel import (
    LabelMap,
    LogitMap,
    LossWeights,
    ProbabilityMap,
    Temperature,
    softmax,
    validate_batch,
)
from segdistill.exceptions import (
    ClassRangeError,
    NonFiniteError,
    ShapeMismatchError,
    ValidationError,
)
from segdistill.metrics import entropy_map


def logit_map(*values):
    """One-pixel logit map from a flat class-score tuple."""
    t = torch.tensor(values, dtype=torch.float32).view(1, len(values), 1, 1)
    return LogitMap(t)


class TestSoftmax:
    def test_equal_logits_give_uniform(self):
        p = softmax(logit_map(0.0, 0.0, 0.0), Temperature(1.0))
        torch.testing.assert_close(p.values.flatten(), torch.full((3,), 1 / 3))

    def test_log_two_zero_gives_two_thirds_one_third(self):
        p = softmax(logit_map(math.log(2.0), 0.0), Temperature(1.0))
        torch.testing.assert_close(
            p.values.flatten(), torch.tensor([2 / 3, 1 / 3]), atol=1e-6, rtol=0
        )

    def test_constant_shift_invariance(self):
        torch.manual_seed(0)
        z = torch.randn(2, 5, 4, 4)
        for k in (1.0, -3.5, 20.0):
            a = softmax(LogitMap(z)).values
            b = softmax(LogitMap(z + k)).values
            assert (a - b).abs().max() < 1e-6
        # large shifts need float64 inputs for z + k to stay representable
        z64 = z.double()
        a = softmax(LogitMap(z64)).values
        b = softmax(LogitMap(z64 + 1e6)).values
        assert (a - b).abs().max() < 1e-6

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_shift_invariance_property(self, seed):
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(1, 4, 3, 3, generator=g)
        k = float(torch.randn((), generator=g)) * 10
        a = softmax(LogitMap(z)).values
        b = softmax(LogitMap(z + k)).values
        assert (a - b).abs().max() < 1e-6

    def test_softening_raises_entropy_everywhere(self):
        torch.manual_seed(1)
        z = LogitMap(torch.randn(2, 7, 8, 8) * 4)
        e1 = entropy_map(softmax(z, Temperature(1.0)))
        e2 = entropy_map(softmax(z, Temperature(2.0)))
        e16 = entropy_map(softmax(z, Temperature(16.0)))
        assert (e2 >= e1 - 1e-9).all()
        assert (e16 >= e2 - 1e-9).all()

    def test_stable_for_huge_logits(self):
        torch.manual_seed(2)
        z = (torch.rand(1, 6, 5, 5) - 0.5) * 2e4  # |z| up to 1e4
        p = softmax(LogitMap(z), Temperature(1.0))
        assert torch.isfinite(p.values).all()

    def test_non_finite_logits_rejected(self):
        z = torch.zeros(1, 3, 2, 2)
        z[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError):
            LogitMap(z)


class TestTypes:
    def test_probability_rows_must_sum_to_one(self):
        bad = torch.full((1, 2, 1, 1), 0.4)
        with pytest.raises(ValidationError):
            ProbabilityMap(bad)

    def test_probability_range_checked(self):
        bad = torch.tensor([[[[1.2]], [[-0.2]]]])
        with pytest.raises(ValidationError):
            ProbabilityMap(bad)

    def test_class_count_minimum(self):
        with pytest.raises(ValidationError):
            LogitMap(torch.zeros(1, 1, 2, 2))

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValidationError):
            Temperature(0.0)
        with pytest.raises(ValidationError):
            Temperature(-2.0)

    def test_loss_weights_non_negative(self):
        with pytest.raises(ValidationError):
            LossWeights(lambda_pi=-0.1)
        assert not LossWeights().any_active()
        assert LossWeights(lambda_ho=0.01).any_active()

    def test_labels_must_be_integers(self):
        with pytest.raises(ValidationError):
            LabelMap(torch.zeros(1, 2, 2))


class TestValidateBatch:
    def test_matching_batch_passes(self):
        logits = LogitMap(torch.randn(2, 19, 8, 8))
        labels = LabelMap(torch.randint(0, 19, (2, 8, 8)))
        validate_batch(logits, labels)

    def test_out_of_range_label(self):
        logits = LogitMap(torch.randn(1, 19, 4, 4))
        lab = torch.zeros(1, 4, 4, dtype=torch.long)
        lab[0, 0, 0] = 19
        with pytest.raises(ClassRangeError):
            validate_batch(logits, LabelMap(lab, ignore_id=255))

    def test_ignore_id_is_allowed(self):
        logits = LogitMap(torch.randn(1, 19, 4, 4))
        lab = torch.full((1, 4, 4), 255, dtype=torch.long)
        validate_batch(logits, LabelMap(lab, ignore_id=255))

    def test_shape_mismatch(self):
        logits = LogitMap(torch.randn(2, 19, 8, 8))
        labels = LabelMap(torch.zeros(2, 4, 4, dtype=torch.long))
        with pytest.raises(ShapeMismatchError):
            validate_batch(logits, labels)
