"""Discriminator scoring, LSGAN objectives and the alternating update."""

import pytest
import torch
from torch import nn

from segdistill.adversary import (
    AdversarialState,
    SegmentationDiscriminator,
    discriminator_forward,
    discriminator_step,
    holistic_student_loss,
)
from segdistill.datamodel import ProbabilityMap
from segdistill.exceptions import ShapeMismatchError, ValidationError


def random_probs(batch, classes, size, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, classes, size, size, generator=g)
    return ProbabilityMap(torch.softmax(z, dim=1))


def random_images(batch, size, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, 3, size, size, generator=g)


class FixedScoreDiscriminator(nn.Module):
    """Test double emitting preset per-element scores."""

    def __init__(self, scores):
        super().__init__()
        self.scores = torch.tensor(scores, dtype=torch.float32)
        self.dummy = nn.Parameter(torch.zeros(1))  # keeps the optimizer happy

    def forward(self, probs, image):
        return self.scores + self.dummy.sum()


class ScoreByInput(nn.Module):
    """Test double scoring one known tensor differently from all others."""

    def __init__(self, match, match_score, other_score):
        super().__init__()
        self.match = match
        self.match_score = match_score
        self.other_score = other_score
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, p, image):
        value = self.match_score if torch.equal(p, self.match) else self.other_score
        return torch.full((p.shape[0],), float(value)) + self.dummy.sum()


def fixed_state(scores):
    return AdversarialState(FixedScoreDiscriminator(scores))


class TestDiscriminatorForward:
    def test_deterministic_given_parameters_and_inputs(self):
        state = AdversarialState.create(4, seed=3)
        probs = random_probs(2, 4, 16)
        image = random_images(2, 16)
        a = discriminator_forward(state, probs, image).score
        b = discriminator_forward(state, probs, image).score
        torch.testing.assert_close(a, b)

    def test_one_score_per_batch_element(self):
        state = AdversarialState.create(5, seed=0)
        scores = discriminator_forward(
            state, random_probs(3, 5, 16), random_images(3, 16)
        ).score
        assert tuple(scores.shape) == (3,)

    def test_zeroed_head_scores_zero(self):
        state = AdversarialState.create(4, seed=0)
        with torch.no_grad():
            state.discriminator.head.weight.zero_()
            state.discriminator.head.bias.zero_()
        scores = discriminator_forward(
            state, random_probs(3, 4, 16), random_images(3, 16)
        ).score
        torch.testing.assert_close(scores, torch.zeros(3))

    def test_spatial_mismatch_rejected(self):
        state = AdversarialState.create(4, seed=0)
        with pytest.raises(ShapeMismatchError):
            discriminator_forward(state, random_probs(1, 4, 16), random_images(1, 8))


class TestHolisticStudentLoss:
    def test_scores_at_one_are_optimal(self):
        loss = holistic_student_loss(
            fixed_state([1.0, 1.0]), random_probs(2, 4, 8), random_images(2, 8)
        )
        assert loss.item() == pytest.approx(0.0)

    def test_scores_at_zero_cost_one(self):
        loss = holistic_student_loss(
            fixed_state([0.0, 0.0, 0.0]), random_probs(3, 4, 8), random_images(3, 8)
        )
        assert loss.item() == pytest.approx(1.0)

    def test_mixed_scores_arithmetic(self):
        loss = holistic_student_loss(
            fixed_state([0.5, 1.5]), random_probs(2, 4, 8), random_images(2, 8)
        )
        assert loss.item() == pytest.approx(0.25)

    def test_gradient_reaches_student_not_discriminator(self):
        state = AdversarialState.create(4, seed=1)
        z = torch.randn(2, 4, 16, 16, requires_grad=True)
        probs = ProbabilityMap(torch.softmax(z, dim=1))
        loss = holistic_student_loss(state, probs, random_images(2, 16))
        loss.value.backward()
        assert z.grad is not None and z.grad.abs().sum() > 0
        for p in state.discriminator.parameters():
            assert p.grad is None
            assert p.requires_grad  # restored after the frozen forward


class TestDiscriminatorStep:
    def test_separated_scores_are_optimal(self):
        # teacher scored 1, student scored 0 is the LSGAN optimum
        teacher = random_probs(2, 4, 8, seed=8)
        state = AdversarialState(ScoreByInput(teacher.values, 1.0, 0.0))
        loss = discriminator_step(
            state, random_probs(2, 4, 8, seed=9), teacher, random_images(2, 8)
        )
        assert loss.item() == pytest.approx(0.0)

    def test_swapped_scores_cost_two(self):
        student = random_probs(2, 4, 8, seed=9)
        state = AdversarialState(ScoreByInput(student.values, 1.0, 0.0))
        loss = discriminator_step(
            state, student, random_probs(2, 4, 8, seed=10), random_images(2, 8)
        )
        assert loss.item() == pytest.approx(2.0)

    def test_no_gradient_reaches_segmentation_models(self):
        state = AdversarialState.create(4, seed=2)
        zs = torch.randn(2, 4, 16, 16, requires_grad=True)
        zt = torch.randn(2, 4, 16, 16, requires_grad=True)
        discriminator_step(
            state,
            ProbabilityMap(torch.softmax(zs, dim=1)),
            ProbabilityMap(torch.softmax(zt, dim=1)),
            random_images(2, 16),
        )
        assert zs.grad is None
        assert zt.grad is None
        grads = [p.grad for p in state.discriminator.parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in grads)

    def test_repeated_steps_descend_to_floor(self):
        state = AdversarialState.create(4, seed=4, lr=0.02)
        student = random_probs(2, 4, 16, seed=5)
        teacher = random_probs(2, 4, 16, seed=6)
        image = random_images(2, 16, seed=7)
        floor = 0.05
        prev = None
        for _ in range(300):
            loss = discriminator_step(state, student, teacher, image).item()
            if prev is not None and prev > floor:
                assert loss < prev
            if loss <= floor:
                break
            prev = loss
        assert loss <= floor

    def test_identical_outputs_get_identical_scores(self):
        state = AdversarialState.create(4, seed=8)
        probs = random_probs(2, 4, 16)
        image = random_images(2, 16)
        s = discriminator_forward(state, probs, image).score
        t = discriminator_forward(state, ProbabilityMap(probs.values.clone()), image).score
        torch.testing.assert_close(s, t)


class TestAdversarialState:
    def test_update_ratio_must_be_positive(self):
        with pytest.raises(ValidationError):
            AdversarialState(SegmentationDiscriminator(4), update_ratio=0)

    def test_seeded_creation_is_reproducible(self):
        a = AdversarialState.create(4, seed=11)
        b = AdversarialState.create(4, seed=11)
        for pa, pb in zip(a.discriminator.parameters(), b.discriminator.parameters()):
            torch.testing.assert_close(pa, pb, rtol=0, atol=0)
