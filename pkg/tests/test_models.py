"""Model registry, toy nets, checkpoint round trips and freezing."""

import pytest
import torch

from segdistill.exceptions import (
    CheckpointError,
    UnknownModelError,
    UnknownTapError,
    ValidationError,
)
from segdistill.models import (
    InitPolicy,
    PSPNet,
    build_from_checkpoint,
    build_model,
    freeze,
    hash_parameters,
    load_checkpoint,
    save_checkpoint,
)


class TestBuildModel:
    def test_seeded_build_is_bit_identical(self):
        a = build_model("toy_student", InitPolicy(seed=7), class_count=4)
        b = build_model("toy_student", InitPolicy(seed=7), class_count=4)
        assert hash_parameters(a) == hash_parameters(b)

    def test_different_seeds_differ(self):
        a = build_model("toy_student", InitPolicy(seed=7), class_count=4)
        b = build_model("toy_student", InitPolicy(seed=8), class_count=4)
        assert hash_parameters(a) != hash_parameters(b)

    def test_unknown_name_rejected_with_listing(self):
        with pytest.raises(UnknownModelError, match="toy_student"):
            build_model("pspnet_resnet999", InitPolicy(), class_count=19)

    def test_pretrained_round_trip(self, tmp_path):
        teacher = build_model("toy_teacher", InitPolicy(seed=3), class_count=4)
        path = save_checkpoint(teacher, tmp_path / "teacher.pt")
        again = build_model(
            "toy_teacher",
            InitPolicy(mode="pretrained", weight_source=path, seed=99),
            class_count=4,
        )
        assert hash_parameters(again) == hash_parameters(teacher)

    def test_pretrained_requires_source(self):
        with pytest.raises(ValidationError):
            InitPolicy(mode="pretrained")

    def test_class_count_mismatch_rejected(self, tmp_path):
        teacher = build_model("toy_teacher", InitPolicy(seed=3), class_count=4)
        path = save_checkpoint(teacher, tmp_path / "teacher.pt")
        with pytest.raises(CheckpointError):
            build_model(
                "toy_teacher",
                InitPolicy(mode="pretrained", weight_source=path),
                class_count=19,
            )

    def test_missing_checkpoint_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.pt")

    def test_garbage_checkpoint_file(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


class TestForward:
    def test_logit_shape_contract(self):
        model = build_model("toy_student", InitPolicy(seed=0), class_count=4)
        logits, taps = model(torch.randn(2, 3, 64, 64))
        assert tuple(logits.values.shape) == (2, 4, 64, 64)
        assert "backbone" in taps

    def test_eval_mode_is_deterministic(self):
        model = build_model("toy_student", InitPolicy(seed=0), class_count=4).eval()
        x = torch.randn(1, 3, 32, 32)
        with torch.no_grad():
            a, _ = model(x)
            b, _ = model(x)
        torch.testing.assert_close(a.values, b.values)

    def test_undeclared_tap_rejected(self):
        model = build_model("toy_student", InitPolicy(seed=0), class_count=4)
        with pytest.raises(UnknownTapError):
            model(torch.randn(1, 3, 32, 32), taps=("layer9",))

    def test_wrong_channel_count_rejected(self):
        model = build_model("toy_student", InitPolicy(seed=0), class_count=4)
        with pytest.raises(ValidationError):
            model(torch.randn(1, 1, 32, 32))

    def test_tap_channels_declared(self):
        student = build_model("toy_student", InitPolicy(), class_count=4)
        teacher = build_model("toy_teacher", InitPolicy(), class_count=4)
        assert student.tap_channels["backbone"] == 56
        assert teacher.tap_channels["backbone"] == 128


class TestCapacityAndFreeze:
    def test_student_is_smaller_than_teacher(self):
        student = build_model("toy_student", InitPolicy(), class_count=4)
        teacher = build_model("toy_teacher", InitPolicy(), class_count=4)
        assert student.parameter_count() < teacher.parameter_count()

    def test_frozen_teacher_unchanged_by_forward(self):
        teacher = freeze(build_model("toy_teacher", InitPolicy(seed=1), class_count=4))
        before = hash_parameters(teacher)
        with torch.no_grad():
            teacher(torch.randn(2, 3, 32, 32))
        assert hash_parameters(teacher) == before
        assert all(not p.requires_grad for p in teacher.parameters())

    def test_checkpoint_is_self_describing(self, tmp_path):
        model = build_model("toy_student", InitPolicy(seed=2), class_count=4)
        path = save_checkpoint(model, tmp_path / "m.pt", extra={"miou": 50.0})
        data = load_checkpoint(path)
        assert data["model_name"] == "toy_student"
        assert data["class_count"] == 4
        assert data["extra"]["miou"] == 50.0
        rebuilt = build_from_checkpoint(path)
        assert hash_parameters(rebuilt) == hash_parameters(model)


class TestBenchmarkVariants:
    def test_pspnet_resnet18_constructs_and_runs(self):
        model = build_model("pspnet_resnet18", InitPolicy(seed=0), class_count=19)
        with torch.no_grad():
            logits, taps = model.eval()(torch.randn(1, 3, 64, 64))
        assert tuple(logits.values.shape) == (1, 19, 64, 64)
        assert taps["backbone"].values.shape[1] == 512

    def test_registry_covers_benchmark_entries(self):
        from segdistill.models import MODEL_REGISTRY

        for name in ("pspnet_resnet18", "pspnet_resnet101", "pspnet_efficientnet_b0"):
            assert name in MODEL_REGISTRY

    def test_unsupported_backbone_rejected(self):
        with pytest.raises(ValidationError):
            PSPNet(class_count=19, backbone="vgg11")
