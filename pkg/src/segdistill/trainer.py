"""Student-only and distillation training loops.

One train() call owns all mutable state: the student, the optional 1x1
feature projection, the discriminator and their optimizers. Teachers are
frozen throughout. The learning rate follows the polynomial decay
mu(i) = mu(0) * (1 - i/eta)^0.9 stepped per batch, and gamma acts as
decoupled weight decay.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import losses as L
from .adversary import AdversarialState, discriminator_step, holistic_student_loss
from .data import DatasetSpec, batch_iterator, load_split
from .datamodel import (
    LabelMap,
    LogitMap,
    LossWeights,
    Temperature,
    softmax,
)
from .exceptions import (
    EmptyBatchError,
    NonFiniteLossError,
    ValidationError,
)
from .losses import FeatureProjection
from .metrics import ConfusionMatrix, accumulate, miou
from .models import TAP_BACKBONE, InitPolicy, SegmentationModel, freeze, save_checkpoint

POLY_POWER = 0.9


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    mu0: float
    gamma: float
    batch_size: int
    eta: int
    temperature: Temperature = Temperature(1.0)
    loss_weights: LossWeights = LossWeights()
    seed: int = 0
    init: InitPolicy = InitPolicy()
    eval_interval: int = 100
    momentum: float = 0.9
    pool_factor: int = 2
    update_ratio: int = 1
    disc_lr: float = 1e-4

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ValidationError("mu0 must be positive")
        if self.gamma < 0:
            raise ValidationError("gamma must be >= 0")
        if self.eta < 1:
            raise ValidationError("eta must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.eval_interval < 1:
            raise ValidationError("eval_interval must be >= 1")


@dataclass
class RunRecord:
    """Everything one run produced, for logs and sweep aggregation."""

    config: dict
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    final_miou: float = 0.0
    best_miou: float = 0.0
    duration_seconds: float = 0.0
    status: str = "ok"

    def to_dict(self) -> dict:
        return asdict(self)


def poly_lr(mu0: float, i: int, eta: int) -> float:
    """Polynomial learning-rate decay mu(i) = mu0 * (1 - i/eta)^0.9."""
    if i < 0 or i > eta:
        raise ValueError(f"step index {i} outside [0, {eta}]")
    return mu0 * (1.0 - i / eta) ** POLY_POWER


def _decoupled_decay(params, lr: float, gamma: float) -> None:
    if gamma == 0:
        return
    with torch.no_grad():
        for p in params:
            p.mul_(1.0 - lr * gamma)


def train(
    student: SegmentationModel,
    teacher: SegmentationModel | None,
    cfg: TrainConfig,
    data: DatasetSpec,
    run_dir: Path | None = None,
) -> RunRecord:
    """Run cfg.eta optimization batches on the student.

    A teacher is required whenever any distillation weight is positive;
    an attached teacher with all-zero weights is never evaluated, so such
    a run reproduces the student-only loss sequence exactly. Non-finite
    losses abort with the offending term named.
    """
    w = cfg.loss_weights
    if w.any_active() and teacher is None:
        raise ValidationError("distillation weights are set but no teacher given")
    if teacher is not None and teacher.class_count != student.class_count:
        raise ValidationError(
            f"teacher has {teacher.class_count} classes, student "
            f"{student.class_count}"
        )
    torch.manual_seed(cfg.seed)
    if teacher is not None:
        freeze(teacher)

    needs_features = w.lambda_pa > 0 or w.lambda_ifv > 0
    projection = None
    if needs_features:
        projection = FeatureProjection(
            student.tap_channels[TAP_BACKBONE], teacher.tap_channels[TAP_BACKBONE]
        )
    adversary = None
    if w.lambda_ho > 0:
        adversary = AdversarialState.create(
            student.class_count,
            lr=cfg.disc_lr,
            update_ratio=cfg.update_ratio,
            seed=cfg.seed + 1,
        )

    train_params = list(student.parameters())
    if projection is not None:
        train_params += list(projection.parameters())
    optimizer = torch.optim.SGD(train_params, lr=cfg.mu0, momentum=cfg.momentum)

    train_split = load_split(data, "train")
    batches = batch_iterator(train_split, cfg.batch_size, cfg.seed, data.crop_size)

    record = RunRecord(config=_config_snapshot(cfg, student, teacher, data))
    best = -1.0
    started = time.monotonic()
    steps_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        steps_file = (run_dir / "steps.jsonl").open("w")

    student.train()
    try:
        for i in range(cfg.eta):
            images, labels = next(batches)
            logits, taps = student(images)

            terms: list[tuple[L.LossValue, float]] = [
                (L.cross_entropy(logits, labels), 1.0)
            ]
            teacher_logits = None
            if w.lambda_pi > 0 or w.lambda_ho > 0:
                with torch.no_grad():
                    teacher_logits, teacher_taps = teacher(images)
            elif needs_features:
                with torch.no_grad():
                    _, teacher_taps = teacher(images)
            if w.lambda_pi > 0:
                terms.append(
                    (
                        L.pixelwise_distillation(logits, teacher_logits, cfg.temperature),
                        w.lambda_pi,
                    )
                )
            if needs_features:
                student_feat = projection(taps[TAP_BACKBONE])
                if w.lambda_pa > 0:
                    terms.append(
                        (
                            L.pairwise_affinity_loss(
                                student_feat, teacher_taps[TAP_BACKBONE], cfg.pool_factor
                            ),
                            w.lambda_pa,
                        )
                    )
                if w.lambda_ifv > 0:
                    terms.append(
                        (
                            L.ifv_loss(student_feat, teacher_taps[TAP_BACKBONE], labels),
                            w.lambda_ifv,
                        )
                    )
            if w.lambda_ho > 0:
                student_probs = softmax(logits)
                with torch.no_grad():
                    teacher_probs = softmax(teacher_logits)
                for _ in range(adversary.update_ratio):
                    discriminator_step(adversary, student_probs, teacher_probs, images)
                terms.append(
                    (holistic_student_loss(adversary, student_probs, images), w.lambda_ho)
                )

            bad = L.first_non_finite_term(terms)
            if bad is not None:
                record.status = "failed"
                raise NonFiniteLossError(bad, step=i)
            report = L.compose(terms)

            lr = poly_lr(cfg.mu0, i, cfg.eta)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            report.total.backward()
            _decoupled_decay(train_params, lr, cfg.gamma)
            optimizer.step()

            step_entry = {"step": i, "lr": lr, **report.as_dict()}
            record.steps.append(step_entry)
            if steps_file:
                steps_file.write(json.dumps(step_entry) + "\n")

            if (i + 1) % cfg.eval_interval == 0 or (i + 1) == cfg.eta:
                score, _ = evaluate(student, data, "val")
                student.train()
                eval_entry = {"step": i, "miou": score}
                record.evals.append(eval_entry)
                if steps_file:
                    steps_file.write(json.dumps({"eval": eval_entry}) + "\n")
                if score > best:
                    best = score
                    if run_dir is not None:
                        save_checkpoint(student, run_dir / "best.pt",
                                        extra={"miou": score, "step": i})
    finally:
        if steps_file:
            steps_file.close()

    record.final_miou = record.evals[-1]["miou"] if record.evals else 0.0
    record.best_miou = best if best >= 0 else record.final_miou
    record.duration_seconds = time.monotonic() - started
    if run_dir is not None:
        save_checkpoint(student, run_dir / "final.pt",
                        extra={"miou": record.final_miou, "step": cfg.eta - 1})
        if adversary is not None:
            save_checkpoint_module(adversary.discriminator, run_dir / "discriminator.pt")
        (run_dir / "summary.json").write_text(
            json.dumps(_summary(record), indent=2, sort_keys=True)
        )
    return record


def save_checkpoint_module(module: torch.nn.Module, path: Path) -> None:
    """Serialize a bare module (e.g. the discriminator) into the run dir."""
    torch.save({k: v.cpu() for k, v in module.state_dict().items()}, path)


def _summary(record: RunRecord) -> dict:
    return {
        "config": record.config,
        "final_miou": record.final_miou,
        "best_miou": record.best_miou,
        "evals": record.evals,
        "duration_seconds": record.duration_seconds,
        "status": record.status,
    }


def _config_snapshot(cfg, student, teacher, data) -> dict:
    return {
        "mu0": cfg.mu0,
        "gamma": cfg.gamma,
        "batch_size": cfg.batch_size,
        "eta": cfg.eta,
        "temperature": cfg.temperature.tau,
        "loss_weights": asdict(cfg.loss_weights),
        "seed": cfg.seed,
        "eval_interval": cfg.eval_interval,
        "momentum": cfg.momentum,
        "pool_factor": cfg.pool_factor,
        "update_ratio": cfg.update_ratio,
        "disc_lr": cfg.disc_lr,
        "student": student.identifier,
        "teacher": teacher.identifier if teacher is not None else None,
        "dataset_root": str(data.root),
        "crop_size": data.crop_size,
    }


def evaluate(
    model: SegmentationModel, data: DatasetSpec, split: str = "val"
) -> tuple[float, ConfusionMatrix]:
    """Whole-image inference over a split; returns mIoU percent and the
    accumulated confusion matrix."""
    dataset = load_split(data, split)
    if len(dataset) == 0:
        raise EmptyBatchError(f"split {split!r} is empty")
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix.zeros(model.class_count)
    with torch.no_grad():
        for image, labelmap in dataset:
            logits, _ = model(image.unsqueeze(0))
            pred = LogitMap(logits.values, logits.class_count).values.argmax(dim=1)
            cm = accumulate(
                cm,
                LabelMap(pred, ignore_id=labelmap.ignore_id),
                labelmap,
            )
    if was_training:
        model.train()
    return miou(cm), cm
