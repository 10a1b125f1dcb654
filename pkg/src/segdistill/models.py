"""Model registry and the adapter contract that makes teachers and
students interchangeable to the trainer.

Every registered model maps (B, 3, H, W) images to logits at input
resolution plus the feature maps of its declared tap points. Two toy
nets ship for desk-scale work; the PSP-style benchmark variants are
registry entries expected to load externally supplied weights (ImageNet
backbones are never re-trained here).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import FeatureMap, LogitMap
from .exceptions import CheckpointError, UnknownModelError, UnknownTapError, ValidationError

TAP_BACKBONE = "backbone"

CHECKPOINT_FORMAT = "segdistill-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class InitPolicy:
    """How to initialize parameters: seeded random or an external file."""

    mode: str = "random"
    weight_source: str | Path | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random", "pretrained"):
            raise ValidationError(f"init mode must be random|pretrained, got {self.mode!r}")
        if self.mode == "pretrained" and not self.weight_source:
            raise ValidationError("pretrained init requires a weight_source")


class SegmentationModel(nn.Module):
    """Base contract: forward() returns logits plus requested tap features."""

    identifier: str = ""
    class_count: int = 0

    @property
    def tap_points(self) -> tuple[str, ...]:
        return (TAP_BACKBONE,)

    @property
    def tap_channels(self) -> dict[str, int]:
        raise NotImplementedError

    def compute(self, images: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Return logits at input resolution and all tap tensors."""
        raise NotImplementedError

    def forward(
        self, images: torch.Tensor, taps: tuple[str, ...] | None = None
    ) -> tuple[LogitMap, dict[str, FeatureMap]]:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValidationError(
                f"expected images of shape (B, 3, H, W), got {tuple(images.shape)}"
            )
        wanted = self.tap_points if taps is None else taps
        for name in wanted:
            if name not in self.tap_points:
                raise UnknownTapError(
                    f"tap {name!r} not declared by {self.identifier!r}; "
                    f"available: {list(self.tap_points)}"
                )
        logits, features = self.compute(images)
        out_taps = {
            name: FeatureMap(features[name], source_layer=name) for name in wanted
        }
        return LogitMap(logits, self.class_count), out_taps

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class PyramidContext(nn.Module):
    """Pyramid-pooling context: pooled 1x1 convs at several grid sizes,
    upsampled and fused with the input features."""

    def __init__(self, channels: int, pool_sizes: tuple[int, ...] = (1, 2, 3, 6)):
        super().__init__()
        branch_width = channels // len(pool_sizes)
        self.pool_sizes = pool_sizes
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(channels, branch_width, kernel_size=1, bias=False),
                nn.ReLU(inplace=True),
            )
            for _ in pool_sizes
        )
        fused_in = channels + branch_width * len(pool_sizes)
        self.fuse = nn.Sequential(
            nn.Conv2d(fused_in, channels, kernel_size=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[2:]
        outs = [x]
        for size, branch in zip(self.pool_sizes, self.branches):
            pooled = F.adaptive_avg_pool2d(x, size)
            outs.append(
                F.interpolate(branch(pooled), size=(h, w), mode="bilinear",
                              align_corners=False)
            )
        return self.fuse(torch.cat(outs, dim=1))


class ToyStudentNet(SegmentationModel):
    """3 conv blocks (~30k parameters), output stride 4."""

    def __init__(self, class_count: int):
        super().__init__()
        self.identifier = "toy_student"
        self.class_count = class_count
        self.stem = nn.Sequential(
            _conv_block(3, 32, stride=2),
            _conv_block(32, 40, stride=2),
            _conv_block(40, 56),
        )
        self.head = nn.Conv2d(56, class_count, kernel_size=1)

    @property
    def tap_channels(self) -> dict[str, int]:
        return {TAP_BACKBONE: 56}

    def compute(self, images):
        feat = self.stem(images)
        logits = F.interpolate(
            self.head(feat), size=images.shape[2:], mode="bilinear",
            align_corners=False,
        )
        return logits, {TAP_BACKBONE: feat}


class ToyTeacherNet(SegmentationModel):
    """6 conv blocks plus a pyramid context block (~350k parameters)."""

    def __init__(self, class_count: int):
        super().__init__()
        self.identifier = "toy_teacher"
        self.class_count = class_count
        self.stem = nn.Sequential(
            _conv_block(3, 32, stride=2),
            _conv_block(32, 64, stride=2),
            _conv_block(64, 64),
            _conv_block(64, 96),
            _conv_block(96, 96),
            _conv_block(96, 128),
        )
        self.context = PyramidContext(128)
        self.head = nn.Conv2d(128, class_count, kernel_size=1)

    @property
    def tap_channels(self) -> dict[str, int]:
        return {TAP_BACKBONE: 128}

    def compute(self, images):
        feat = self.stem(images)
        ctx = self.context(feat)
        logits = F.interpolate(
            self.head(ctx), size=images.shape[2:], mode="bilinear",
            align_corners=False,
        )
        return logits, {TAP_BACKBONE: feat}


class PSPNet(SegmentationModel):
    """Pyramid-pooling segmentation net over a torchvision backbone.

    Backbones are built without downloaded weights; benchmark use loads
    an externally supplied checkpoint through the registry instead.
    ResNet backbones are dilated to output stride 8. The standard
    auxiliary head is off by default (aux_head=True adds it).
    """

    BACKBONES = ("resnet18", "resnet101", "efficientnet_b0")

    def __init__(self, class_count: int, backbone: str = "resnet18",
                 aux_head: bool = False):
        super().__init__()
        if backbone not in self.BACKBONES:
            raise ValidationError(f"unsupported backbone {backbone!r}")
        import torchvision.models as tvm

        self.identifier = f"pspnet_{backbone}"
        self.class_count = class_count
        self.backbone_name = backbone
        if backbone.startswith("resnet"):
            # dilation to output stride 8 needs Bottleneck blocks (resnet50+)
            dilate = [False, True, True] if backbone == "resnet101" else None
            net = getattr(tvm, backbone)(
                weights=None, replace_stride_with_dilation=dilate
            )
            self.features = nn.Sequential(
                net.conv1, net.bn1, net.relu, net.maxpool,
                net.layer1, net.layer2, net.layer3, net.layer4,
            )
            width = 512 if backbone == "resnet18" else 2048
        else:
            net = tvm.efficientnet_b0(weights=None)
            self.features = net.features
            width = 1280
        self._tap_width = width
        self.context = PyramidContext(width)
        self.head = nn.Conv2d(width, class_count, kernel_size=1)
        self.aux = nn.Conv2d(width, class_count, kernel_size=1) if aux_head else None

    @property
    def tap_channels(self) -> dict[str, int]:
        return {TAP_BACKBONE: self._tap_width}

    def compute(self, images):
        feat = self.features(images)
        ctx = self.context(feat)
        logits = F.interpolate(
            self.head(ctx), size=images.shape[2:], mode="bilinear",
            align_corners=False,
        )
        return logits, {TAP_BACKBONE: feat}


ModelFactory = Callable[..., SegmentationModel]

MODEL_REGISTRY: dict[str, ModelFactory] = {}


def register_model(name: str):
    def wrap(factory: ModelFactory) -> ModelFactory:
        MODEL_REGISTRY[name] = factory
        return factory
    return wrap


register_model("toy_student")(ToyStudentNet)
register_model("toy_teacher")(ToyTeacherNet)
register_model("pspnet_resnet18")(
    lambda class_count, **kw: PSPNet(class_count, backbone="resnet18", **kw)
)
register_model("pspnet_resnet101")(
    lambda class_count, **kw: PSPNet(class_count, backbone="resnet101", **kw)
)
register_model("pspnet_efficientnet_b0")(
    lambda class_count, **kw: PSPNet(class_count, backbone="efficientnet_b0", **kw)
)


def build_model(
    name: str,
    init: InitPolicy,
    class_count: int,
    config: dict | None = None,
) -> SegmentationModel:
    """Instantiate a registered model with the requested initialization.

    Random initialization is seeded and bit-reproducible; pretrained
    initialization loads a checkpoint written by this framework.
    """
    if name not in MODEL_REGISTRY:
        raise UnknownModelError(
            f"unknown model {name!r}; registered: {sorted(MODEL_REGISTRY)}"
        )
    factory = MODEL_REGISTRY[name]
    with torch.random.fork_rng():
        torch.manual_seed(init.seed)
        model = factory(class_count=class_count, **(config or {}))
    if init.mode == "pretrained":
        data = load_checkpoint(init.weight_source)
        _load_state(model, data)
    return model


def save_checkpoint(model: SegmentationModel, path: str | Path,
                    extra: dict | None = None) -> Path:
    """Write a self-describing checkpoint: parameters plus the model spec."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_name": model.identifier,
        "class_count": model.class_count,
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        data = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return data


def _load_state(model: SegmentationModel, data: dict) -> None:
    if data["class_count"] != model.class_count:
        raise CheckpointError(
            f"checkpoint has {data['class_count']} classes, model expects "
            f"{model.class_count}"
        )
    try:
        model.load_state_dict(data["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not fit the model: {exc}") from exc


def build_from_checkpoint(path: str | Path, config: dict | None = None) -> SegmentationModel:
    """Rebuild the exact model a checkpoint was saved from."""
    data = load_checkpoint(path)
    model = build_model(
        data["model_name"],
        InitPolicy(mode="random", seed=0),
        class_count=data["class_count"],
        config=config,
    )
    _load_state(model, data)
    return model


def hash_parameters(model: nn.Module) -> str:
    """SHA-256 over all named parameters and buffers; order-stable."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def freeze(model: nn.Module) -> nn.Module:
    """Put a model into frozen-teacher mode: eval + no gradients."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
