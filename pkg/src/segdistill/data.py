"""Dataset ingestion, augmentation and the synthetic desk-scale generator.

Datasets live on disk as ``{images,labels}/{train,val}/*.png`` plus a
``manifest.json`` naming class_count, ignore id and split sizes. Labels
are single-channel PNGs; an optional remap table (e.g. the Cityscapes
raw-id table) rewrites raw ids to training ids, everything unmapped
becoming the ignore id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .datamodel import DEFAULT_IGNORE_ID, LabelMap
from .exceptions import ClassRangeError, PairingError, ValidationError

MANIFEST_NAME = "manifest.json"

# per-channel normalization used by the common pretrained backbones
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset lives and how to read it."""

    root: Path
    class_count: int
    ignore_id: int = DEFAULT_IGNORE_ID
    crop_size: int = 64
    split_sizes: dict = field(default_factory=dict)
    image_suffix: str = ".png"
    label_suffix: str = ".png"
    normalize_mean: tuple = IMAGENET_MEAN
    normalize_std: tuple = IMAGENET_STD
    label_remap: dict | None = None

    def __post_init__(self):
        if self.crop_size <= 0:
            raise ValidationError("crop_size must be positive")
        object.__setattr__(self, "root", Path(self.root))

    @classmethod
    def from_manifest(cls, root: str | Path, **overrides) -> "DatasetSpec":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        if not manifest_path.exists():
            raise ValidationError(f"no {MANIFEST_NAME} under {root}")
        manifest = json.loads(manifest_path.read_text())
        spec = cls(
            root=root,
            class_count=manifest["class_count"],
            ignore_id=manifest.get("ignore_id", DEFAULT_IGNORE_ID),
            crop_size=manifest.get("image_size", 64),
            split_sizes=manifest.get("splits", {}),
        )
        return replace(spec, **overrides) if overrides else spec


def load_cityscapes_remap() -> dict[int, int]:
    """The published raw-id -> train-id table, shipped as a text fixture."""
    text = (
        resources.files("segdistill.fixtures")
        .joinpath("cityscapes_train_ids.txt")
        .read_text()
    )
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        raw, train = line.split()
        table[int(raw)] = int(train)
    return table


def _remap_lookup(spec: DatasetSpec) -> np.ndarray | None:
    if spec.label_remap is None:
        return None
    lut = np.full(256, spec.ignore_id, dtype=np.int64)
    for raw, train in spec.label_remap.items():
        lut[raw] = train
    return lut


class SplitDataset:
    """Random-access view of one split; ordering is stable across runs."""

    def __init__(self, spec: DatasetSpec, split: str):
        self.spec = spec
        self.split = split
        image_dir = spec.root / "images" / split
        label_dir = spec.root / "labels" / split
        if not image_dir.is_dir():
            raise ValidationError(f"missing split directory {image_dir}")
        self.image_paths = sorted(image_dir.glob(f"*{spec.image_suffix}"))
        if not self.image_paths:
            raise ValidationError(f"split {split!r} under {spec.root} is empty")
        self.label_paths = []
        for img in self.image_paths:
            name = img.name[: -len(spec.image_suffix)] + spec.label_suffix
            lab = label_dir / name
            if not lab.exists():
                raise PairingError(f"image {img.name} has no label file {lab}")
            self.label_paths.append(lab)
        self._lut = _remap_lookup(spec)
        mean = torch.tensor(spec.normalize_mean).view(3, 1, 1)
        std = torch.tensor(spec.normalize_std).view(3, 1, 1)
        self._mean, self._std = mean, std

    def __len__(self) -> int:
        return len(self.image_paths)

    def sample_ids(self) -> list[str]:
        return [p.stem for p in self.image_paths]

    def __getitem__(self, idx: int) -> tuple[torch.Tensor, LabelMap]:
        img = np.array(Image.open(self.image_paths[idx]).convert("RGB"))
        image = torch.from_numpy(img).permute(2, 0, 1).float() / 255.0
        image = (image - self._mean) / self._std
        raw = np.array(Image.open(self.label_paths[idx]))
        if raw.ndim != 2:
            raise ValidationError(f"label {self.label_paths[idx]} is not single-channel")
        if image.shape[1:] != raw.shape:
            raise PairingError(
                f"{self.image_paths[idx].name}: image {tuple(image.shape[1:])} vs "
                f"label {raw.shape}"
            )
        lab = raw.astype(np.int64)
        if self._lut is not None:
            lab = self._lut[lab]
        else:
            bad = (lab != self.spec.ignore_id) & (
                (lab < 0) | (lab >= self.spec.class_count)
            )
            if bad.any():
                raise ClassRangeError(
                    f"{self.label_paths[idx].name}: unmapped label id "
                    f"{int(lab[bad][0])}"
                )
        label = torch.from_numpy(lab).unsqueeze(0)
        return image, LabelMap(label, ignore_id=self.spec.ignore_id)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_split(spec: DatasetSpec, split: str) -> SplitDataset:
    """Open one split; validation ordering is deterministic (sorted names)."""
    return SplitDataset(spec, split)


def augment(
    image: torch.Tensor,
    label: torch.Tensor,
    crop_size: int,
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Random scale, horizontal flip and crop, identical on image and label.

    image is (3, H, W) float, label (H, W) integer. Label padding and
    resizing use the ignore-preserving nearest mode; the same seed always
    yields the same output.
    """
    rng = np.random.default_rng(seed)
    scale = float(rng.uniform(0.5, 2.0))
    flip = bool(rng.random() < 0.5)
    h, w = image.shape[1:]
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    img = F.interpolate(
        image.unsqueeze(0), size=(nh, nw), mode="bilinear", align_corners=False
    ).squeeze(0)
    lab = (
        F.interpolate(label.view(1, 1, h, w).float(), size=(nh, nw), mode="nearest")
        .view(nh, nw)
        .long()
    )
    if flip:
        img = torch.flip(img, dims=[2])
        lab = torch.flip(lab, dims=[1])
    pad_h = max(0, crop_size - nh)
    pad_w = max(0, crop_size - nw)
    if pad_h or pad_w:
        img = F.pad(img, (0, pad_w, 0, pad_h), value=0.0)
        lab = F.pad(lab, (0, pad_w, 0, pad_h), value=DEFAULT_IGNORE_ID)
    top = int(rng.integers(0, img.shape[1] - crop_size + 1))
    left = int(rng.integers(0, img.shape[2] - crop_size + 1))
    img = img[:, top : top + crop_size, left : left + crop_size]
    lab = lab[top : top + crop_size, left : left + crop_size]
    return img, lab


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Colored geometric shapes on a textured background."""

    out_dir: Path
    image_size: int = 64
    class_count: int = 4  # background + shape classes
    shapes_per_image: int = 3
    train_count: int = 200
    val_count: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValidationError("need at least background + one shape class")
        object.__setattr__(self, "out_dir", Path(self.out_dir))


def _class_palette(class_count: int) -> np.ndarray:
    """Base colors per class; class 0 (background) gets a mid gray.

    Colors are distinct per class; the per-shape jitter makes nearby
    entries overlap, so shape remains informative for ambiguous draws.
    """
    wheel = [
        (0.85, 0.35, 0.30),
        (0.30, 0.65, 0.85),
        (0.85, 0.55, 0.28),
        (0.55, 0.30, 0.75),
        (0.30, 0.80, 0.40),
        (0.85, 0.55, 0.75),
    ]
    colors = np.zeros((class_count, 3), dtype=np.float64)
    colors[0] = (0.45, 0.45, 0.45)
    for c in range(1, class_count):
        colors[c] = wheel[(c - 1) % len(wheel)]
    return colors


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Pixel-exact mask of one randomly placed shape on an size x size grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = rng.uniform(0.2 * size, 0.8 * size)
    cx = rng.uniform(0.2 * size, 0.8 * size)
    r = rng.uniform(0.17 * size, 0.30 * size)
    if kind == 0:  # circle
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:  # rotated rectangle
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (np.abs(u) <= r * 1.5) & (np.abs(v) <= r * 0.55)
    # triangle: three half-plane tests around the centroid
    theta = rng.uniform(0, 2 * np.pi)
    angles = theta + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
    px = cx + 1.4 * r * np.cos(angles)
    py = cy + 1.4 * r * np.sin(angles)
    mask = np.ones((size, size), dtype=bool)
    for i in range(3):
        x1, y1 = px[i], py[i]
        x2, y2 = px[(i + 1) % 3], py[(i + 1) % 3]
        cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        ref = (x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1)
        mask &= cross * ref >= 0
    return mask


def _render_scene(
    cfg: SyntheticSceneConfig, rng: np.random.Generator, palette: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    size = cfg.image_size
    # dark desaturated background so figure/ground is unambiguous; the
    # class-vs-class ambiguity comes from the shape color jitter instead
    luma = rng.uniform(0.10, 0.28)
    base = luma + rng.uniform(-0.03, 0.03, size=3)
    coarse = rng.normal(0.0, 1.0, size=(3, 8, 8))
    up = torch.from_numpy(coarse).unsqueeze(0)
    texture = (
        F.interpolate(up, size=(size, size), mode="bilinear", align_corners=False)
        .squeeze(0)
        .numpy()
    )
    image = base[:, None, None] + 0.05 * texture
    image += rng.normal(0.0, 0.015, size=image.shape)
    label = np.zeros((size, size), dtype=np.uint8)
    for _ in range(cfg.shapes_per_image):
        cls = int(rng.integers(1, cfg.class_count))
        kind = (cls - 1) % 3
        mask = _shape_mask(kind, size, rng)
        color = palette[cls] + rng.normal(0.0, 0.11, size=3)
        for ch in range(3):
            image[ch][mask] = color[ch] + rng.normal(0.0, 0.03, size=int(mask.sum()))
        label[mask] = cls
    image = np.clip(image, 0.0, 1.0)
    return (image * 255.0).round().astype(np.uint8).transpose(1, 2, 0), label


def generate_synthetic(config: SyntheticSceneConfig) -> Path:
    """Write a fully seeded synthetic dataset in the standard layout.

    The same config (including seed) produces byte-identical files.
    """
    palette = _class_palette(config.class_count)
    root = config.out_dir
    for split, count in (("train", config.train_count), ("val", config.val_count)):
        (root / "images" / split).mkdir(parents=True, exist_ok=True)
        (root / "labels" / split).mkdir(parents=True, exist_ok=True)
        for idx in range(count):
            rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, 0 if split == "train" else 1, idx])
            )
            image, label = _render_scene(config, rng, palette)
            name = f"{idx:05d}.png"
            Image.fromarray(image).save(root / "images" / split / name)
            Image.fromarray(label).save(root / "labels" / split / name)
    manifest = {
        "class_count": config.class_count,
        "ignore_id": DEFAULT_IGNORE_ID,
        "image_size": config.image_size,
        "seed": config.seed,
        "shapes_per_image": config.shapes_per_image,
        "splits": {"train": config.train_count, "val": config.val_count},
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def batch_iterator(
    dataset: SplitDataset,
    batch_size: int,
    seed: int,
    crop_size: int | None = None,
    shuffle: bool = True,
):
    """Yield (images, LabelMap) batches forever, reshuffling each epoch.

    Augmentation seeds derive from (seed, epoch, sample index), so a run
    is reproducible with single-worker loading. Each sample is delivered
    exactly once per epoch.
    """
    crop = crop_size or dataset.spec.crop_size
    epoch = 0
    while True:
        order = np.arange(len(dataset))
        if shuffle:
            np.random.default_rng(np.random.SeedSequence([seed, epoch])).shuffle(order)
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk) < batch_size and len(order) >= batch_size:
                break  # drop ragged tail; epoch boundaries reshuffle anyway
            images, labels = [], []
            for pos, idx in enumerate(chunk):
                image, labelmap = dataset[int(idx)]
                aug_seed = int(
                    np.random.SeedSequence([seed, epoch, int(idx), 7]).generate_state(1)[0]
                )
                img, lab = augment(image, labelmap.values[0], crop, aug_seed)
                images.append(img)
                labels.append(lab)
            yield (
                torch.stack(images),
                LabelMap(torch.stack(labels), ignore_id=dataset.spec.ignore_id),
            )
        epoch += 1
