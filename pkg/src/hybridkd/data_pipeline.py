"""Dataset manifests, splits, one-vs-rest construction, augmentation and batching.

A :class:`DatasetManifest` is a flat list of samples (path, label, split). The
same manifest type describes on-disk image folders and the in-memory synthetic
toy set; for the latter ``arrays`` maps each pseudo-path to a (3, H, W) float
array.

Randomness: every stochastic choice is drawn from ``numpy.random.default_rng``
seeded with an explicit tuple, ``(seed,)`` for splits and negative sampling and
``(seed, epoch)`` for the per-epoch shuffle plus augmentation. Augmentation
parameters are drawn per sample in batch order, in the order
hflip, vflip, rotation, jitter (brightness, contrast, saturation), affine
(tx, ty, scale).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image, UnidentifiedImageError
from torchvision.transforms import InterpolationMode

from .nn_core import ConfigurationError

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")
SPLITS = ("train", "val", "test")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# per-variety image counts of the rice-seed purity set (positives, negatives)
RICE_SEED_TABLE = {
    "BC-15": (1834, 1925),
    "Huong Thom-1": (2116, 2200),
    "Nep-87": (1399, 1468),
    "Q-5": (1924, 2020),
    "TBR-36": (1136, 1192),
    "TBR-45": (1140, 1197),
    "TH-35": (1012, 1062),
    "Thien Uu-8": (1026, 1077),
    "Xi-23": (2340, 2239),
}


class DataError(RuntimeError):
    """Dataset content is missing, unreadable or insufficient."""


@dataclass
class Sample:
    path: str
    label: int
    split: str | None = None


@dataclass
class DatasetManifest:
    class_names: list[str]
    samples: list[Sample]
    seed: int | None = None
    diagnostics: list[str] = field(default_factory=list)
    source: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] | None = field(default=None, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def class_counts(self, split: str | None = None) -> list[int]:
        counts = [0] * self.num_classes
        for s in self.samples:
            if split is None or s.split == split:
                counts[s.label] += 1
        return counts

    def to_json(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "samples": [asdict(s) for s in self.samples],
            "seed": self.seed,
            "diagnostics": list(self.diagnostics),
            "source": self.source,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetManifest":
        m = cls(list(data["class_names"]), [Sample(**s) for s in data["samples"]],
                data.get("seed"), list(data.get("diagnostics", [])), dict(data.get("source", {})))
        if m.source.get("kind") == "toy":
            toy = make_toy_dataset(**m.source["params"])
            m.arrays = toy.arrays
        return m


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True))


def load_manifest(path: str | Path) -> DatasetManifest:
    return DatasetManifest.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# folder scanning and splitting


def scan_image_folder(root: str | Path) -> DatasetManifest:
    """Enumerate ``root/<class>/<image>`` in sorted order, checking each file decodes."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_names, samples, diagnostics = [], [], []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        good = []
        for f in files:
            try:
                with Image.open(f) as im:
                    im.verify()
                good.append(f)
            except (UnidentifiedImageError, OSError, SyntaxError) as exc:
                diagnostics.append(f"unreadable: {f} ({exc.__class__.__name__})")
        if not good:
            warnings.warn(f"class folder {class_dir} has no readable images; excluded")
            diagnostics.append(f"empty class excluded: {class_dir.name}")
            continue
        label = len(class_names)
        class_names.append(class_dir.name)
        samples.extend(Sample(str(f), label) for f in good)
    if not class_names:
        raise DataError(f"no class folders with images under {root}")
    return DatasetManifest(class_names, samples, diagnostics=diagnostics,
                           source={"kind": "folder", "root": str(root)})


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer counts summing to ``n`` that are closest to ``n * ratios``."""
    quotas = [n * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def assign_splits(manifest: DatasetManifest, ratios: Sequence[float], seed: int,
                  names: Sequence[str] = SPLITS) -> DatasetManifest:
    """Stratified per-class shuffle into splits with largest-remainder counts."""
    ratios = [float(r) for r in ratios]
    if len(ratios) > len(names):
        raise ConfigurationError(f"at most {len(names)} split ratios supported")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be positive and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(manifest.samples):
        by_class.setdefault(s.label, []).append(i)
    split_of: dict[int, str] = {}
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < len(ratios):
            raise DataError(
                f"class {manifest.class_names[label]!r} has {len(idx)} files, "
                f"fewer than the {len(ratios)} splits"
            )
        perm = rng.permutation(len(idx))
        start = 0
        for name, count in zip(names, largest_remainder(len(idx), ratios)):
            for j in perm[start:start + count]:
                split_of[idx[j]] = name
            start += count
    samples = [replace(s, split=split_of[i]) for i, s in enumerate(manifest.samples)]
    out = replace(manifest, samples=samples, seed=seed)
    out.arrays = manifest.arrays
    out.source = dict(manifest.source, split_ratios=ratios, split_seed=seed)
    return out


@dataclass(frozen=True)
class OneVsRestSpec:
    target: str
    seed: int = 0
    num_negatives: int | None = None
    # None allows a 5% imbalance relative to the positives
    max_imbalance: int | None = None


def build_one_vs_rest(manifest: DatasetManifest, spec: OneVsRestSpec) -> DatasetManifest:
    """Binary manifest: label 1 = every target-class file, label 0 = seeded sample of the rest."""
    if spec.target not in manifest.class_names:
        raise DataError(f"target class {spec.target!r} not in manifest")
    target = manifest.class_names.index(spec.target)
    positives = [s for s in manifest.samples if s.label == target]
    pool = [s for s in manifest.samples if s.label != target]
    n_pos = len(positives)
    n_neg = n_pos if spec.num_negatives is None else spec.num_negatives
    margin = math.ceil(0.05 * n_pos) if spec.max_imbalance is None else spec.max_imbalance
    if abs(n_pos - n_neg) > margin:
        raise ConfigurationError(
            f"requested {n_neg} negatives vs {n_pos} positives exceeds imbalance margin {margin}"
        )
    if n_neg > len(pool):
        raise DataError(f"only {len(pool)} negatives available, {n_neg} requested")
    rng = np.random.default_rng(spec.seed)
    chosen = np.sort(rng.choice(len(pool), size=n_neg, replace=False))
    samples = [Sample(s.path, 1) for s in positives] + [Sample(pool[i].path, 0) for i in chosen]
    out = DatasetManifest(["rest", spec.target], samples, seed=spec.seed,
                          source=dict(manifest.source, one_vs_rest=asdict(spec)))
    out.arrays = manifest.arrays
    return out


# ---------------------------------------------------------------------------
# synthetic toy set

_PALETTE = np.array([
    [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0],
], dtype=np.float32)
TOY_NOISE = 0.1
TOY_BACKGROUND = 0.5


def toy_patch_side(image_size: int) -> int:
    return math.ceil(0.75 * image_size)


def make_toy_dataset(num_classes: int = 2, per_class: int = 200, image_size: int = 64,
                     seed: int = 0) -> DatasetManifest:
    """Gray images carrying a class-coloured square patch plus Gaussian noise.

    Class ``c`` uses the ``c``-th corner of the RGB cube, so any two classes
    differ by 1 in at least one channel inside the patch. The patch covers at
    least 56% of the image, which puts the class means of the per-channel
    averages more than ``5 * TOY_NOISE`` apart.
    """
    if num_classes < 2 or num_classes > len(_PALETTE):
        raise ConfigurationError(f"toy dataset supports 2..{len(_PALETTE)} classes")
    if per_class < 1 or image_size < 8:
        raise ConfigurationError("per_class must be >= 1 and image_size >= 8")
    rng = np.random.default_rng(seed)
    side = toy_patch_side(image_size)
    samples, arrays = [], {}
    for c in range(num_classes):
        for i in range(per_class):
            img = np.full((3, image_size, image_size), TOY_BACKGROUND, dtype=np.float32)
            top, left = rng.integers(0, image_size - side + 1, size=2)
            img[:, top:top + side, left:left + side] = _PALETTE[c][:, None, None]
            img += rng.normal(0.0, TOY_NOISE, size=img.shape).astype(np.float32)
            path = f"toy://class{c}/{i:05d}"
            arrays[path] = img
            samples.append(Sample(path, c))
    m = DatasetManifest([f"class{c}" for c in range(num_classes)], samples, seed=seed,
                        source={"kind": "toy", "params": dict(num_classes=num_classes,
                                per_class=per_class, image_size=image_size, seed=seed)})
    m.arrays = arrays
    return m


# ---------------------------------------------------------------------------
# augmentation and batching


@dataclass(frozen=True)
class AugmentationSpec:
    resize: int = 224
    hflip: bool = False
    vflip: bool = False
    rotation: float = 0.0
    color_jitter: bool = False
    jitter_strength: float = 0.2
    affine: bool = False
    affine_translate: float = 0.1
    affine_scale: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if self.resize < 1 or self.rotation < 0:
            raise ConfigurationError(f"invalid augmentation spec: {self}")

    @property
    def stochastic(self) -> bool:
        return self.hflip or self.vflip or self.rotation > 0 or self.color_jitter or self.affine


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def apply(self, images: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=images.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=images.dtype).view(1, 3, 1, 1)
        return (images - mean) / std


class SampleBatch(NamedTuple):
    images: torch.Tensor
    labels: torch.Tensor
    paths: list[str]


def load_image(manifest: DatasetManifest, sample: Sample, size: int) -> torch.Tensor:
    """Decode one sample to a (3, size, size) float tensor in roughly [0, 1]."""
    if manifest.arrays is not None and sample.path in manifest.arrays:
        img = torch.from_numpy(manifest.arrays[sample.path])
    else:
        try:
            with Image.open(sample.path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"cannot decode image {sample.path}: {exc}") from exc
        img = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    if img.shape[-2:] != (size, size):
        img = TF.resize(img, [size, size], InterpolationMode.BILINEAR, antialias=False)
    return img


def sample_augmentation(rng: np.random.Generator, spec: AugmentationSpec) -> dict:
    """Draw one sample's augmentation parameters (fixed draw order)."""
    p: dict = {}
    p["hflip"] = bool(spec.hflip and rng.random() < 0.5)
    p["vflip"] = bool(spec.vflip and rng.random() < 0.5)
    p["angle"] = float(rng.uniform(-spec.rotation, spec.rotation)) if spec.rotation > 0 else 0.0
    if spec.color_jitter:
        s = spec.jitter_strength
        p["jitter"] = tuple(float(v) for v in rng.uniform(1 - s, 1 + s, size=3))
    if spec.affine:
        t = spec.affine_translate
        p["translate"] = tuple(float(v) for v in rng.uniform(-t, t, size=2))
        p["scale"] = float(rng.uniform(*spec.affine_scale))
    return p


def apply_augmentation(img: torch.Tensor, params: dict) -> torch.Tensor:
    if params.get("hflip"):
        img = TF.hflip(img)
    if params.get("vflip"):
        img = TF.vflip(img)
    if params.get("angle"):
        img = TF.rotate(img, params["angle"], InterpolationMode.BILINEAR, fill=[0.0])
    if "jitter" in params:
        b, c, s = params["jitter"]
        img = TF.adjust_saturation(TF.adjust_contrast(TF.adjust_brightness(img, b), c), s)
    if "translate" in params:
        h, w = img.shape[-2:]
        tx, ty = params["translate"]
        img = TF.affine(img, angle=0.0, translate=[round(tx * w), round(ty * h)],
                        scale=params["scale"], shear=[0.0, 0.0],
                        interpolation=InterpolationMode.BILINEAR, fill=[0.0])
    return img


def augment_and_batch(manifest: DatasetManifest, split: str, spec: AugmentationSpec,
                      batch_size: int, seed: int, epoch: int,
                      normalization: Normalization | None = Normalization(),
                      train: bool | None = None) -> Iterator[SampleBatch]:
    """Yield normalised batches of one split.

    Training batches are reshuffled per ``(seed, epoch)`` and augmented;
    other splits keep manifest order and are only resized and normalised.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    train = (split == "train") if train is None else train
    samples = manifest.split(split)
    rng = np.random.default_rng((seed, epoch))
    order = rng.permutation(len(samples)) if train else np.arange(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        images = []
        for s in chunk:
            img = load_image(manifest, s, spec.resize)
            if train and spec.stochastic:
                img = apply_augmentation(img, sample_augmentation(rng, spec))
            images.append(img)
        x = torch.stack(images).float()
        if normalization is not None:
            x = normalization.apply(x)
        yield SampleBatch(x, torch.tensor([s.label for s in chunk], dtype=torch.long),
                          [s.path for s in chunk])


def dataset_normalization(manifest: DatasetManifest, split: str = "train",
                          size: int = 224) -> Normalization:
    """Per-channel mean/std over the resized, un-augmented images of ``split``."""
    total = torch.zeros(3, dtype=torch.float64)
    total_sq = torch.zeros(3, dtype=torch.float64)
    count = 0
    for s in manifest.split(split):
        img = load_image(manifest, s, size).double()
        total += img.sum(dim=(1, 2))
        total_sq += img.pow(2).sum(dim=(1, 2))
        count += img.shape[1] * img.shape[2]
    if count == 0:
        raise DataError(f"split {split!r} is empty")
    mean = total / count
    std = (total_sq / count - mean.pow(2)).clamp_min(1e-12).sqrt()
    return Normalization(tuple(mean.tolist()), tuple(std.tolist()))
