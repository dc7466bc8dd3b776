"""Dataset ingestion, few-shot subsetting and the synthetic benchmark generator.

Image and mask references are either file paths or in-memory ``uint8``
arrays; :func:`read_image` and :func:`read_mask` resolve both.
"""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, InvalidInputError

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
LAYOUTS = ("mvtec", "folder", "frames", "synthetic")


@dataclass
class TestItem:
    __test__ = False  # not a pytest class despite the name

    image: object
    label: int
    mask: object = None
    name: str = ""


@dataclass
class Dataset:
    train_items: list
    test_items: list
    category: str = ""
    layout: str = "folder"
    # frame datasets: (clip, frame_index) per test item, in order
    frame_keys: list | None = None

    def __post_init__(self):
        for item in self.train_items:
            if isinstance(item, TestItem) and item.label != 0:
                raise InvalidInputError("anomalous item found among training items")

    @property
    def has_masks(self) -> bool:
        return any(t.mask is not None for t in self.test_items if t.label == 1)


def read_image(ref) -> np.ndarray:
    """``H x W x 3`` uint8; grayscale sources are replicated to three channels."""
    if isinstance(ref, np.ndarray):
        arr = ref
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        return arr.astype(np.uint8)
    with Image.open(ref) as img:
        return np.asarray(img.convert("RGB"))


def read_mask(ref, shape=None) -> np.ndarray:
    """Boolean mask; ``None`` means all-normal (requires ``shape``)."""
    if ref is None:
        return np.zeros(shape, dtype=bool)
    if isinstance(ref, np.ndarray):
        return ref.astype(bool) if ref.dtype == bool else ref > 0
    with Image.open(ref) as img:
        return np.asarray(img.convert("L")) > 127


def _image_size(ref):
    if isinstance(ref, np.ndarray):
        return ref.shape[1], ref.shape[0]
    with Image.open(ref) as img:
        return img.size


def _list_images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _natural_key(path: Path):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", path.name)]


def list_mvtec_categories(root) -> list[str]:
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if (p / "train" / "good").is_dir())


def load_mvtec_layout(root, category) -> Dataset:
    """``<cat>/train/good``, ``<cat>/test/<defect>``, ``<cat>/ground_truth/<defect>``."""
    base = Path(root) / category
    train_dir = base / "train" / "good"
    if not train_dir.is_dir():
        raise InvalidInputError(f"{train_dir} does not exist")
    train = _list_images(train_dir)
    test = []
    test_dir = base / "test"
    if test_dir.is_dir():
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for img in _list_images(defect_dir):
                if defect == "good":
                    test.append(TestItem(img, 0, None, f"good/{img.name}"))
                    continue
                gt_dir = base / "ground_truth" / defect
                if not gt_dir.is_dir():
                    raise InvalidInputError(f"missing ground_truth folder for defect {defect!r}: {gt_dir}")
                mask = gt_dir / f"{img.stem}_mask.png"
                if not mask.exists():
                    candidates = [p for p in _list_images(gt_dir) if p.stem.startswith(img.stem)]
                    if not candidates:
                        raise InvalidInputError(f"no ground-truth mask for {img}")
                    mask = candidates[0]
                if _image_size(mask) != _image_size(img):
                    raise InvalidInputError(f"mask {mask} does not match image {img} in size")
                test.append(TestItem(img, 1, mask, f"{defect}/{img.name}"))
    if not test:
        log.warning("category %s has no test images", category)
    return Dataset(train, test, category, "mvtec")


def load_folder_dataset(root, normal_class, test_fraction=0.2, seed=0) -> Dataset:
    """One-class split over a class-per-subfolder tree.

    With ``root/train/<cls>`` and ``root/test/<cls>`` present those splits are
    used; otherwise the normal class is split by ``test_fraction`` and every
    other class goes to the test set.
    """
    root = Path(root)
    normal_class = str(normal_class)
    if (root / "train").is_dir() and (root / "test").is_dir():
        if not (root / "train" / normal_class).is_dir():
            raise InvalidInputError(f"unknown normal class {normal_class!r} under {root / 'train'}")
        train = _list_images(root / "train" / normal_class)
        test = []
        for cls_dir in sorted(p for p in (root / "test").iterdir() if p.is_dir()):
            label = 0 if cls_dir.name == normal_class else 1
            test += [TestItem(p, label, None, f"{cls_dir.name}/{p.name}") for p in _list_images(cls_dir)]
        return Dataset(train, test, normal_class, "folder")

    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if normal_class not in classes:
        raise InvalidInputError(f"unknown normal class {normal_class!r}; found {classes}")
    normal = _list_images(root / normal_class)
    rng = np.random.default_rng(seed)
    n_test = int(round(len(normal) * test_fraction))
    test_idx = set(rng.choice(len(normal), size=n_test, replace=False).tolist())
    train = [p for i, p in enumerate(normal) if i not in test_idx]
    test = [TestItem(p, 0, None, f"{normal_class}/{p.name}") for i, p in enumerate(normal) if i in test_idx]
    for cls in classes:
        if cls != normal_class:
            test += [TestItem(p, 1, None, f"{cls}/{p.name}") for p in _list_images(root / cls)]
    return Dataset(train, test, normal_class, "folder")


def load_frames_dataset(root, labels=None) -> Dataset:
    """Per-frame dataset from ``root/train/<clip>/`` and ``root/test/<clip>/`` folders.

    ``labels`` is a CSV with columns ``clip,frame_index,label`` covering the
    test frames (default ``root/labels.csv``). ``frame_index`` counts from 0
    in natural filename order within each clip.
    """
    root = Path(root)
    labels = Path(labels) if labels is not None else root / "labels.csv"
    if not labels.exists():
        raise InvalidInputError(f"frame label file not found: {labels}")
    table = {}
    with open(labels, newline="") as fh:
        for row in csv.DictReader(fh):
            table[(row["clip"], int(row["frame_index"]))] = int(row["label"])

    def clips(split):
        d = root / split
        if not d.is_dir():
            return []
        return sorted((p for p in d.iterdir() if p.is_dir()), key=_natural_key)

    train = []
    for clip in clips("train"):
        train += sorted(_list_images(clip), key=_natural_key)
    test, keys = [], []
    for clip in clips("test"):
        for i, frame in enumerate(sorted(_list_images(clip), key=_natural_key)):
            key = (clip.name, i)
            if key not in table:
                raise InvalidInputError(f"no label for frame {key} in {labels}")
            test.append(TestItem(frame, table[key], None, f"{clip.name}/{frame.name}"))
            keys.append(key)
    return Dataset(train, test, root.name, "frames", frame_keys=keys)


def few_shot_subset(dataset: Dataset, k: int, seed=0) -> Dataset:
    """Keep ``k`` uniformly sampled training images; the test set is untouched."""
    n = len(dataset.train_items)
    if k < 1 or k > n:
        raise InvalidInputError(f"cannot draw {k} shots from {n} training images")
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return replace(dataset, train_items=[dataset.train_items[i] for i in idx])


# --------------------------------------------------------------------------
# synthetic benchmark

ANOMALY_TYPES = ("blob-intensity", "patch-swap", "semantic-swap")


@dataclass
class SynthSpec:
    resolution: int = 64
    n_train: int = 200
    n_test_normal: int = 50
    n_test_anomalous: int = 50
    anomaly_types: tuple = ANOMALY_TYPES
    seed: int = 0
    # texture family: dominant spatial frequency (cycles per image) and orientation (radians)
    frequency: float = 1.5
    orientation: float = 0.6
    jitter: float = 0.05
    noise_sigma: float = 3.0
    noise_level: float = 0.1
    brightness: tuple = (0.35, 0.65)
    amplitude: float = 0.18
    defect_radius: tuple = (6, 11)


def _texture(rng, spec: SynthSpec, frequency=None, orientation=None) -> np.ndarray:
    """Float RGB texture in [0, 1]: oriented low-frequency sinusoids plus smoothed noise.

    The mean brightness varies from image to image within ``spec.brightness``.
    """
    r = spec.resolution
    f0 = spec.frequency if frequency is None else frequency
    th0 = spec.orientation if orientation is None else orientation
    yy, xx = np.mgrid[0:r, 0:r] / r
    field_ = np.zeros((r, r))
    for mult, amp in ((1.0, 1.0), (2.0, 0.35)):
        f = f0 * mult * (1 + spec.jitter * rng.standard_normal())
        th = th0 + spec.jitter * rng.standard_normal()
        phase = rng.uniform(0, 2 * np.pi)
        field_ += amp * np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + phase)
    field_ /= 1.35
    noise = ndimage.gaussian_filter(rng.standard_normal((r, r)), spec.noise_sigma, mode="wrap")
    noise /= noise.std() + 1e-12
    level = rng.uniform(*spec.brightness)
    base = level + spec.amplitude * (field_ + spec.noise_level * noise)
    tint = np.array([1.0, 0.85, 0.7]) * (1 + 0.03 * rng.standard_normal(3))
    return np.clip(base[..., None] * tint, 0, 1)


def _disk(rng, spec: SynthSpec):
    r = spec.resolution
    rad = rng.uniform(*spec.defect_radius)
    cy, cx = rng.uniform(rad, r - rad, size=2)
    yy, xx = np.mgrid[0:r, 0:r]
    return np.hypot(yy - cy, xx - cx) <= rad


def _blob_intensity(rng, img, spec):
    """Shift the brightness inside a disk; the result stays within the normal brightness range."""
    mask = _disk(rng, spec)
    lo, hi = spec.brightness
    mean = img[..., 0].mean()
    shift = rng.uniform(0.15, 0.25)
    # push towards the side of the range with more room
    if mean - lo > hi - mean:
        shift = -shift
    out = img.copy()
    out[mask] = np.clip(out[mask] + shift * np.array([1.0, 0.85, 0.7]), 0, 1)
    return out, mask


def _patch_swap(rng, img, spec):
    """Paste a square from another normal texture: every patch is locally normal."""
    r = spec.resolution
    size = int(2 * rng.uniform(*spec.defect_radius))
    y0, x0 = rng.integers(0, r - size, size=2)
    donor = _texture(rng, spec)
    out = img.copy()
    out[y0:y0 + size, x0:x0 + size] = donor[y0:y0 + size, x0:x0 + size]
    mask = np.zeros((r, r), dtype=bool)
    mask[y0:y0 + size, x0:x0 + size] = True
    return out, mask


def _semantic_swap(rng, img, spec):
    """Replace a disk with a texture from a different family."""
    mask = _disk(rng, spec)
    other = _texture(rng, spec, frequency=spec.frequency * 2.5,
                     orientation=spec.orientation + np.pi / 2)
    out = img.copy()
    out[mask] = other[mask]
    return out, mask


_DEFECTS = {"blob-intensity": _blob_intensity, "patch-swap": _patch_swap,
            "semantic-swap": _semantic_swap}


def synth_generate(spec: SynthSpec | None = None) -> Dataset:
    """Seeded smooth-texture dataset with exact defect masks."""
    spec = spec or SynthSpec()
    for kind in spec.anomaly_types:
        if kind not in _DEFECTS:
            raise ConfigError(f"unknown anomaly type {kind!r}; choose from {ANOMALY_TYPES}")
    if spec.n_test_anomalous and not spec.anomaly_types:
        raise ConfigError("anomalous test images requested but no anomaly types given")
    rng = np.random.default_rng(spec.seed)
    to_u8 = lambda x: np.round(x * 255).astype(np.uint8)

    train = [to_u8(_texture(rng, spec)) for _ in range(spec.n_train)]
    test = []
    for i in range(spec.n_test_normal):
        test.append(TestItem(to_u8(_texture(rng, spec)), 0, None, f"good/{i:03d}"))
    for i in range(spec.n_test_anomalous):
        kind = spec.anomaly_types[i % len(spec.anomaly_types)]
        img, mask = _DEFECTS[kind](rng, _texture(rng, spec), spec)
        test.append(TestItem(to_u8(img), 1, mask, f"{kind}/{i:03d}"))
    return Dataset(train, test, "synthetic", "synthetic")
