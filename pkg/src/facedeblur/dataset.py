"""Dataset assembly: manifests, image I/O, augmentation and component masks."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .blur import BlurKernel, DegradationConfig, apply_blur, list_kernels, load_kernel

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class LabelSchema:
    """Class layout of the parsing labels.

    ``component_classes`` are the classes that receive the local structural
    loss: left eye, right eye, left eyebrow, right eyebrow, nose, upper lip,
    lower lip and teeth in the default layout.
    """

    class_names: tuple[str, ...] = (
        "background",
        "face",
        "left_eyebrow",
        "right_eyebrow",
        "left_eye",
        "right_eye",
        "nose",
        "upper_lip",
        "lower_lip",
        "teeth",
        "hair",
    )
    component_classes: tuple[int, ...] = (4, 5, 2, 3, 6, 7, 8, 9)

    def __post_init__(self):
        k = self.num_classes
        if k < 1:
            raise ValueError("schema needs at least one class")
        bad = [c for c in self.component_classes if not 0 <= c < k]
        if bad:
            raise ValueError(f"component classes {bad} outside [0, {k - 1}]")
        if len(set(self.component_classes)) != len(self.component_classes):
            raise ValueError("component classes must be distinct")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


DEFAULT_SCHEMA = LabelSchema()


@dataclass
class ComponentMask:
    mask: np.ndarray
    class_id: int

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class Sample:
    clear: np.ndarray
    blurred: np.ndarray
    labels: np.ndarray
    kernel_id: str = ""
    source_id: str = ""
    kernel_size: int = 0

    def __post_init__(self):
        if self.clear.shape != self.blurred.shape:
            raise ValueError(f"clear {self.clear.shape} and blurred {self.blurred.shape} differ")
        if self.labels.shape != self.clear.shape[:2]:
            raise ValueError(
                f"label map {self.labels.shape} does not match image {self.clear.shape[:2]}"
            )


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_shift: int = 12
    max_rotation: float = 30.0
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0.9 <= lo <= hi <= 1.1:
            raise ValueError(f"scale_range {self.scale_range} outside [0.9, 1.1]")
        if not 0 <= self.max_shift <= 12:
            raise ValueError(f"max_shift {self.max_shift} outside [0, 12]")
        if not 0 <= self.max_rotation <= 30:
            raise ValueError(f"max_rotation {self.max_rotation} outside [0, 30]")


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)  # (dx, dy): columns, rows
    rotation: float = 0.0  # degrees, counter-clockwise on screen

    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.shift == (0.0, 0.0) and self.rotation == 0.0


# -- image I/O -------------------------------------------------------------


def load_image(path: Path) -> np.ndarray:
    """Read an 8-bit image as an H x W x 3 float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_labels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(f"label map {path} must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def save_labels(path: Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label ids must fit in 8 bits")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


# -- manifest ----------------------------------------------------------------


class ManifestError(ValueError):
    pass


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _kernel_hash(path: Path) -> str:
    return hashlib.sha1(np.ascontiguousarray(np.load(path)).tobytes()).hexdigest()


def check_kernel_disjoint(train_kernels: Sequence[Path], test_kernels: Sequence[Path]) -> None:
    """Raise if any kernel (compared by content) appears in both splits."""
    train_hash = {_kernel_hash(Path(p)): p for p in train_kernels}
    shared = sorted(
        f"{Path(p).parent.name}/{Path(p).stem}" for p in test_kernels if _kernel_hash(Path(p)) in train_hash
    )
    if shared:
        raise ManifestError(f"train and test kernel sets overlap: {shared}")


def build_manifest(
    clear_dir: Path,
    label_dir: Path,
    kernel_dir: Path,
    cfg: DegradationConfig,
    split: str,
    root: Path | None = None,
    exclude_kernel_dir: Path | None = None,
    label_source: str = "gt",
) -> list[dict]:
    """Pair every clear image with every kernel of ``kernel_dir``.

    Paths in the entries are relative to ``root`` (default: the current
    directory). Each entry carries the noise seed used to render its blurred
    image, derived from ``cfg.rng_seed`` and the entry index. When
    ``exclude_kernel_dir`` is given (the kernels of the other split), the two
    kernel sets must be disjoint.
    """
    clear_dir, label_dir, kernel_dir = Path(clear_dir), Path(label_dir), Path(kernel_dir)
    root = Path(root) if root is not None else Path.cwd()
    if split not in ("train", "test"):
        raise ManifestError(f"split must be 'train' or 'test', got {split!r}")
    if not label_dir.is_dir():
        raise FileNotFoundError(f"label directory not found: {label_dir}")
    images = _list_images(clear_dir)
    kernels = list_kernels(kernel_dir)
    if exclude_kernel_dir is not None:
        other = [p for _, _, p in list_kernels(Path(exclude_kernel_dir))]
        check_kernel_disjoint([p for _, _, p in kernels], other)

    pairs = []
    for img_path in images:
        label_path = label_dir / (img_path.stem + ".png")
        if not label_path.exists():
            raise ManifestError(f"missing label map for {img_path.name} (expected {label_path})")
        with Image.open(img_path) as im:
            img_size = im.size
        with Image.open(label_path) as lm:
            lab_size = lm.size
        if img_size != lab_size:
            raise ManifestError(
                f"label map {label_path.name} is {lab_size}, image {img_path.name} is {img_size}"
            )
        pairs.append((img_path, label_path))

    entries = []
    for img_path, label_path in pairs:
        for kernel_id, size, kpath in kernels:
            idx = len(entries)
            noise_seed = int(np.random.SeedSequence([cfg.rng_seed, idx]).generate_state(1)[0])
            entries.append(
                {
                    "index": idx,
                    "split": split,
                    "source_id": img_path.stem,
                    "clear": os.path.relpath(img_path, root),
                    "labels": os.path.relpath(label_path, root),
                    "label_source": label_source,
                    "kernel_id": kernel_id,
                    "kernel": os.path.relpath(kpath, root),
                    "kernel_size": size,
                    "blurred": f"blurred/{split}/{img_path.stem}__{kernel_id.replace('/', '_')}.png",
                    "noise_sigma": cfg.noise_sigma,
                    "boundary_mode": cfg.boundary_mode,
                    "noise_seed": noise_seed,
                }
            )
    return entries


def write_manifest(path: Path, entries: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_manifest(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def render_blurred(entries: Sequence[dict], root: Path) -> None:
    """Synthesize and write the blurred image of every manifest entry."""
    root = Path(root)
    for entry in entries:
        clear = load_image(root / entry["clear"])
        kernel = load_kernel(root / entry["kernel"])
        cfg = DegradationConfig(entry["noise_sigma"], entry["boundary_mode"], entry["noise_seed"])
        save_image(root / entry["blurred"], apply_blur(clear, kernel, cfg))


def load_sample(entry: dict, root: Path) -> Sample:
    root = Path(root)
    return Sample(
        clear=load_image(root / entry["clear"]),
        blurred=load_image(root / entry["blurred"]),
        labels=load_labels(root / entry["labels"]),
        kernel_id=entry["kernel_id"],
        source_id=entry["source_id"],
        kernel_size=int(entry["kernel_size"]),
    )


# -- augmentation ----------------------------------------------------------


def sample_augment_params(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    scale = float(rng.uniform(*cfg.scale_range))
    dx, dy = rng.uniform(-cfg.max_shift, cfg.max_shift, size=2)
    rotation = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    return AugmentParams(scale, (float(dx), float(dy)), rotation)


def _clamp_params(params: AugmentParams, cfg: AugmentConfig) -> AugmentParams:
    lo, hi = cfg.scale_range
    s = cfg.max_shift
    r = cfg.max_rotation
    return AugmentParams(
        scale=float(np.clip(params.scale, lo, hi)),
        shift=(float(np.clip(params.shift[0], -s, s)), float(np.clip(params.shift[1], -s, s))),
        rotation=float(np.clip(params.rotation, -r, r)),
    )


def warp(arr: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    """Apply the scale/rotate/shift transform about the image center.

    Pixels mapped from outside the source are filled with zero (background).
    """
    h, w = arr.shape[:2]
    theta = np.deg2rad(params.rotation)
    # Output (row, col) -> input (row, col); rows point down, so a
    # counter-clockwise screen rotation uses the transposed matrix.
    c, s = np.cos(theta), np.sin(theta)
    inv = np.array([[c, s], [-s, c]]) / params.scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([params.shift[1], params.shift[0]])
    offset = center - inv @ (center + shift)
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, inv, offset=offset, order=order, mode="constant", cval=0)
    return np.stack(
        [
            ndimage.affine_transform(arr[..., ch], inv, offset=offset, order=order, mode="constant", cval=0)
            for ch in range(arr.shape[2])
        ],
        axis=-1,
    )


def augment(
    sample: Sample,
    cfg: AugmentConfig,
    rng: np.random.Generator | None = None,
    params: AugmentParams | None = None,
) -> Sample:
    """Apply one random geometric transform to clear, blurred and labels alike.

    Images use bilinear resampling, labels nearest neighbour. Explicit
    ``params`` are clamped to the bounds of ``cfg``.
    """
    if params is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
        params = sample_augment_params(cfg, rng)
    params = _clamp_params(params, cfg)
    if params.is_identity():
        return replace(sample, clear=sample.clear.copy(), blurred=sample.blurred.copy(),
                       labels=sample.labels.copy())
    return replace(
        sample,
        clear=np.clip(warp(sample.clear, params, order=1), 0.0, 1.0),
        blurred=np.clip(warp(sample.blurred, params, order=1), 0.0, 1.0),
        labels=warp(sample.labels, params, order=0).astype(sample.labels.dtype),
    )


# -- masks -----------------------------------------------------------------


def extract_masks(labels_or_probs: np.ndarray, schema: LabelSchema = DEFAULT_SCHEMA) -> list[ComponentMask]:
    """Hard masks of the structural-loss components present in a label map.

    Accepts an integer H x W label map or an H x W x K probability volume,
    which is reduced by per-pixel argmax first.
    """
    arr = np.asarray(labels_or_probs)
    if arr.ndim == 3:
        if arr.shape[2] != schema.num_classes:
            raise ValueError(f"probability map has {arr.shape[2]} classes, schema has {schema.num_classes}")
        arr = arr.argmax(axis=2)
    elif arr.ndim != 2:
        raise ValueError(f"expected H x W labels or H x W x K probabilities, got {arr.shape}")
    masks = []
    for cls in schema.component_classes:
        m = arr == cls
        if m.any():
            masks.append(ComponentMask(m, cls))
    return masks


# -- iteration -------------------------------------------------------------


@dataclass
class FaceDataset:
    """Manifest-backed samples, optionally augmented per (seed, epoch, index)."""

    entries: list[dict]
    root: Path
    augment_cfg: AugmentConfig | None = None
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_manifest(cls, path: Path, **kwargs) -> "FaceDataset":
        path = Path(path)
        return cls(read_manifest(path), path.parent, **kwargs)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, idx: int, epoch: int = 0) -> Sample:
        if idx not in self._cache:
            self._cache[idx] = load_sample(self.entries[idx], self.root)
        sample = self._cache[idx]
        if self.augment_cfg is None:
            return sample
        rng = np.random.default_rng([self.seed, epoch, idx])
        return augment(sample, self.augment_cfg, rng=rng)


@dataclass
class InMemoryDataset:
    samples: list[Sample]
    augment_cfg: AugmentConfig | None = None
    seed: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def get(self, idx: int, epoch: int = 0) -> Sample:
        sample = self.samples[idx]
        if self.augment_cfg is None:
            return sample
        return augment(sample, self.augment_cfg, rng=np.random.default_rng([self.seed, epoch, idx]))


def batch_iterator(
    dataset, batch_size: int, seed: int, shuffle: bool = True
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Endless (blurred, clear, labels) batches; wraps around at epoch ends.

    ``dataset`` is anything with ``__len__`` and ``get(idx, epoch)``.
    Arrays come out as B x H x W x 3 floats and B x H x W int labels.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    epoch = cur_epoch = 0
    order: list[int] = []
    while True:
        batch = []
        while len(batch) < batch_size:
            if not order:
                perm = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
                order = [int(i) for i in perm]
                cur_epoch = epoch
                epoch += 1
            batch.append(dataset.get(order.pop(0), cur_epoch))
        yield (
            np.stack([s.blurred for s in batch]),
            np.stack([s.clear for s in batch]),
            np.stack([s.labels for s in batch]),
        )
