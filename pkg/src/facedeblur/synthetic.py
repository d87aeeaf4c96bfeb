"""Procedural face-like images with parsing labels, for smoke runs and tests.

The drawings are crude (ellipses for face, eyes, brows, nose, lips, teeth and
hair) but they carry all 11 default classes with realistic relative sizes, so
the whole pipeline can run without any external dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import save_image, save_labels


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def synthetic_face(size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return an ``size`` x ``size`` x 3 image in [0, 1] and its label map."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    u = size / 32.0
    labels = np.zeros((size, size), dtype=np.int64)
    cy = size / 2 + rng.uniform(-1, 1) * u
    cx = size / 2 + rng.uniform(-1, 1) * u
    ry, rx = rng.uniform(11.5, 13.0) * u, rng.uniform(9.0, 10.5) * u

    hair = _ellipse(yy, xx, cy - 2.5 * u, cx, ry + 2 * u, rx + 2 * u) & (yy < cy)
    labels[hair] = 10
    labels[_ellipse(yy, xx, cy, cx, ry, rx)] = 1
    eye_dy, eye_dx = rng.uniform(2.5, 3.5) * u, rng.uniform(3.8, 4.6) * u
    for side, (eye_cls, brow_cls) in ((-1, (4, 2)), (1, (5, 3))):
        ex = cx + side * eye_dx
        ey = cy - eye_dy
        labels[_ellipse(yy, xx, ey - 2.2 * u, ex, 0.7 * u, 2.2 * u, side * 0.15)] = brow_cls
        labels[_ellipse(yy, xx, ey, ex, 1.0 * u, 1.8 * u)] = eye_cls
    labels[_ellipse(yy, xx, cy + 1.0 * u, cx, 2.4 * u, 1.2 * u)] = 6
    mouth_y = cy + rng.uniform(5.0, 6.0) * u
    labels[_ellipse(yy, xx, mouth_y - 0.8 * u, cx, 0.8 * u, 3.2 * u)] = 7
    labels[_ellipse(yy, xx, mouth_y + 0.8 * u, cx, 0.9 * u, 3.0 * u)] = 8
    labels[_ellipse(yy, xx, mouth_y, cx, 0.45 * u, 2.2 * u)] = 9

    palette = {
        0: rng.uniform(0.1, 0.9, 3),
        1: np.array([0.85, 0.65, 0.5]) * rng.uniform(0.7, 1.1),
        2: np.array([0.2, 0.12, 0.08]),
        3: np.array([0.2, 0.12, 0.08]),
        4: np.array([0.95, 0.95, 0.95]),
        5: np.array([0.95, 0.95, 0.95]),
        6: np.array([0.75, 0.55, 0.42]),
        7: np.array([0.7, 0.25, 0.3]),
        8: np.array([0.75, 0.3, 0.32]),
        9: np.array([0.98, 0.97, 0.9]),
        10: rng.uniform(0.05, 0.5) * np.array([1.0, 0.8, 0.6]),
    }
    img = np.zeros((size, size, 3))
    for cls, color in palette.items():
        img[labels == cls] = np.clip(color, 0, 1)
    # pupils and a shading ramp give the eyes and face some internal structure
    for side in (-1, 1):
        pupil = _ellipse(yy, xx, cy - eye_dy, cx + side * eye_dx, 0.8 * u, 0.8 * u)
        img[pupil & np.isin(labels, (4, 5))] = 0.1
    shade = 1.0 - 0.15 * (xx - cx) / size
    img = img * shade[..., None]
    img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0), labels


def write_synthetic_faces(out_dir: Path, count: int, size: int, seed: int, prefix: str = "face") -> None:
    """Write ``count`` faces to ``out_dir/clear`` and labels to ``out_dir/labels``."""
    out_dir = Path(out_dir)
    for i in range(count):
        img, labels = synthetic_face(size, seed * 100003 + i)
        save_image(out_dir / "clear" / f"{prefix}{i:04d}.png", img)
        save_labels(out_dir / "labels" / f"{prefix}{i:04d}.png", labels)


def micro_dataset(count: int, size: int, kernel_sizes, seed: int, noise_sigma: float = 0.01):
    """In-memory (clear, blurred, labels) samples built from synthetic faces."""
    from .blur import DegradationConfig, apply_blur, random_kernel
    from .dataset import InMemoryDataset, Sample

    samples = []
    for i in range(count):
        clear, labels = synthetic_face(size, seed * 100003 + i)
        ksize = kernel_sizes[i % len(kernel_sizes)]
        kernel, _ = random_kernel(ksize, seed * 7 + i)
        cfg = DegradationConfig(noise_sigma=noise_sigma, rng_seed=seed * 31 + i)
        blurred = apply_blur(clear, kernel, cfg)
        samples.append(Sample(clear, blurred, labels, kernel_id=f"k{ksize}_{i}", source_id=f"face{i}", kernel_size=ksize))
    return InMemoryDataset(samples)
