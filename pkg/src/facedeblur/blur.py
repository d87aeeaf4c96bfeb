"""Motion-blur kernel synthesis and the blur + noise degradation model."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
from scipy import ndimage

KERNEL_SIZES = (13, 15, 17, 19, 21, 23, 25, 27)

BoundaryMode = Literal["replicate", "reflect"]
_NDIMAGE_MODES = {"replicate": "nearest", "reflect": "mirror"}


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray  # (length, 2) as (x, y), sub-pixel units

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"trajectory points must be (n, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("trajectory contains non-finite points")
        object.__setattr__(self, "points", pts)

    @property
    def length(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class BlurKernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {taps.shape}")
        if np.any(taps < 0):
            raise ValueError("kernel taps must be non-negative")
        if abs(taps.sum() - 1.0) > 1e-6:
            raise ValueError(f"kernel must sum to 1, got {taps.sum():.8f}")
        object.__setattr__(self, "taps", taps)

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    @classmethod
    def delta(cls, size: int) -> "BlurKernel":
        taps = np.zeros((size, size))
        taps[size // 2, size // 2] = 1.0
        return cls(taps)


@dataclass(frozen=True)
class DegradationConfig:
    noise_sigma: float = 0.01
    boundary_mode: BoundaryMode = "replicate"
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.boundary_mode not in _NDIMAGE_MODES:
            raise ValueError(f"unknown boundary mode {self.boundary_mode!r}")


def generate_trajectory(
    length: int,
    anxiety: float,
    rng_seed: int,
    max_length: float | None = None,
    centripetal: float = 0.3,
    impulse_freq: float = 0.2,
) -> Trajectory:
    """Sample a 2D camera path as an inertial random walk.

    The walk moves at constant speed so that the full path spans ``max_length``
    pixels (default ``length - 1``). Each step perturbs the velocity with
    Gaussian noise, a pull back toward the origin, and occasional impulsive
    direction reversals, all scaled by ``anxiety``. With ``anxiety=0`` the
    path is a straight line along a random initial direction.
    """
    if length < 2:
        raise ValueError(f"trajectory length must be >= 2, got {length}")
    if not 0.0 <= anxiety <= 1.0:
        raise ValueError(f"anxiety must lie in [0, 1], got {anxiety}")
    rng = np.random.default_rng(rng_seed)
    if max_length is None:
        max_length = float(length - 1)
    step = max_length / (length - 1)

    angle = rng.uniform(0.0, 2.0 * np.pi)
    vel = step * np.array([np.cos(angle), np.sin(angle)])
    pts = np.zeros((length, 2))
    for t in range(length - 1):
        # Draws happen unconditionally so the stream does not depend on anxiety.
        gauss = rng.normal(size=2)
        shake = rng.random()
        turn = rng.random()
        if anxiety > 0:
            dv = anxiety * (gauss - centripetal * pts[t] / max(max_length, 1e-12)) * step
            if shake < impulse_freq * anxiety:
                theta = np.pi + (turn - 0.5)
                c, s = np.cos(theta), np.sin(theta)
                dv = dv + np.array([c * vel[0] - s * vel[1], s * vel[0] + c * vel[1]])
            vel = vel + dv
            speed = np.hypot(vel[0], vel[1])
            if speed > 0:
                vel = vel * (step / speed)
        pts[t + 1] = pts[t] + vel
    return Trajectory(pts)


def _segment_centroid(pts: np.ndarray) -> tuple[np.ndarray, float]:
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    total = float(seg_len.sum())
    if total == 0.0:
        return pts.mean(axis=0), 0.0
    mids = 0.5 * (pts[:-1] + pts[1:])
    return (mids * seg_len[:, None]).sum(axis=0) / total, total


# Two-point Gauss-Legendre nodes on [0, 1]; exact for the quadratic footprint
# a straight piece produces between integer grid crossings.
_GL_NODES = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def _deposit_segment(grid: np.ndarray, p0: np.ndarray, p1: np.ndarray, weight: float) -> None:
    d = p1 - p0
    cuts = [0.0, 1.0]
    for axis in (0, 1):
        if d[axis] != 0.0:
            lo, hi = sorted((p0[axis], p1[axis]))
            for g in range(int(np.ceil(lo)), int(np.floor(hi)) + 1):
                t = (g - p0[axis]) / d[axis]
                if 0.0 < t < 1.0:
                    cuts.append(t)
    cuts = np.unique(cuts)
    for a, b in zip(cuts[:-1], cuts[1:]):
        for node in _GL_NODES:
            x, y = p0 + (a + node * (b - a)) * d
            w = 0.5 * (b - a) * weight
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            fx, fy = x - x0, y - y0
            grid[y0, x0] += w * (1 - fx) * (1 - fy)
            grid[y0, x0 + 1] += w * fx * (1 - fy)
            grid[y0 + 1, x0] += w * (1 - fx) * fy
            grid[y0 + 1, x0 + 1] += w * fx * fy


def rasterize_kernel(traj: Trajectory, size: int) -> BlurKernel:
    """Render a trajectory into a ``size`` x ``size`` kernel.

    Mass is the arc-length integral of the bilinear footprint along the path,
    so the kernel's center of mass equals the path's arc-length centroid,
    which is placed on the center tap. Paths too wide for the grid are
    shrunk about the centroid, leaving a one-pixel margin.
    """
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    pts = traj.points
    centroid, total = _segment_centroid(pts)
    if total == 0.0:
        return BlurKernel.delta(size)

    rel = pts - centroid
    half = (size - 1) / 2.0
    reach = float(np.abs(rel).max())
    limit = half - 1.0
    if reach > limit:
        rel = rel * (limit / reach)
    pts = rel + half

    grid = np.zeros((size + 1, size + 1))
    seg_len = np.hypot(*np.diff(pts, axis=0).T)
    total = seg_len.sum()
    for i, length in enumerate(seg_len):
        if length > 0:
            _deposit_segment(grid, pts[i], pts[i + 1], length / total)
    taps = grid[:size, :size]
    taps = np.clip(taps, 0.0, None)
    return BlurKernel(taps / taps.sum())


def random_kernel(size: int, seed: int) -> tuple[BlurKernel, dict]:
    """Draw one kernel of the given size; returns it with its sidecar metadata."""
    rng = np.random.default_rng([seed, size])
    length = int(rng.integers(16, 97))
    anxiety = float(rng.uniform(0.05, 1.0))
    extent = float(rng.uniform(0.4, 1.2)) * (size - 3)
    traj_seed = int(rng.integers(0, 2**31 - 1))
    traj = generate_trajectory(length, anxiety, traj_seed, max_length=extent)
    meta = {
        "size": size,
        "seed": seed,
        "anxiety": anxiety,
        "length": length,
        "max_length": extent,
        "trajectory_seed": traj_seed,
    }
    return rasterize_kernel(traj, size), meta


def apply_blur(
    img: np.ndarray,
    kernel: BlurKernel,
    cfg: DegradationConfig,
    rng: np.random.Generator | None = None,
    clip: bool = True,
) -> np.ndarray:
    """Convolve ``img`` (H x W [x C]) with ``kernel``, add noise, clip to [0, 1].

    Noise is drawn from ``rng`` when given, otherwise from ``cfg.rng_seed``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {img.shape[2]}")
    if img.ndim not in (2, 3):
        raise ValueError(f"image must be H x W or H x W x C, got shape {img.shape}")
    if kernel.size > min(img.shape[:2]):
        raise ValueError(
            f"invalid configuration: kernel size {kernel.size} exceeds image size {img.shape[:2]}"
        )
    mode = _NDIMAGE_MODES[cfg.boundary_mode]
    if img.ndim == 2:
        out = ndimage.convolve(img, kernel.taps, mode=mode)
    else:
        out = np.stack(
            [ndimage.convolve(img[..., c], kernel.taps, mode=mode) for c in range(img.shape[2])],
            axis=-1,
        )
    if cfg.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out


# -- kernel archive ---------------------------------------------------------


def save_kernel(path: Path, kernel: BlurKernel, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path.with_suffix(".npy"), kernel.taps)
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_kernel(path: Path) -> BlurKernel:
    return BlurKernel(np.load(Path(path).with_suffix(".npy")))


def generate_kernel_archive(
    out_dir: Path, sizes: Iterable[int], per_size: int, seed: int
) -> list[Path]:
    """Write ``per_size`` kernels for every size under ``out_dir/<size>/``."""
    out_dir = Path(out_dir)
    written = []
    for size in sizes:
        for idx in range(per_size):
            kseed = int(np.random.SeedSequence([seed, size, idx]).generate_state(1)[0])
            kernel, meta = random_kernel(size, kseed)
            meta["index"] = idx
            path = out_dir / str(size) / f"k{size}_{idx:05d}"
            save_kernel(path, kernel, meta)
            written.append(path.with_suffix(".npy"))
    return written


def list_kernels(kernel_dir: Path) -> list[tuple[str, int, Path]]:
    """Return ``(kernel_id, size, path)`` for every kernel in an archive, sorted."""
    kernel_dir = Path(kernel_dir)
    if not kernel_dir.is_dir():
        raise FileNotFoundError(f"kernel directory not found: {kernel_dir}")
    found = []
    for path in sorted(kernel_dir.glob("*/*.npy")):
        taps = np.load(path)
        found.append((f"{path.parent.name}/{path.stem}", int(taps.shape[0]), path))
    return found
