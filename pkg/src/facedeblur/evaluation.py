"""Restoration and parsing metrics, identity distance, and benchmark reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .dataset import DEFAULT_SCHEMA, LabelSchema, load_sample, read_manifest, save_image
from .networks import init_weights

PSNR_CAP = 99.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """PSNR in dB over all elements jointly; identical inputs give ``cap``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA_WEIGHTS
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    return img


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    win_size: int = 11,
    sigma: float = 1.5,
    data_range: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean SSIM on luma with a Gaussian window, over fully covered positions."""
    x, y = to_luma(a), to_luma(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < win_size:
        raise ValueError(f"images smaller than the {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)

    def blur(img):
        out = ndimage.correlate1d(img, g, axis=0, mode="reflect")
        return ndimage.correlate1d(out, g, axis=1, mode="reflect")

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    pad = win_size // 2
    return float(np.mean((num / den)[pad:-pad, pad:-pad]))


def component_fscore(
    pred: np.ndarray,
    gt: np.ndarray,
    schema: LabelSchema = DEFAULT_SCHEMA,
    classes: Sequence[int] | None = None,
) -> dict:
    """Per-class pixel F-score and their arithmetic mean.

    Classes default to every non-background class. A class absent from both
    maps is reported as ``None`` and left out of the average; absent from
    just one it scores 0.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    classes = range(1, schema.num_classes) if classes is None else classes
    scores: dict = {}
    for cls in classes:
        p, g = pred == cls, gt == cls
        tp = int(np.sum(p & g))
        fp = int(np.sum(p & ~g))
        fn = int(np.sum(~p & g))
        if tp + fp + fn == 0:
            scores[schema.class_names[cls]] = None
        else:
            scores[schema.class_names[cls]] = 2 * tp / (2 * tp + fp + fn)
    present = [v for v in scores.values() if v is not None]
    scores["average"] = float(np.mean(present)) if present else None
    return scores


# -- identity ----------------------------------------------------------------


class EmbeddingBackend:
    """Maps an H x W x 3 image to a unit-length feature vector."""

    name = "abstract"

    def embed(self, img: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, img: np.ndarray) -> np.ndarray:
        v = np.asarray(self.embed(img), dtype=np.float64).ravel()
        n = np.linalg.norm(v)
        if n == 0:
            raise ValueError(f"{self.name} produced a zero embedding")
        return v / n


class ConvEmbedding(EmbeddingBackend):
    """Frozen fixed-seed conv net + global average pooling + L2 normalization."""

    name = "conv-random"

    def __init__(self, widths: Sequence[int] = (16, 32, 64), seed: int = 4321):
        layers, cin = [], 3
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, stride=2, padding=1), nn.ReLU()]
            cin = w
        self.net = nn.Sequential(*layers).double()
        init_weights(self.net, seed)
        with torch.no_grad():
            for m in self.net:
                if isinstance(m, nn.Conv2d):
                    m.bias.fill_(0.01)
        self.net.requires_grad_(False)

    def embed(self, img):
        x = torch.as_tensor(np.asarray(img, dtype=np.float64)).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            return self.net(x).mean(dim=(2, 3)).squeeze(0).numpy()


def identity_distance(a: np.ndarray, b: np.ndarray, backend: EmbeddingBackend) -> tuple[float, float]:
    """(L2 distance, 1 - cosine similarity) between the two embeddings."""
    fa, fb = backend(a), backend(b)
    l2 = float(np.linalg.norm(fa - fb))
    cos = float(max(0.0, 1.0 - float(fa @ fb)))
    return l2, cos


def rank_topk(
    probe: np.ndarray, gallery: Sequence[np.ndarray], backend: EmbeddingBackend, k: int = 1
) -> list[int]:
    """Indices of the ``k`` gallery images nearest to ``probe`` by identity L2 distance."""
    f = backend(probe)
    dists = np.array([np.linalg.norm(f - backend(g)) for g in gallery])
    return [int(i) for i in np.argsort(dists, kind="stable")[:k]]


def topk_accuracy(probes, probe_ids, gallery, gallery_ids, backend, k: int) -> float:
    """Fraction of probes whose true identity appears among the top-``k`` matches."""
    hits = 0
    for img, pid in zip(probes, probe_ids):
        hits += any(gallery_ids[i] == pid for i in rank_topk(img, gallery, backend, k))
    return hits / len(probes)


# -- reports -----------------------------------------------------------------


def _stats(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "worst": float(arr.min())}


@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)

    def add(self, sample_id: str, kernel_size: int, psnr_db: float, ssim_val: float) -> None:
        self.records.append({"id": sample_id, "kernel_size": int(kernel_size), "psnr": psnr_db, "ssim": ssim_val})

    def aggregates(self) -> dict:
        """Mean/std/worst per kernel size and overall (population std)."""
        if not self.records:
            raise ValueError("empty report")
        groups: dict[int, list[dict]] = {}
        for rec in self.records:
            groups.setdefault(rec["kernel_size"], []).append(rec)
        out = {"by_kernel_size": {}, "overall": {}}
        for size in sorted(groups):
            recs = groups[size]
            out["by_kernel_size"][size] = {
                "count": len(recs),
                "psnr": _stats([r["psnr"] for r in recs]),
                "ssim": _stats([r["ssim"] for r in recs]),
            }
        out["overall"] = {
            "count": len(self.records),
            "psnr": _stats([r["psnr"] for r in self.records]),
            "ssim": _stats([r["ssim"] for r in self.records]),
        }
        return out


def write_table_csv(path: Path, reports: Mapping[str, MetricReport]) -> None:
    """One row per method; columns are kernel sizes x {PSNR, SSIM}, then overall."""
    aggs = {name: rep.aggregates() for name, rep in reports.items()}
    sizes = sorted({s for a in aggs.values() for s in a["by_kernel_size"]})
    header = ["method"]
    for s in sizes:
        header += [f"{s}x{s} PSNR", f"{s}x{s} SSIM"]
    header += ["avg PSNR", "avg SSIM", "worst PSNR", "worst SSIM"]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for name, agg in aggs.items():
            row = [name]
            for s in sizes:
                g = agg["by_kernel_size"].get(s)
                row += [f"{g['psnr']['mean']:.4f}", f"{g['ssim']['mean']:.4f}"] if g else ["", ""]
            o = agg["overall"]
            row += [f"{o['psnr']['mean']:.4f}", f"{o['ssim']['mean']:.4f}",
                    f"{o['psnr']['worst']:.4f}", f"{o['ssim']['worst']:.4f}"]
            writer.writerow(row)


def restore_image(model, img: np.ndarray) -> np.ndarray:
    """Deblur one H x W x 3 image; odd sizes are reflect-padded and cropped back."""
    h, w = img.shape[:2]
    param = next(model.parameters())
    x = torch.as_tensor(np.asarray(img), dtype=param.dtype).permute(2, 0, 1).unsqueeze(0)
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    with torch.no_grad():
        y = model(x)["y"].clamp(0.0, 1.0)
    return y[0, :, :h, :w].permute(1, 2, 0).double().numpy()


def benchmark_report(
    manifest: Path,
    restore: Callable[[np.ndarray], np.ndarray],
    out_dir: Path,
    method: str = "model",
    max_grids: int = 16,
) -> MetricReport:
    """Evaluate ``restore`` on every manifest sample and write the report files.

    Writes ``report.json`` (per-sample records and aggregates), ``table.csv``
    and ``grids/*.png`` (blurred | deblurred | ground truth).
    """
    manifest = Path(manifest)
    out_dir = Path(out_dir)
    entries = read_manifest(manifest)
    report = MetricReport()
    for i, entry in enumerate(entries):
        sample = load_sample(entry, manifest.parent)
        out = np.clip(restore(sample.blurred), 0.0, 1.0)
        sid = f"{entry['source_id']}__{entry['kernel_id']}"
        report.add(sid, sample.kernel_size, psnr(out, sample.clear), ssim(out, sample.clear))
        if i < max_grids:
            grid = np.concatenate([sample.blurred, out, sample.clear], axis=1)
            save_image(out_dir / "grids" / f"{i:04d}_{sid.replace('/', '_')}.png", grid)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"method": method, "records": report.records, "aggregates": report.aggregates()}
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_table_csv(out_dir / "table.csv", {method: report})
    return report


def model_restorer(model) -> Callable[[np.ndarray], np.ndarray]:
    model.eval()
    return lambda img: restore_image(model, img)
