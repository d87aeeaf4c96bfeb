"""Parsing, content, local structural, perceptual and adversarial losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import DEFAULT_SCHEMA, ComponentMask, LabelSchema
from .networks import init_weights

EPS = 1e-12

TERMS = ("L_c", "L_s", "L_p", "L_vgg", "L_adv")

# Terms each progressive-training stage optimizes.
STAGE_TERMS = {
    1: ("L_c",),
    2: ("L_p",),
    3: ("L_c", "L_s", "L_vgg", "L_adv"),
    4: ("L_c", "L_s", "L_p", "L_vgg", "L_adv"),
}


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 50.0
    lambda_p: float = 1e-4
    lambda_vgg: float = 1e-5
    lambda_adv: float = 5e-5
    c: float = 1.0
    structural_mode: str = "adaptive"  # or "equal"

    def __post_init__(self):
        for name in ("lambda_s", "lambda_p", "lambda_vgg", "lambda_adv", "c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.structural_mode not in ("adaptive", "equal"):
            raise ValueError(f"unknown structural mode {self.structural_mode!r}")

    def weight_of(self, term: str) -> float:
        return {
            "L_c": 1.0,
            "L_s": self.lambda_s,
            "L_p": self.lambda_p,
            "L_vgg": self.lambda_vgg,
            "L_adv": self.lambda_adv,
        }[term]


def parsing_loss(p: torch.Tensor, labels: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Cross-entropy of probabilities ``p`` (B x K x H x W) against integer labels."""
    if p.shape[0] != labels.shape[0] or p.shape[2:] != labels.shape[1:]:
        raise ValueError(f"probabilities {tuple(p.shape)} and labels {tuple(labels.shape)} disagree")
    picked = p.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(eps)).mean()


def content_loss(
    y_gt: torch.Tensor,
    y_c: torch.Tensor | None = None,
    y: torch.Tensor | None = None,
    y_gt_half: torch.Tensor | None = None,
    y_c_half: torch.Tensor | None = None,
    y_half: torch.Tensor | None = None,
) -> torch.Tensor:
    """Sum of mean absolute errors over every prediction that is given.

    Half-scale predictions are compared with ``y_gt_half``.
    """
    total = y_gt.new_zeros(())
    for pred in (y_c, y):
        if pred is not None:
            total = total + (pred - y_gt).abs().mean()
    for pred in (y_c_half, y_half):
        if pred is not None:
            if y_gt_half is None:
                raise ValueError("half-scale prediction given without y_gt_half")
            total = total + (pred - y_gt_half).abs().mean()
    return total


def adaptive_weight(mask: ComponentMask | int, c: float = 1.0) -> float:
    area = mask if isinstance(mask, (int, np.integer)) else mask.area
    if area < 1:
        raise ValueError("component area must be >= 1")
    return c / area


def component_masks(labels: torch.Tensor, schema: LabelSchema = DEFAULT_SCHEMA) -> torch.Tensor:
    """B x H x W labels -> B x M x H x W float masks, one per structural component."""
    classes = torch.tensor(schema.component_classes, device=labels.device)
    return (labels.unsqueeze(1) == classes.view(1, -1, 1, 1)).to(torch.get_default_dtype())


def _as_mask_tensor(masks, like: torch.Tensor) -> torch.Tensor:
    if isinstance(masks, torch.Tensor):
        return masks.to(like.dtype)
    if len(masks) == 0:
        return like.new_zeros((like.shape[0], 0) + tuple(like.shape[-2:]))
    stacked = np.stack([m.mask for m in masks]).astype(np.float64)
    return torch.as_tensor(stacked, dtype=like.dtype).unsqueeze(0).expand(like.shape[0], -1, -1, -1)


def structural_loss(
    y: torch.Tensor,
    y_gt: torch.Tensor,
    masks: torch.Tensor | Sequence[ComponentMask],
    mode: str = "adaptive",
    c: float = 1.0,
) -> torch.Tensor:
    """Sum over components of w_k * ||M_k * (y - y_gt)||_1, averaged over the batch.

    The norm sums the channel-mean absolute error over the masked pixels.
    ``w_k`` is 1 in ``equal`` mode and ``c / A_k`` in ``adaptive`` mode;
    components with zero area contribute nothing.
    """
    if y.dim() == 3:
        y, y_gt = y.unsqueeze(0), y_gt.unsqueeze(0)
    m = _as_mask_tensor(masks, y)
    if m.shape[1] == 0:
        return y.new_zeros(())
    err = (y - y_gt).abs().mean(dim=1, keepdim=True)  # B x 1 x H x W
    per_comp = (m * err).sum(dim=(2, 3))  # B x M
    if mode == "adaptive":
        area = m.sum(dim=(2, 3))
        w = torch.where(area > 0, c / area.clamp_min(1.0), torch.zeros_like(area))
    elif mode == "equal":
        w = torch.ones_like(per_comp)
    else:
        raise ValueError(f"unknown structural mode {mode!r}")
    return (w * per_comp).sum(dim=1).mean()


class FeatureExtractor(nn.Module):
    """Frozen conv feature network with two tap layers.

    The default is a randomly initialized (fixed seed) stack of five
    conv-ReLU-maxpool blocks tapped after the second and fifth pooling,
    standing in for VGG-Face pool2/pool5. Any module returning a list of
    feature tensors from ``forward`` can be used instead.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 64, 64), taps: Sequence[int] = (1, 4), seed: int = 1234):
        super().__init__()
        self.taps = tuple(taps)
        convs, cin = [], 3
        for w in widths:
            convs.append(nn.Conv2d(cin, w, 3, padding=1))
            cin = w
        self.convs = nn.ModuleList(convs)
        init_weights(self, seed)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, img):
        feats = []
        h = img
        for i, conv in enumerate(self.convs):
            h = F.max_pool2d(F.relu(conv(h)), 2)
            if i in self.taps:
                feats.append(h)
        return feats

    def train(self, mode: bool = True):
        return super().train(False)


def perceptual_loss(y: torch.Tensor, y_gt: torch.Tensor, fx: nn.Module) -> torch.Tensor:
    """Sum over tapped layers of the mean absolute feature difference."""
    total = y.new_zeros(())
    for fa, fb in zip(fx(y), fx(y_gt)):
        total = total + (fa - fb).abs().mean()
    return total


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor, eps: float = EPS):
    """Discriminator loss -log D(real) - log(1 - D(fake)) and generator loss -log D(fake)."""
    loss_d = -torch.log(d_real.clamp_min(eps)) - torch.log((1.0 - d_fake).clamp_min(eps))
    loss_g = -torch.log(d_fake.clamp_min(eps))
    return loss_d.mean(), loss_g.mean()


def total_loss(terms: Mapping[str, torch.Tensor], w: LossWeights, stage: int = 4):
    """Weighted sum of the terms active in ``stage``.

    Returns ``(total, breakdown)`` where ``breakdown`` maps each active term
    to its weighted contribution as a float; the contributions are summed in
    term order, so they add up to ``total`` exactly. In stage 2 the parsing
    loss is the sole objective and carries weight 1. Zero-weight terms stay
    out of the graph.
    """
    if stage not in STAGE_TERMS:
        raise ValueError(f"stage must be one of {sorted(STAGE_TERMS)}, got {stage}")
    active = STAGE_TERMS[stage]
    missing = [t for t in active if t not in terms]
    if missing:
        raise KeyError(f"stage {stage} needs terms {missing}")
    total = None
    breakdown = {}
    for name in active:
        weight = 1.0 if stage == 2 else w.weight_of(name)
        if weight == 0.0:
            breakdown[name] = 0.0
            continue
        # float64 accumulation keeps the breakdown and the total consistent
        contrib = torch.as_tensor(terms[name]).double()
        if weight != 1.0:
            contrib = weight * contrib
        breakdown[name] = float(contrib.detach())
        total = contrib if total is None else total + contrib
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return total, breakdown
