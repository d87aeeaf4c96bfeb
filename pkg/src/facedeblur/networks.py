"""Coarse deblurring, face parsing, fine deblurring and discriminator networks.

All tensors are NCHW. Images live in [0, 1] but the deblurring networks have
linear outputs; clamp only when exporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DeblurNetConfig:
    scales: int = 2
    resblocks_per_scale: int = 6
    base_channels: int = 64
    first_kernel: int = 11
    other_kernel: int = 5
    upsample_kernel: int = 4
    # Plain conv+ReLU layers on each side of the ResBlock stack; with the
    # first and last conv this gives 18 convolutions per scale.
    plain_convs: int = 2
    upsample_mode: str = "bicubic"  # or "transposed" (learned, upsample_kernel wide)

    def __post_init__(self):
        if self.scales != 2:
            raise ValueError("only the two-scale configuration is supported")
        if self.first_kernel % 2 == 0 or self.other_kernel % 2 == 0:
            raise ValueError("first_kernel and other_kernel must be odd")
        if self.upsample_mode not in ("bicubic", "transposed"):
            raise ValueError(f"unknown upsample_mode {self.upsample_mode!r}")


@dataclass(frozen=True)
class ParsingNetConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256)


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_size: int = 128
    channels: tuple[int, ...] = (32, 64, 128, 256, 512, 512)

    @property
    def strided_layers(self) -> int:
        return len(self.channels)

    def __post_init__(self):
        if self.input_size % (2 ** self.strided_layers) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{self.strided_layers}"
            )


# -- resampling --------------------------------------------------------------


def downsample(img: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Bicubic downsampling by an integer factor (no antialiasing)."""
    h, w = img.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"spatial size {(h, w)} not divisible by {factor}")
    return F.interpolate(img, size=(h // factor, w // factor), mode="bicubic", align_corners=False)


def upsample_bicubic(img: torch.Tensor, factor: int = 2) -> torch.Tensor:
    h, w = img.shape[-2:]
    return F.interpolate(img, size=(h * factor, w * factor), mode="bicubic", align_corners=False)


def downsample_labels(labels: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Nearest-neighbour subsampling of a B x H x W label map."""
    return labels[..., factor // 2 :: factor, factor // 2 :: factor]


# -- building blocks -----------------------------------------------------------


def _conv(cin: int, cout: int, k: int, gain: float = 2.0, stride: int = 1) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2 if stride == 1 else (k - stride) // 2)
    conv.init_gain = gain
    return conv


class ResBlock(nn.Module):
    """conv -> ReLU -> conv, added to the input."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.conv1 = _conv(channels, channels, kernel)
        self.conv2 = _conv(channels, channels, kernel, gain=0.01)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class ScaleNet(nn.Module):
    """One scale of the deblurring network: features in, RGB out."""

    def __init__(self, in_channels: int, cfg: DeblurNetConfig):
        super().__init__()
        c, k = cfg.base_channels, cfg.other_kernel
        self.in_channels = in_channels
        self.head = _conv(in_channels, c, cfg.first_kernel)
        self.pre = nn.ModuleList(_conv(c, c, k) for _ in range(cfg.plain_convs))
        self.body = nn.ModuleList(ResBlock(c, k) for _ in range(cfg.resblocks_per_scale))
        self.post = nn.ModuleList(_conv(c, c, k) for _ in range(cfg.plain_convs))
        self.tail = _conv(c, 3, k, gain=1.0)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        h = F.relu(self.head(x))
        for conv in self.pre:
            h = F.relu(conv(h))
        for block in self.body:
            h = block(h)
        for conv in self.post:
            h = F.relu(conv(h))
        return self.tail(h)


class DeblurNet(nn.Module):
    """Two-scale deblurring network.

    ``guide_channels`` = 0 gives the coarse network (blurred image only).
    For the fine network the guide is concat(y_c, p), 3 + K channels, and
    the scale inputs are 3 + 3 + K and 3 + 3 + 3 + K channels.
    """

    def __init__(self, cfg: DeblurNetConfig, guide_channels: int = 0):
        super().__init__()
        self.cfg = cfg
        self.guide_channels = guide_channels
        self.scale1 = ScaleNet(3 + guide_channels, cfg)
        self.scale2 = ScaleNet(3 + 3 + guide_channels, cfg)
        if cfg.upsample_mode == "transposed":
            k = cfg.upsample_kernel
            self.up = nn.ConvTranspose2d(3, 3, k, stride=2, padding=(k - 2) // 2, bias=False)
            self.up.init_gain = 1.0
        else:
            self.up = None

    @property
    def input_channels(self) -> tuple[int, int]:
        return self.scale1.in_channels, self.scale2.in_channels

    def _upsample(self, img):
        return upsample_bicubic(img) if self.up is None else self.up(img)

    def forward(self, x, guide=None):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} must be even")
        if self.guide_channels:
            if guide is None or guide.shape[1] != self.guide_channels:
                got = None if guide is None else guide.shape[1]
                raise ValueError(f"expected {self.guide_channels} guide channels, got {got}")
            in1 = torch.cat([downsample(x), downsample(guide)], dim=1)
        else:
            in1 = downsample(x)
        y_half = self.scale1(in1)
        up = self._upsample(y_half)
        if self.guide_channels:
            # order: x, y_c, U(y_half), p
            in2 = torch.cat([x, guide[:, :3], up, guide[:, 3:]], dim=1)
        else:
            in2 = torch.cat([x, up], dim=1)
        return self.scale2(in2), y_half


class ParsingNet(nn.Module):
    """Encoder-decoder with skip connections; returns per-pixel class probabilities."""

    def __init__(self, num_classes: int, cfg: ParsingNetConfig = ParsingNetConfig()):
        super().__init__()
        self.num_classes = num_classes
        w = cfg.widths
        self.down_factor = 2 ** len(w)
        self.enc = nn.ModuleList()
        cin = 3
        for cout in w:
            self.enc.append(_conv(cin, cout, 4, stride=2))
            cin = cout
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        skips = [3] + list(w[:-1])
        outs = list(w[:-1])[::-1] + [w[0]]
        for cout, skip in zip(outs, skips[::-1]):
            up = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
            up.init_gain = 2.0
            self.up.append(up)
            self.fuse.append(_conv(cout + skip, cout, 3))
            cin = cout
        self.head = _conv(cin, num_classes, 1, gain=1.0)

    def logits(self, img):
        h, w = img.shape[-2:]
        f = self.down_factor
        ph, pw = (-h) % f, (-w) % f
        x = F.pad(img, (0, pw, 0, ph), mode="replicate") if (ph or pw) else img
        feats = [x]
        h_ = x
        for conv in self.enc:
            h_ = F.relu(conv(h_))
            feats.append(h_)
        feats.pop()
        for up, fuse in zip(self.up, self.fuse):
            h_ = F.relu(up(h_))
            h_ = F.relu(fuse(torch.cat([h_, feats.pop()], dim=1)))
        out = self.head(h_)
        return out[..., :h, :w]

    def forward(self, img):
        return torch.softmax(self.logits(img), dim=1)


class Discriminator(nn.Module):
    """Strided convolutions with ReLU, global average, affine, sigmoid."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = 3
        for cout in cfg.channels:
            layers.append(_conv(cin, cout, 4, stride=2))
            cin = cout
        self.convs = nn.ModuleList(layers)
        self.fc = nn.Linear(cin, 1)
        self.fc.init_gain = 1.0

    def forward(self, img):
        s = self.cfg.input_size
        if tuple(img.shape[-2:]) != (s, s):
            raise ValueError(f"discriminator expects {s}x{s} input, got {tuple(img.shape[-2:])}")
        h = img
        for conv in self.convs:
            h = F.relu(conv(h))
        return torch.sigmoid(self.fc(h.mean(dim=(2, 3)))).squeeze(1)


# -- initialization ----------------------------------------------------------


def init_weights(module: nn.Module, seed: int) -> None:
    """Fan-in scaled Gaussian weights, zero biases, deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w[0, 0].numel() / (m.stride[0] * m.stride[1])
            else:
                fan_in = w[0].numel()
            std = math.sqrt(getattr(m, "init_gain", 2.0) / fan_in)
            with torch.no_grad():
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()


# -- full model --------------------------------------------------------------


SUBNETS = ("coarse", "parser", "fine", "disc")


class FaceDeblurModel(nn.Module):
    """G_c -> P -> G_f (optionally cascaded N times) plus the discriminator."""

    def __init__(
        self,
        deblur_cfg: DeblurNetConfig = DeblurNetConfig(),
        num_classes: int = 11,
        parsing_cfg: ParsingNetConfig = ParsingNetConfig(),
        disc_cfg: DiscriminatorConfig = DiscriminatorConfig(),
        num_fine: int = 1,
        share_fine: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        if num_fine < 1:
            raise ValueError("num_fine must be >= 1")
        self.num_classes = num_classes
        self.num_fine = num_fine
        self.share_fine = share_fine
        self.coarse = DeblurNet(deblur_cfg)
        self.parser = ParsingNet(num_classes, parsing_cfg)
        n_modules = 1 if share_fine else num_fine
        self.fine = nn.ModuleList(DeblurNet(deblur_cfg, guide_channels=3 + num_classes) for _ in range(n_modules))
        self.disc = Discriminator(disc_cfg)
        for i, name in enumerate(SUBNETS):
            init_weights(getattr(self, name), seed * 1000 + i)

    def subnet(self, name: str) -> nn.Module:
        if name not in SUBNETS:
            raise KeyError(name)
        return getattr(self, name)

    def coarse_forward(self, x):
        return self.coarse(x)

    def parsing_forward(self, y_c):
        return self.parser(y_c)

    def fine_forward(self, x, y_c, p, stage: int = 0):
        net = self.fine[0 if self.share_fine else stage]
        return net(x, torch.cat([y_c, p], dim=1))

    def cascade_fine(self, x, y_c, p, n: int | None = None):
        """Run ``n`` fine stages; stage i > 1 takes the previous stage's output."""
        n = self.num_fine if n is None else n
        if not 1 <= n <= self.num_fine:
            raise ValueError(f"n must lie in [1, {self.num_fine}]")
        prev = y_c
        for i in range(n):
            y, y_half = self.fine_forward(x, prev, p, i)
            prev = y
        return y, y_half

    def forward(self, x, upto: str = "fine") -> dict:
        out = {}
        out["y_c"], out["y_c_half"] = self.coarse(x)
        if upto == "coarse":
            return out
        out["p"] = self.parser(out["y_c"])
        if upto == "parser":
            return out
        out["y"], out["y_half"] = self.cascade_fine(x, out["y_c"], out["p"])
        return out

    def restore(self, x):
        with torch.no_grad():
            return self.forward(x)["y"].clamp(0.0, 1.0)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
