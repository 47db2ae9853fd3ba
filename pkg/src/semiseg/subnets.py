"""The two structurally different student networks.

``UNet2d`` concatenates encoder features into the decoder; ``ResVNet2d`` is a
2D take on V-Net with residual stages, strided-conv downsampling and additive
encoder/decoder skips. Keeping the skip types different keeps the two views
from collapsing into the same function.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import debug_check


def _conv_bn(in_ch, out_ch, k=3):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, k, padding=k // 2),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(0.1, inplace=True),
    )


class DoubleConv(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(_conv_bn(in_ch, out_ch), _conv_bn(out_ch, out_ch))


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.PReLU(out_ch),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
        )
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)
        self.act = nn.PReLU(out_ch)

    def forward(self, x):
        return self.act(self.body(x) + self.skip(x))


class SegNet(nn.Module):
    variant = "?"

    def __init__(self, in_channels=1, num_classes=2, depth=4, base_width=16):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.depth = depth
        self.base_width = base_width

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def _check(self, x):
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ValueError(
                f"input {h}x{w} not divisible by {self.divisor} (required for depth {self.depth})"
            )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(logits, probabilities)`` for a ``(B, channels, H, W)`` batch."""
        self._check(x)
        logits = self.logits(x)
        return logits, debug_check(logits.softmax(dim=1))


class UNet2d(SegNet):
    variant = "A"

    def __init__(self, in_channels=1, num_classes=2, depth=4, base_width=16):
        super().__init__(in_channels, num_classes, depth, base_width)
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.inc = DoubleConv(in_channels, widths[0])
        self.down = nn.ModuleList(DoubleConv(widths[i], widths[i + 1]) for i in range(depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(depth))
        )
        self.dec = nn.ModuleList(DoubleConv(2 * widths[i], widths[i]) for i in reversed(range(depth)))
        self.out = nn.Conv2d(widths[0], num_classes, 1)

    def logits(self, x):
        skips = [self.inc(x)]
        for block in self.down:
            skips.append(block(F.max_pool2d(skips[-1], 2)))
        h = skips.pop()
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([skips.pop(), up(h)], dim=1))
        return self.out(h)


class ResVNet2d(SegNet):
    variant = "B"

    def __init__(self, in_channels=1, num_classes=2, depth=4, base_width=16):
        super().__init__(in_channels, num_classes, depth, base_width)
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.inc = ResBlock(in_channels, widths[0])
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(widths[i], widths[i + 1], 2, stride=2), ResBlock(widths[i + 1], widths[i + 1]))
            for i in range(depth)
        )
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(depth))
        )
        self.dec = nn.ModuleList(ResBlock(widths[i], widths[i]) for i in reversed(range(depth)))
        self.out = nn.Conv2d(widths[0], num_classes, 1)

    def logits(self, x):
        skips = [self.inc(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        h = skips.pop()
        for up, dec in zip(self.up, self.dec):
            h = dec(up(h) + skips.pop())
        return self.out(h)


def build_subnet(variant: str, **kw) -> SegNet:
    if variant == "A":
        return UNet2d(**kw)
    if variant == "B":
        return ResVNet2d(**kw)
    raise ValueError(f"unknown subnet variant {variant!r} (expected 'A' or 'B')")


def subnet_forward(net: SegNet, x: torch.Tensor):
    return net(x)


def count_params(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
