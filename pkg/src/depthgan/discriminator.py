"""Switchable discriminator: RGBD realness scoring and RGB-to-depth-class prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import EqualConv2d, EqualLinear, lrelu

__all__ = ["DiscriminatorConfig", "DepthBranch", "SwitchableDiscriminator", "depth_to_input"]


@dataclass
class DiscriminatorConfig:
    resolution: int = 64
    channel_base: int = 1024
    channel_max: int = 64
    depth_classes: int = 10
    branch_channels: int = 32

    def __post_init__(self):
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {r}")
        if self.depth_classes < 2:
            raise ValueError(f"need at least two depth classes, got {self.depth_classes}")

    def channels(self, res: int) -> int:
        return max(1, min(self.channel_max, self.channel_base // res))

    @property
    def branch_taps(self) -> List[int]:
        """Trunk resolutions feeding the depth branch, smallest first.

        64, 32 and 16 whenever the input is larger than 64; otherwise the three
        largest resolutions strictly below the input.
        """
        if self.resolution < 64:
            return []
        top = min(64, self.resolution // 2)
        return [top // 4, top // 2, top]


def depth_to_input(depth: torch.Tensor, near: float, far: float) -> torch.Tensor:
    """Map camera-unit depth in [near, far] to the discriminator's [-1, 1] range."""
    return 2.0 * (depth - near) / (far - near) - 1.0


class DownBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = EqualConv2d(in_ch, in_ch, 3, activation=True)
        self.conv2 = EqualConv2d(in_ch, out_ch, 3, activation=True)
        self.skip = EqualConv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        y = self.conv2(F.avg_pool2d(self.conv1(x), 2))
        s = self.skip(F.avg_pool2d(x, 2))
        return (y + s) / math.sqrt(2.0)


class DepthBranch(nn.Module):
    """Coarse-to-fine head over trunk features.

    At each tap: conv + leaky ReLU, a residual pair of convs, then upsample
    and concatenate with the next (larger) tap. A 1x1 conv emits the class logits.
    """

    def __init__(self, tap_channels: List[int], width: int, classes: int):
        super().__init__()
        self.entry = nn.ModuleList()
        self.res1 = nn.ModuleList()
        self.res2 = nn.ModuleList()
        for i, ch in enumerate(tap_channels):
            in_ch = ch + (width if i else 0)
            self.entry.append(EqualConv2d(in_ch, width, 3, activation=True))
            self.res1.append(EqualConv2d(width, width, 3, activation=True))
            self.res2.append(EqualConv2d(width, width, 3))
        self.head = EqualConv2d(width, classes, 1)

    def forward(self, taps):
        x = None
        for i, feat in enumerate(taps):
            if x is not None:
                x = F.interpolate(x, size=feat.shape[-2:], mode="bilinear", align_corners=False)
                feat = torch.cat([feat, x], dim=1)
            x = self.entry[i](feat)
            x = x + self.res2[i](self.res1[i](x))
        return self.head(x)


class SwitchableDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        top = cfg.channels(cfg.resolution)
        self.rgb_in = EqualConv2d(3, top, 1)  # Γ0
        self.depth_in = EqualConv2d(1, top, 1, bias=False)  # Γ1
        blocks = []
        r = cfg.resolution
        while r > 4:
            blocks.append(DownBlock(cfg.channels(r), cfg.channels(r // 2)))
            r //= 2
        self.blocks = nn.ModuleList(blocks)
        c4 = cfg.channels(4)
        self.final_conv = EqualConv2d(c4, c4, 3, activation=True)
        self.fc = EqualLinear(c4 * 16, c4, activation=True)
        self.out = EqualLinear(c4, 1)
        taps = cfg.branch_taps
        self.branch = DepthBranch([cfg.channels(t) for t in taps], cfg.branch_channels, cfg.depth_classes) if taps else None

    def _check(self, rgb, depth=None):
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ValueError(f"rgb must be (B, 3, H, W), got {tuple(rgb.shape)}")
        if rgb.shape[-1] != self.cfg.resolution or rgb.shape[-2] != self.cfg.resolution:
            raise ValueError(f"expected {self.cfg.resolution}px input, got {tuple(rgb.shape[-2:])}")
        if depth is not None and (depth.shape[0] != rgb.shape[0] or depth.shape[1] != 1 or depth.shape[-2:] != rgb.shape[-2:]):
            raise ValueError(f"depth {tuple(depth.shape)} does not match rgb {tuple(rgb.shape)}")

    def input_features(self, rgb, depth: Optional[torch.Tensor] = None):
        x = self.rgb_in(rgb)
        if depth is not None:
            x = x + self.depth_in(depth)
        return lrelu(x)

    def trunk(self, x):
        """Run all down blocks and return the final 4x4 features."""
        for block in self.blocks:
            x = block(x)
        return x

    def head(self, x):
        x = self.final_conv(x)
        return self.out(self.fc(x.flatten(1)))[:, 0]

    def score(self, rgb: torch.Tensor, depth: Optional[torch.Tensor]) -> torch.Tensor:
        """Realness logit per sample; ``depth`` is already mapped to [-1, 1]."""
        if depth is None:
            raise ValueError("realness scoring needs the depth channel")
        self._check(rgb, depth)
        return self.head(self.trunk(self.input_features(rgb, depth)))

    def predict_depth(self, rgb: torch.Tensor) -> torch.Tensor:
        """Per-pixel class logits ``(B, k, h, h)`` from RGB alone (Γ1 unused)."""
        if self.branch is None:
            raise ValueError(
                f"depth prediction needs at least 64px inputs; this discriminator takes {self.cfg.resolution}px"
            )
        self._check(rgb)
        taps = {}
        want = set(self.cfg.branch_taps)
        x = self.input_features(rgb)
        smallest = min(want)
        for block in self.blocks:
            x = block(x)
            if x.shape[-1] in want:
                taps[x.shape[-1]] = x
            if x.shape[-1] == smallest:
                break
        return self.branch([taps[r] for r in sorted(want)])

    @property
    def branch_resolution(self) -> int:
        return max(self.cfg.branch_taps) if self.cfg.branch_taps else 0

    def forward(self, rgb, depth=None):
        return self.score(rgb, depth) if depth is not None else self.predict_depth(rgb)
