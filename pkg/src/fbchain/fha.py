"""Feature handover attention.

The backbone feature of a level is gated by a spatial mask computed from
itself, the result is gated again by a channel mask computed from the
feedback feature, and both gates keep a residual path::

    low'  = low * A_s + low
    out   = low' * A_c + low'
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from fbchain.errors import ShapeError


def check_same(a: torch.Tensor, b: torch.Tensor, axes=(0, 2, 3), what="inputs") -> None:
    names = {0: "batch", 1: "channel", 2: "height", 3: "width"}
    if a.dim() != 4 or b.dim() != 4:
        raise ShapeError(f"{what}: expected 4-axis feature maps, got {tuple(a.shape)} and {tuple(b.shape)}")
    for ax in axes:
        if a.shape[ax] != b.shape[ax]:
            raise ShapeError(
                f"{what}: {names[ax]} axis mismatch ({a.shape[ax]} vs {b.shape[ax]})"
            )


class SpatialAttention(nn.Module):
    """Channel-pooled (mean, max) descriptor -> 7x7 conv -> sigmoid.

    Returns a map of shape (B, H, W) with entries in (0, 1).
    """

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    @staticmethod
    def descriptor(x: torch.Tensor) -> torch.Tensor:
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.cat([avg, mx], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(self.descriptor(x))).squeeze(1)


class ChannelAttention(nn.Module):
    """Shared bottleneck over spatially average- and max-pooled vectors.

    ``out_channels`` lets the mask be produced for a feature with a
    different width than the one it was computed from; the projection is
    applied to the pre-sigmoid logits so the result stays in (0, 1).
    """

    def __init__(self, channels: int, reduction: int = 4, out_channels: Optional[int] = None):
        super().__init__()
        if channels < reduction:
            reduction = 1
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1),
        )
        self.project = None
        if out_channels is not None and out_channels != channels:
            self.project = nn.Conv2d(channels, out_channels, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        z = self.mlp(avg) + self.mlp(mx)
        if self.project is not None:
            z = self.project(z)
        return z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, C)
        return torch.sigmoid(self.logits(x)).flatten(1)


class FeatureHandover(nn.Module):
    """Merge a backbone feature (``low``) with a feedback feature (``high``).

    ``force_spatial`` / ``force_channel`` pin the corresponding mask to a
    constant. They exist for tests and ablation probes; leave them at None
    for normal use.
    """

    def __init__(self, low_channels: int, high_channels: Optional[int] = None, reduction: int = 4,
                 kernel_size: int = 7):
        super().__init__()
        high_channels = high_channels or low_channels
        self.spatial = SpatialAttention(kernel_size)
        self.channel = ChannelAttention(high_channels, reduction, out_channels=low_channels)
        self.force_spatial: Optional[float] = None
        self.force_channel: Optional[float] = None

    def masks(self, low: torch.Tensor, high: torch.Tensor):
        if self.force_spatial is None:
            a_s = self.spatial(low)
        else:
            a_s = low.new_full((low.shape[0], low.shape[2], low.shape[3]), self.force_spatial)
        if self.force_channel is None:
            a_c = self.channel(high)
        else:
            a_c = low.new_full((low.shape[0], low.shape[1]), self.force_channel)
        return a_s, a_c

    def forward(self, low: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
        check_same(low, high, what="handover merge")
        a_s, a_c = self.masks(low, high)
        return merge(low, a_s, a_c)


def merge(low: torch.Tensor, a_s: torch.Tensor, a_c: torch.Tensor) -> torch.Tensor:
    """Apply the two residual gates given precomputed masks.

    a_s: (B, H, W) broadcast over channels; a_c: (B, C) broadcast over space.
    """
    low2 = low * a_s.unsqueeze(1) + low
    return low2 * a_c[:, :, None, None] + low2
