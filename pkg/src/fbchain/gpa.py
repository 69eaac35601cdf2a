"""Global pyramid attention: pair-wise pyramid fusion plus global context.

The top encoder feature is lifted into a pyramid (scale r has C/r channels
at r times the resolution), adjacent scales gate each other pair by pair
from the finest pair back up to the top scale, and the result is enriched
by a Gram-matrix context term scaled by a learnable ``alpha``.
"""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from fbchain.errors import ConfigError, NumericError, ShapeError

GPA_MODES = ("full", "ppa_only", "gcm_only", "off")


def upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


class PyramidBuilder(nn.Module):
    """``f_r = conv1x1(bilinear_up_r(f_top))`` with C/r output channels."""

    def __init__(self, channels: int, scales: Sequence[int] = (1, 2, 4, 8)):
        super().__init__()
        scales = tuple(scales)
        if scales[0] != 1 or any(b != 2 * a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"pyramid scales must be 1, 2, 4, ...; got {scales}")
        top = scales[-1]
        if channels % top:
            raise ConfigError(f"channel count {channels} is not divisible by the largest scale {top}")
        self.channels = channels
        self.scales = scales
        self.reduce = nn.ModuleDict(
            {str(r): nn.Conv2d(channels, channels // r, 1) for r in scales[1:]}
        )

    def forward(self, f_top: torch.Tensor) -> Dict[int, torch.Tensor]:
        if f_top.shape[1] != self.channels:
            raise ShapeError(f"channel axis mismatch: expected {self.channels}, got {f_top.shape[1]}")
        pyramid = {1: f_top}
        for r in self.scales[1:]:
            # 1x1 conv and bilinear resampling commute; reducing first is r^2 cheaper
            pyramid[r] = upsample(self.reduce[str(r)](f_top), r)
        return pyramid


class PairFuse(nn.Module):
    """Fuse a feature ``f_d`` (C, H, W) with its finer neighbour ``f_2d`` (C/2, 2H, 2W).

    Each side computes a one-channel spatial mask that gates the other::

        a_d  = sigmoid(conv(relu(up2(f_d))))           # at 2H x 2W
        a_2d = sigmoid(conv(relu(strided(f_2d))))      # at H x W
        out  = conv(cat(conv(a_2d * f_d), avgpool2(a_d * f_2d)))

    The output has f_d's shape.
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"pair fusion needs an even channel count, got {channels}")
        half = channels // 2
        self.channels = channels
        self.mask_coarse = nn.Conv2d(channels, 1, 1)
        self.down = nn.Conv2d(half, half, 3, stride=2, padding=1)
        self.mask_fine = nn.Conv2d(half, 1, 1)
        self.gate_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.out = nn.Conv2d(channels + half, channels, 1)
        self.force_masks: Optional[float] = None

    def masks(self, f_d: torch.Tensor, f_2d: torch.Tensor):
        if self.force_masks is not None:
            a_d = f_2d.new_full((f_2d.shape[0], 1) + tuple(f_2d.shape[-2:]), self.force_masks)
            a_2d = f_d.new_full((f_d.shape[0], 1) + tuple(f_d.shape[-2:]), self.force_masks)
            return a_d, a_2d
        a_d = torch.sigmoid(self.mask_coarse(F.relu(upsample(f_d, 2))))
        a_2d = torch.sigmoid(self.mask_fine(F.relu(self.down(f_2d))))
        return a_d, a_2d

    def branches(self, f_d: torch.Tensor, f_2d: torch.Tensor):
        self._check(f_d, f_2d)
        a_d, a_2d = self.masks(f_d, f_2d)
        coarse = self.gate_proj(a_2d * f_d)
        fine = F.avg_pool2d(a_d * f_2d, 2)
        return coarse, fine

    def forward(self, f_d: torch.Tensor, f_2d: torch.Tensor) -> torch.Tensor:
        coarse, fine = self.branches(f_d, f_2d)
        return self.out(torch.cat([coarse, fine], dim=1))

    def _check(self, f_d: torch.Tensor, f_2d: torch.Tensor) -> None:
        if f_d.dim() != 4 or f_2d.dim() != 4:
            raise ShapeError("pair fusion expects 4-axis feature maps")
        if f_d.shape[0] != f_2d.shape[0]:
            raise ShapeError(f"batch axis mismatch ({f_d.shape[0]} vs {f_2d.shape[0]})")
        if f_d.shape[1] != self.channels or f_2d.shape[1] * 2 != self.channels:
            raise ShapeError(
                f"channel axis: expected ({self.channels}, {self.channels // 2}), "
                f"got ({f_d.shape[1]}, {f_2d.shape[1]})"
            )
        for ax, name in ((2, "height"), (3, "width")):
            if f_2d.shape[ax] != 2 * f_d.shape[ax]:
                raise ShapeError(
                    f"{name} axis: scale ratio must be 2, got {f_d.shape[ax]} -> {f_2d.shape[ax]}"
                )


class PyramidAttention(nn.Module):
    """Progressive pair fusion from the finest pair back to the top scale."""

    def __init__(self, channels: int, scales: Sequence[int] = (1, 2, 4, 8)):
        super().__init__()
        self.pyramid = PyramidBuilder(channels, scales)
        self.scales = self.pyramid.scales
        # fuse[str(d)] pairs scale d with scale 2d
        self.fuse = nn.ModuleDict(
            {str(d): PairFuse(channels // d) for d in self.scales[:-1]}
        )

    def fuse_pyramid(self, pyramid: Dict[int, torch.Tensor]) -> torch.Tensor:
        finer = pyramid[self.scales[-1]]
        for d in reversed(self.scales[:-1]):
            finer = self.fuse[str(d)](pyramid[d], finer)
        return finer

    def forward(self, f_top: torch.Tensor) -> torch.Tensor:
        return self.fuse_pyramid(self.pyramid(f_top))


def correlation(f_norm: torch.Tensor) -> torch.Tensor:
    """``{R(f)^T R(f)}^T`` for every batch item; returns (B, P, P)."""
    r = f_norm.flatten(2)
    gram = torch.bmm(r.transpose(1, 2), r)
    return gram.transpose(1, 2)


class GlobalContext(nn.Module):
    """``f* = f + alpha * (f * f_g)`` with ``f_g = R^-1(R(f~) f_c)``.

    ``f~`` is the feature with each pixel's channel vector L2-normalised.
    ``normalize=False`` skips that step; it is a test hook only.
    """

    def __init__(self, alpha: float = 0.0, eps: float = 1e-12):
        super().__init__()
        self.alpha = nn.Parameter(torch.tensor(float(alpha)))
        self.eps = eps
        self.normalize = True

    def embed(self, f: torch.Tensor) -> torch.Tensor:
        if not self.normalize:
            return f
        return F.normalize(f, p=2, dim=1, eps=self.eps)

    def context(self, f: torch.Tensor):
        """Return (f_c, f_g) for a feature map."""
        f_tilde = self.embed(f)
        f_c = correlation(f_tilde)
        f_g = torch.bmm(f_tilde.flatten(2), f_c).view_as(f)
        if not torch.isfinite(f_g).all():
            worst = f_g[~torch.isfinite(f_g)].numel()
            raise NumericError(
                f"global context overflow: {worst} non-finite entries, "
                f"max |f~| = {f_tilde.abs().max().item():.3e}"
            )
        return f_c, f_g

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        _, f_g = self.context(f)
        return f + self.alpha * (f * f_g)


class GlobalPyramidAttention(nn.Module):
    def __init__(self, channels: int, mode: str = "full", scales: Sequence[int] = (1, 2, 4, 8)):
        super().__init__()
        if mode not in GPA_MODES:
            raise ConfigError(f"gpa mode must be one of {GPA_MODES}, got {mode!r}")
        self.mode = mode
        self.ppa = PyramidAttention(channels, scales) if mode in ("full", "ppa_only") else None
        self.gcm = GlobalContext() if mode in ("full", "gcm_only") else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = x
        if self.ppa is not None:
            out = self.ppa(out)
        if self.gcm is not None:
            out = self.gcm(out)
        return out


def gpa_forward(x: torch.Tensor, unit: Optional[GlobalPyramidAttention]) -> torch.Tensor:
    return x if unit is None else unit(x)
