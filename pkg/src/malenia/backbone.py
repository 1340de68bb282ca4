"""3D convolutional encoder-decoder emitting a four-level feature pyramid.

The pyramid exposes features at 1/32, 1/16, and 1/8 of the input resolution
(consumed by the token decoder blocks) plus full-resolution per-voxel features
(consumed by the prediction heads).  Every level is projected to the shared
token dimension C.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ShapeError

DEFAULT_WIDTHS = (8, 16, 32, 32, 32, 32)


@dataclass
class FeaturePyramid:
    """Features at (1/32, 1/16, 1/8, 1/1) of the input resolution, channels C."""

    f1: torch.Tensor  # (B, C, H/32, W/32, D/32)
    f2: torch.Tensor  # (B, C, H/16, W/16, D/16)
    f3: torch.Tensor  # (B, C, H/8,  W/8,  D/8)
    f4: torch.Tensor  # (B, C, H,    W,    D)

    def __post_init__(self):
        full = self.f4.shape[2:]
        for level, divisor in ((self.f1, 32), (self.f2, 16), (self.f3, 8)):
            expected = tuple(s // divisor for s in full)
            if tuple(level.shape[2:]) != expected:
                raise ShapeError(
                    f"pyramid level has spatial shape {tuple(level.shape[2:])}, "
                    f"expected {expected}"
                )

    @property
    def levels(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """The three coarse levels, coarse to fine."""
        return (self.f1, self.f2, self.f3)


def _norm(channels: int) -> nn.Module:
    # instance-style norm that stays well-defined on 1x1x1 bottleneck grids
    return nn.GroupNorm(1, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.act = nn.LeakyReLU(0.01, inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv3d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class Backbone(nn.Module):
    """Residual encoder-decoder with skip connections over 6 resolution levels."""

    def __init__(self, widths=DEFAULT_WIDTHS, token_dim: int = 32, in_ch: int = 1):
        super().__init__()
        if len(widths) != 6:
            raise ShapeError("backbone needs 6 stage widths (1/1 .. 1/32)")
        self.widths = tuple(widths)
        self.token_dim = token_dim
        enc = [ResBlock(in_ch, widths[0])]
        for k in range(1, 6):
            enc.append(ResBlock(widths[k - 1], widths[k], stride=2))
        self.encoder = nn.ModuleList(enc)
        # decoder stage k fuses upsampled deeper features with encoder level k
        dec = []
        for k in range(5):
            dec.append(ResBlock(widths[k + 1] + widths[k], widths[k]))
        self.decoder = nn.ModuleList(dec)
        self.bottleneck = ResBlock(widths[5], widths[5])
        # unify every pyramid level to the shared token dimension
        self.proj = nn.ModuleDict(
            {
                "f1": nn.Conv3d(widths[5], token_dim, 1),
                "f2": nn.Conv3d(widths[4], token_dim, 1),
                "f3": nn.Conv3d(widths[3], token_dim, 1),
                "f4": nn.Conv3d(widths[0], token_dim, 1),
            }
        )

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.ndim != 5:
            raise ShapeError(f"expected (B, C, H, W, D) input, got {tuple(x.shape)}")
        if any(s % 32 for s in x.shape[2:]):
            raise ShapeError(f"spatial shape {tuple(x.shape[2:])} not divisible by 32")
        skips = []
        h = x
        for stage in self.encoder:
            h = stage(h)
            skips.append(h)
        h = self.bottleneck(h)  # 1/32
        f1 = self.proj["f1"](h)
        dec_feats = {}
        for k in range(4, -1, -1):
            h = F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=False)
            h = self.decoder[k](torch.cat([h, skips[k]], dim=1))
            dec_feats[k] = h
        f2 = self.proj["f2"](dec_feats[4])  # 1/16
        f3 = self.proj["f3"](dec_feats[3])  # 1/8
        f4 = self.proj["f4"](dec_feats[0])  # full resolution
        return FeaturePyramid(f1=f1, f2=f2, f3=f3, f4=f4)


def encode_decode(volume_data, backbone: Backbone) -> FeaturePyramid:
    """Run a raw (H, W, D) array (or batched tensor) through the backbone."""
    x = torch.as_tensor(volume_data)
    if x.ndim == 3:
        x = x[None, None]
    dtype = next(backbone.parameters()).dtype
    return backbone(x.to(dtype))
