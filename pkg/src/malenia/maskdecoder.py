"""Token decoder blocks, mask proposals, and set matching.

N learnable tokens are refined over three blocks, each attending to one
pyramid level coarse-to-fine (cross-attention over voxels, then self-attention
over tokens).  Proposals are per-voxel sigmoid dot products; ground-truth
segments are assigned to tokens by solving the linear assignment problem over
a dice+BCE cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import ShapeError, SizeError


@dataclass(frozen=True)
class Assignment:
    """One-to-one pairs (token index, ground-truth segment index)."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        tokens = [j for j, _ in self.pairs]
        segments = [s for _, s in self.pairs]
        if len(set(tokens)) != len(tokens) or len(set(segments)) != len(segments):
            raise SizeError("assignment must be injective in both coordinates")

    @property
    def token_for_segment(self) -> dict[int, int]:
        return {s: j for j, s in self.pairs}

    @property
    def matched_tokens(self) -> set[int]:
        return {j for j, _ in self.pairs}


def sinusoidal_position_encoding(spatial, dim, device=None, dtype=None):
    """3D sine/cosine position features, (V, dim) over the flattened grid."""
    if dim % 6:
        per_axis = dim // 3 + (dim // 3) % 2
    else:
        per_axis = dim // 3
    feats = []
    for axis, size in enumerate(spatial):
        pos = torch.arange(size, device=device, dtype=dtype or torch.float32)
        freqs = torch.arange(per_axis // 2, device=device, dtype=pos.dtype)
        div = torch.exp(-math.log(10000.0) * 2 * freqs / max(per_axis, 2))
        ang = pos[:, None] * div[None, :]
        enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)  # (size, per_axis)
        shape = [1, 1, 1, per_axis]
        shape[axis] = size
        expand = list(spatial) + [per_axis]
        feats.append(enc.reshape(shape).expand(expand))
    out = torch.cat(feats, dim=-1)[..., :dim]
    if out.shape[-1] < dim:
        pad = torch.zeros(*spatial, dim - out.shape[-1], device=device, dtype=out.dtype)
        out = torch.cat([out, pad], dim=-1)
    return out.reshape(-1, dim)


class _Attention(nn.Module):
    """Single-head (optionally multi-head) scaled dot-product attention."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ShapeError("token dim must be divisible by head count")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, keys, key_mask=None):
        """query (B, N, C), keys (B, V, C), key_mask (B, V) True = blocked."""
        b, n, c = query.shape
        h = self.heads
        q = self.q(query).reshape(b, n, h, c // h).transpose(1, 2)
        k = self.k(keys).reshape(b, keys.shape[1], h, c // h).transpose(1, 2)
        v = self.v(keys).reshape(b, keys.shape[1], h, c // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(c // h)
        if key_mask is not None:
            logits = logits.masked_fill(key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        if key_mask is not None:
            # rows with every key blocked contribute nothing instead of NaN
            dead = key_mask.all(dim=-1)[:, None, None, None]
            weights = torch.where(dead, torch.zeros_like(weights), weights)
        attended = (weights @ v).transpose(1, 2).reshape(b, n, c)
        return self.out(attended)


class DecoderBlock(nn.Module):
    """Cross-attention to one pyramid level, then self-attention over tokens.

    Each sub-layer is residual and normalized.  With `masked_attention`
    enabled, tokens only attend to voxels their current proposal marks as
    foreground (fully-blocked tokens fall back to dense attention).
    """

    def __init__(self, dim: int, heads: int = 1, masked_attention: bool = False):
        super().__init__()
        self.cross = _Attention(dim, heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.self_attn = _Attention(dim, heads)
        self.norm_self = nn.LayerNorm(dim)
        self.masked_attention = masked_attention

    def cross_attention(self, tokens, feats, key_mask=None):
        """Raw cross-attention output (pre-residual), tokens (B, N, C)."""
        return self.cross(tokens, feats, key_mask=key_mask)

    def forward(self, tokens, features, positions=None):
        """tokens (B, N, C); features (B, C, h, w, d) at this block's level."""
        if features.shape[1] != tokens.shape[-1]:
            raise ShapeError(
                f"feature channels {features.shape[1]} != token dim {tokens.shape[-1]}"
            )
        b, c = features.shape[:2]
        feats = features.flatten(2).transpose(1, 2)  # (B, V, C)
        if positions is not None:
            feats = feats + positions[None, :, :]
        key_mask = None
        if self.masked_attention:
            logits = torch.einsum("bnc,bvc->bnv", tokens,
                                  features.flatten(2).transpose(1, 2))
            fg = torch.sigmoid(logits) >= 0.5  # (B, N, V)
            dense = ~fg.any(dim=-1, keepdim=True)
            fg = fg | dense
            # per-token key masks need the token axis folded into the batch
            bt = tokens.reshape(b * tokens.shape[1], 1, c)
            ft = feats.repeat_interleave(tokens.shape[1], dim=0)
            out = self.cross(bt, ft, key_mask=~fg.reshape(b * tokens.shape[1], -1))
            attended = out.reshape(b, tokens.shape[1], c)
        else:
            attended = self.cross_attention(tokens, feats)
        tokens = self.norm_cross(tokens + attended)
        tokens = self.norm_self(tokens + self.self_attn(tokens, tokens))
        return tokens


def mask_proposal_logits(tokens: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Per-voxel token scores: (B, N, h, w, d) from (B, N, C) x (B, C, h, w, d)."""
    if tokens.shape[-1] != features.shape[1]:
        raise ShapeError(
            f"token dim {tokens.shape[-1]} != feature channels {features.shape[1]}"
        )
    return torch.einsum("bnc,bcxyz->bnxyz", tokens, features)


def mask_proposals(tokens: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Sigmoid proposal probabilities in (0, 1)."""
    return torch.sigmoid(mask_proposal_logits(tokens, features))


def upsample_logits(logits: torch.Tensor, spatial) -> torch.Tensor:
    """Trilinear upsampling in logit space, before any sigmoid."""
    if tuple(logits.shape[-3:]) == tuple(spatial):
        return logits
    return F.interpolate(
        logits.unsqueeze(0) if logits.ndim == 4 else logits,
        size=tuple(spatial), mode="trilinear", align_corners=False,
    ).reshape(*logits.shape[:-3], *spatial)


def matching_costs(proposals: torch.Tensor, gt_masks: torch.Tensor,
                   w_dice: float = 1.0, w_bce: float = 1.0) -> torch.Tensor:
    """(N, S) cost matrix: w_dice * (1 - soft dice) + w_bce * mean BCE."""
    if proposals.shape[1:] != gt_masks.shape[1:]:
        raise ShapeError(
            f"proposal shape {tuple(proposals.shape[1:])} != "
            f"ground truth shape {tuple(gt_masks.shape[1:])}"
        )
    p = proposals.flatten(1).double()
    g = gt_masks.flatten(1).double()
    inter = p @ g.T
    sums = p.sum(1)[:, None] + g.sum(1)[None, :]
    dice = (2 * inter + 1e-5) / (sums + 1e-5)
    eps = 1e-7
    pc = p.clamp(eps, 1 - eps)
    bce = -(torch.log(pc) @ g.T + torch.log1p(-pc) @ (1 - g).T) / p.shape[1]
    return w_dice * (1 - dice) + w_bce * bce


def bipartite_match(proposals: torch.Tensor, gt_masks: torch.Tensor,
                    w_dice: float = 1.0, w_bce: float = 1.0) -> Assignment:
    """Optimal one-to-one token/segment assignment under the dice+BCE cost.

    `proposals` are probabilities at ground-truth resolution, (N, H, W, D);
    `gt_masks` binary, (S, H, W, D) with S <= N.
    """
    n, s = proposals.shape[0], gt_masks.shape[0]
    if s > n:
        raise SizeError(f"{s} ground-truth segments exceed {n} tokens")
    if s == 0:
        return Assignment(pairs=())
    cost = matching_costs(proposals, torch.as_tensor(
        np.asarray(gt_masks) if not torch.is_tensor(gt_masks) else gt_masks
    ).to(proposals), w_dice, w_bce)
    rows, cols = linear_sum_assignment(cost.detach().cpu().numpy())
    return Assignment(pairs=tuple(sorted((int(j), int(t)) for j, t in zip(rows, cols))))
