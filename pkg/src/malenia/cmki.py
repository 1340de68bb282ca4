"""Cross-modal fusion of mask tokens with their attribute embeddings.

Each token's positive attribute embeddings are concatenated (aspect order)
and squeezed to a single text vector; the token and text banks then exchange
information through bidirectional cross-attention followed by self-attention.
Both enhanced branches predict a mask set against full-resolution features,
and the two predictions are ensembled into the final segmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .alignment import PairSets, soft_dice_loss
from .errors import ShapeError
from .maskdecoder import _Attention, Assignment

ATTRIBUTES_PER_TOKEN = 8


@dataclass
class FusedPair:
    m_hat: torch.Tensor  # (B, N, C)
    t_hat: torch.Tensor  # (B, N, C)


@dataclass
class PredictionBundle:
    mask_m: torch.Tensor  # (B, N, H, W, D) vision-branch logits
    mask_t: torch.Tensor  # (B, N, H, W, D) text-branch logits
    mask: torch.Tensor  # (B, N, H, W, D) ensembled logits
    labels: torch.Tensor  # (B, H, W, D) argmax token index


class AttributeAggregator(nn.Module):
    """Concatenated attribute embeddings -> one text vector per token."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(
            nn.Linear(ATTRIBUTES_PER_TOKEN * dim, dim),
            nn.GELU(),
            nn.Linear(dim, dim),
        )

    def forward(self, bank_vectors: torch.Tensor, pairs: PairSets) -> torch.Tensor:
        """(R+1, C) bank plus per-token positive ids -> (N, C)."""
        if bank_vectors.shape[-1] != self.dim:
            raise ShapeError(
                f"bank dim {bank_vectors.shape[-1]} != aggregator dim {self.dim}"
            )
        rows = []
        for pos in pairs.positives:
            if len(pos) == ATTRIBUTES_PER_TOKEN:
                ids = list(pos)
            elif len(pos) == 1:
                # background: tile the single embedding so the same MLP applies
                ids = list(pos) * ATTRIBUTES_PER_TOKEN
            else:
                raise ShapeError(
                    f"token has {len(pos)} positives, expected 1 or "
                    f"{ATTRIBUTES_PER_TOKEN}"
                )
            rows.append(bank_vectors[ids].reshape(-1))
        return self.mlp(torch.stack(rows))


def aggregate_attributes(token_index: int, pairs: PairSets,
                         bank_vectors: torch.Tensor,
                         aggregator: AttributeAggregator) -> torch.Tensor:
    """Aggregated text vector (C,) for one token."""
    sub = PairSets(
        positives=(pairs.positives[token_index],),
        negatives=(pairs.negatives[token_index],),
    )
    return aggregator(bank_vectors, sub)[0]


class _SelfAttnLayer(nn.Module):
    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.attn = _Attention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(x + self.attn(x, x))


class FusionModule(nn.Module):
    """Bidirectional cross-attention with residuals, then self-attention."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.cross_m = _Attention(dim, heads)  # tokens query text
        self.cross_t = _Attention(dim, heads)  # text queries tokens
        self.self_m = _SelfAttnLayer(dim, heads)
        self.self_t = _SelfAttnLayer(dim, heads)

    def residuals(self, tokens, text):
        """Pre-self-attention residual sums (cross output + input)."""
        return (
            tokens + self.cross_m(tokens, text),
            text + self.cross_t(text, tokens),
        )

    def forward(self, tokens: torch.Tensor, text: torch.Tensor) -> FusedPair:
        if tokens.shape != text.shape:
            raise ShapeError(
                f"token shape {tuple(tokens.shape)} != text shape {tuple(text.shape)}"
            )
        fused_m, fused_t = self.residuals(tokens, text)
        return FusedPair(m_hat=self.self_m(fused_m), t_hat=self.self_t(fused_t))


class ProjectionHeads(nn.Module):
    """Independent linear projections for the two query branches and the keys."""

    def __init__(self, dim: int):
        super().__init__()
        self.phi_m = nn.Linear(dim, dim)
        self.phi_t = nn.Linear(dim, dim)
        self.phi_k = nn.Linear(dim, dim)

    def forward(self, m_hat, t_hat, f4):
        """m_hat/t_hat (B, N, C); f4 (B, C, H, W, D) -> (Q_m, Q_t, K)."""
        if f4.shape[1] != m_hat.shape[-1]:
            raise ShapeError(
                f"feature channels {f4.shape[1]} != token dim {m_hat.shape[-1]}"
            )
        q_m = self.phi_m(m_hat)
        q_t = self.phi_t(t_hat)
        k = torch.einsum("bcxyz,dc->bdxyz", f4, self.phi_k.weight)
        k = k + self.phi_k.bias[None, :, None, None, None]
        return q_m, q_t, k


def predict_masks(q_m: torch.Tensor, q_t: torch.Tensor,
                  k: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product mask logits for both branches, (B, N, H, W, D)."""
    c = q_m.shape[-1]
    if k.shape[1] != c or q_t.shape[-1] != c:
        raise ShapeError("query/key channel dimensions disagree")
    scale = math.sqrt(c)
    mask_m = torch.einsum("bnc,bcxyz->bnxyz", q_m, k) / scale
    mask_t = torch.einsum("bnc,bcxyz->bnxyz", q_t, k) / scale
    return mask_m, mask_t


class EnsembleHead(nn.Module):
    """Per-voxel channel-mixing head over the N mask channels.

    Residual one-hidden-layer MLP with a zero-initialized output layer, so the
    head is the identity map at initialization.
    """

    def __init__(self, num_tokens: int):
        super().__init__()
        self.fc1 = nn.Linear(num_tokens, num_tokens)
        self.fc2 = nn.Linear(num_tokens, num_tokens)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, pre: torch.Tensor) -> torch.Tensor:
        x = pre.movedim(1, -1)  # (B, H, W, D, N)
        x = x + self.fc2(F.gelu(self.fc1(x)))
        return x.movedim(-1, 1)


def ensemble(mask_m: torch.Tensor, mask_t: torch.Tensor, beta1: float,
             beta2: float, head: EnsembleHead) -> PredictionBundle:
    """Weighted combination of the two branches, mixed and argmaxed."""
    if beta1 < 0 or beta2 < 0:
        raise ShapeError("ensemble weights must be nonnegative")
    if mask_m.shape != mask_t.shape:
        raise ShapeError("branch mask shapes disagree")
    pre = beta1 * mask_m + beta2 * mask_t
    mask = head(pre)
    return PredictionBundle(
        mask_m=mask_m, mask_t=mask_t, mask=mask, labels=mask.argmax(dim=1)
    )


def build_seg_targets(assignment: Assignment, gt_masks, background_channel: int,
                      spatial) -> torch.Tensor:
    """Per-voxel token-channel targets; unassigned voxels -> background channel."""
    target = torch.full(tuple(spatial), background_channel, dtype=torch.long)
    gt = torch.as_tensor(gt_masks)
    for j, s in assignment.pairs:
        target[gt[s] > 0] = j
    return target


def seg_loss(mask: torch.Tensor, targets: torch.Tensor, alpha1: float = 2.0,
             alpha2: float = 2.0, active_channels=None) -> torch.Tensor:
    """BCE + dice on the ensembled logits against per-voxel channel targets.

    `mask` (N, H, W, D) logits; `targets` (H, W, D) channel indices.  Dice is
    averaged over `active_channels` (default: every channel present in the
    target map).
    """
    if mask.shape[1:] != targets.shape:
        raise ShapeError(
            f"mask spatial {tuple(mask.shape[1:])} != target {tuple(targets.shape)}"
        )
    n = mask.shape[0]
    onehot = F.one_hot(targets.long(), num_classes=n).movedim(-1, 0).to(mask)
    bce = F.binary_cross_entropy_with_logits(mask, onehot)
    if active_channels is None:
        active_channels = sorted(torch.unique(targets).tolist())
    dice_terms = [
        soft_dice_loss(torch.sigmoid(mask[c]), onehot[c]) for c in active_channels
    ]
    dice = torch.stack(dice_terms).mean() if dice_terms else bce * 0.0
    return alpha1 * bce + alpha2 * dice


def total_loss(l_deep, l_sim, l_seg, lambda1: float = 1.0, lambda2: float = 1.0,
               lambda3: float = 1.0):
    """Weighted sum of the three training objectives."""
    return lambda1 * l_deep + lambda2 * l_sim + lambda3 * l_seg
