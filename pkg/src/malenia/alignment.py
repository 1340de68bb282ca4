"""Token/attribute contrastive alignment and per-scale mask supervision.

Matched foreground tokens are pulled towards the eight text embeddings of
their lesion's attribute values; background tokens towards the "no lesion
found" embedding.  Every other embedding in the bank acts as a negative.
The multi-positive contrastive loss is averaged over the three decoder
blocks, and proposals get dice supervision at every scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .attributes import ASPECTS, EmbeddingBank, BACKGROUND_ID
from .errors import (
    EmptyMaskError,
    NumericalError,
    ShapeError,
    UnknownValueError,
)
from .maskdecoder import Assignment

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class PairSets:
    """Per token: ordered positive embedding ids and the negative id set."""

    positives: tuple[tuple[int, ...], ...]
    negatives: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        for p, n in zip(self.positives, self.negatives):
            if set(p) & set(n):
                raise UnknownValueError("positive and negative sets overlap")

    @property
    def num_tokens(self) -> int:
        return len(self.positives)


def build_pairs(
    assignment: Assignment,
    reports: Sequence[dict],
    bank: EmbeddingBank,
    num_tokens: int,
) -> PairSets:
    """Positive ids follow schema aspect order; negatives are everything else.

    `reports[s]` is the structured report of ground-truth lesion s.
    """
    all_ids = set(range(bank.num_descriptions + 1))
    token_for = {j: s for j, s in assignment.pairs}
    positives, negatives = [], []
    for j in range(num_tokens):
        if j in token_for:
            report = reports[token_for[j]]
            pos = []
            for aspect in ASPECTS:
                if aspect not in report:
                    raise UnknownValueError(f"report missing aspect {aspect!r}")
                pos.append(bank.lookup(aspect, report[aspect]))
        else:
            pos = [BACKGROUND_ID]
        neg = sorted(all_ids - set(pos))
        positives.append(tuple(pos))
        negatives.append(tuple(neg))
    return PairSets(positives=tuple(positives), negatives=tuple(negatives))


def similarity(tokens: torch.Tensor, bank_vectors: torch.Tensor,
               tau) -> torch.Tensor:
    """Temperature-scaled dot products, (N, R+1)."""
    tau_value = float(tau) if not torch.is_tensor(tau) else float(tau.detach())
    if tau_value <= 0:
        raise ShapeError(f"temperature must be positive, got {tau_value}")
    if tokens.shape[-1] != bank_vectors.shape[-1]:
        raise ShapeError(
            f"token dim {tokens.shape[-1]} != embedding dim {bank_vectors.shape[-1]}"
        )
    return tokens @ bank_vectors.T / tau


def mp_nce(scores: torch.Tensor, pairs: PairSets) -> torch.Tensor:
    """Multi-positive contrastive loss.

    For each token j and each positive k, the positive competes only against
    j's negatives (other positives are excluded from the denominator); the
    per-token losses average over positives, then over tokens.
    """
    if scores.shape[0] != pairs.num_tokens:
        raise ShapeError(
            f"{scores.shape[0]} score rows for {pairs.num_tokens} tokens"
        )
    token_losses = []
    for j in range(pairs.num_tokens):
        pos = torch.as_tensor(pairs.positives[j], device=scores.device)
        if pos.numel() == 0:
            raise ShapeError(f"token {j} has an empty positive set")
        neg = torch.as_tensor(pairs.negatives[j], device=scores.device)
        s_pos = scores[j, pos]  # (P,)
        s_neg = scores[j, neg]  # (M,)
        stacked = torch.cat(
            [s_pos[:, None], s_neg[None, :].expand(s_pos.shape[0], -1)], dim=1
        )
        log_denom = torch.logsumexp(stacked, dim=1)
        token_losses.append(-(s_pos - log_denom).mean())
    loss = torch.stack(token_losses).mean()
    if not torch.isfinite(loss):
        raise NumericalError("contrastive loss is non-finite")
    return loss


def multiscale_sim_loss(
    tokens_per_block: Sequence[torch.Tensor],
    bank_vectors: torch.Tensor,
    pairs: PairSets,
    tau,
) -> torch.Tensor:
    """Mean contrastive loss over the decoder blocks."""
    losses = [
        mp_nce(similarity(tokens, bank_vectors, tau), pairs)
        for tokens in tokens_per_block
    ]
    return torch.stack(losses).mean()


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - soft dice with a small smoothing guard; pred/target same shape."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    p, t = pred.flatten(), target.flatten()
    inter = (p * t).sum()
    return 1 - (2 * inter + DICE_SMOOTH) / (p.sum() + t.sum() + DICE_SMOOTH)


def downsample_mask(mask: torch.Tensor, spatial) -> torch.Tensor:
    """Any-overlap (max-pool) downsampling of a binary mask to `spatial`."""
    full = tuple(mask.shape)
    if tuple(spatial) == full:
        return mask.float()
    factors = tuple(f // s for f, s in zip(full, spatial))
    if any(f * s != full[d] or f < 1 for d, (f, s) in enumerate(zip(factors, spatial))):
        raise ShapeError(f"cannot downsample {full} to {tuple(spatial)}")
    return F.max_pool3d(mask[None, None].float(), kernel_size=factors)[0, 0]


def deep_dice_loss(
    proposals_per_block: Sequence[torch.Tensor],
    assignment: Assignment,
    gt_masks: torch.Tensor,
) -> torch.Tensor:
    """Mean per-scale dice loss over matched tokens.

    `proposals_per_block[i]` holds probabilities (N, h_i, w_i, d_i); the
    ground truth is pooled down to each scale.  Scales where a lesion pools
    to empty are skipped and the mean renormalized.
    """
    if not assignment.pairs:
        first = proposals_per_block[0]
        return first.sum() * 0.0
    gt = torch.as_tensor(gt_masks).float()
    for s in range(gt.shape[0]):
        if not gt[s].any():
            raise EmptyMaskError(f"ground-truth mask {s} is empty")
    block_losses = []
    for proposals in proposals_per_block:
        terms = []
        spatial = proposals.shape[1:]
        for j, s in assignment.pairs:
            target = downsample_mask(gt[s], spatial).to(proposals)
            if not (target > 0).any():
                continue  # lesion vanished at this scale
            terms.append(soft_dice_loss(proposals[j], target))
        if terms:
            block_losses.append(torch.stack(terms).mean())
    if not block_losses:
        return proposals_per_block[0].sum() * 0.0
    return torch.stack(block_losses).mean()
