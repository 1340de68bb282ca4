"""End-to-end network: backbone, token decoder, text head, and fusion heads."""

from __future__ import annotations

import torch
from torch import nn

from .attributes import AttributeSchema
from .backbone import Backbone, FeaturePyramid
from .cmki import AttributeAggregator, EnsembleHead, FusionModule, ProjectionHeads
from .errors import ShapeError
from .maskdecoder import (
    DecoderBlock,
    mask_proposal_logits,
    sinusoidal_position_encoding,
)

NUM_DECODER_BLOCKS = 3
TAU_MIN, TAU_MAX = 0.01, 1.0


class BankIndexView:
    """Lookup view over the schema's (aspect, value) -> embedding id mapping.

    Id 0 is the background embedding; 1..R follow schema order.  Mirrors the
    index of a stored bank built from the same schema.
    """

    def __init__(self, schema: AttributeSchema):
        self.index = {pair: i + 1 for i, pair in enumerate(schema.pairs())}
        self.num_descriptions = len(self.index)

    def lookup(self, aspect: str, value: str) -> int:
        from .errors import UnknownValueError

        try:
            return self.index[(aspect, value)]
        except KeyError:
            raise UnknownValueError(f"({aspect!r}, {value!r}) not in bank") from None

    def ids_for_aspect(self, aspect: str) -> list[int]:
        return [i for (a, _), i in self.index.items() if a == aspect]

    def value_of(self, embedding_id: int) -> tuple[str, str]:
        for key, i in self.index.items():
            if i == embedding_id:
                return key
        raise KeyError(embedding_id)


class MaleniaModel(nn.Module):
    """All trainable state of the segmentation framework."""

    def __init__(
        self,
        schema: AttributeSchema,
        num_tokens: int = 16,
        token_dim: int = 32,
        provider_dim: int = 64,
        widths=(8, 16, 32, 32, 32, 32),
        tau_init: float = 0.07,
        heads: int = 1,
        masked_attention: bool = False,
        normalize_tokens: bool = False,
    ):
        super().__init__()
        self.schema = schema
        self.bank_index = BankIndexView(schema)
        self.num_tokens = num_tokens
        self.token_dim = token_dim
        self.normalize_tokens = normalize_tokens
        self.backbone = Backbone(widths=widths, token_dim=token_dim)
        self.blocks = nn.ModuleList(
            DecoderBlock(token_dim, heads=heads, masked_attention=masked_attention)
            for _ in range(NUM_DECODER_BLOCKS)
        )
        self.tokens = nn.Parameter(torch.randn(num_tokens, token_dim) * 0.02)
        self.text_projection = nn.Sequential(
            nn.Linear(provider_dim, token_dim),
            nn.GELU(),
            nn.Linear(token_dim, token_dim),
        )
        self.background_embedding = nn.Parameter(torch.randn(token_dim) * 0.02)
        self.tau = nn.Parameter(torch.tensor(float(tau_init)))
        self.register_buffer(
            "provider_vectors",
            torch.zeros(self.bank_index.num_descriptions, provider_dim),
        )
        self.aggregator = AttributeAggregator(token_dim)
        self.fusion = FusionModule(token_dim, heads=heads)
        self.projections = ProjectionHeads(token_dim)
        self.ensemble_head = EnsembleHead(num_tokens)

    def set_provider_vectors(self, matrix) -> None:
        matrix = torch.as_tensor(matrix, dtype=self.provider_vectors.dtype)
        if matrix.shape != self.provider_vectors.shape:
            raise ShapeError(
                f"provider matrix {tuple(matrix.shape)} != expected "
                f"{tuple(self.provider_vectors.shape)}"
            )
        with torch.no_grad():
            self.provider_vectors.copy_(matrix)

    def bank_vectors(self) -> torch.Tensor:
        """Current (R+1, C) text embeddings; row 0 is the background vector."""
        projected = self.text_projection(self.provider_vectors)
        bank = torch.cat([self.background_embedding[None, :], projected], dim=0)
        if self.normalize_tokens:
            # match the token geometry: cosine similarities on both sides, so
            # no bank row can dominate the foreground test by norm alone
            bank = nn.functional.normalize(bank, dim=-1)
        return bank

    def clamp_temperature(self) -> None:
        with torch.no_grad():
            self.tau.clamp_(TAU_MIN, TAU_MAX)

    def decode(self, pyramid: FeaturePyramid):
        """Refine tokens over the three blocks, coarse to fine.

        Returns (tokens_per_block, proposal_logits_per_block); tokens are
        (B, N, C) and logits (B, N, h_i, w_i, d_i).
        """
        batch = pyramid.f1.shape[0]
        tokens = self.tokens[None].expand(batch, -1, -1)
        tokens_per_block, logits_per_block = [], []
        for block, feats in zip(self.blocks, pyramid.levels):
            positions = sinusoidal_position_encoding(
                feats.shape[2:], self.token_dim,
                device=feats.device, dtype=feats.dtype,
            )
            tokens = block(tokens, feats, positions=positions)
            out_tokens = tokens
            if self.normalize_tokens:
                out_tokens = nn.functional.normalize(tokens, dim=-1)
            tokens_per_block.append(out_tokens)
            logits_per_block.append(mask_proposal_logits(tokens, feats))
        return tokens_per_block, logits_per_block

    def forward(self, volumes: torch.Tensor):
        """volumes (B, 1, H, W, D) -> (pyramid, tokens/block, logits/block)."""
        pyramid = self.backbone(volumes)
        tokens_per_block, logits_per_block = self.decode(pyramid)
        return pyramid, tokens_per_block, logits_per_block
