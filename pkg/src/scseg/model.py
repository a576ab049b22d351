"""The trainable stack: alignment, fusion, class prompting, mask decoding.

The frozen encoders are *not* part of this module; it consumes their
embeddings as plain tensors, so the optimizer can only ever see the trainable
groups. Inference is per class: `class_logits(feats, k)` realizes one
class-specific mask prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import Config
from .decoder import MaskDecoder
from .fusion import AlignmentMLP, build_fusion
from .prompts import ClassEmbedder, PromptBuilder, PrototypeBank, activate, similarity


@dataclass
class FeatureState:
    """Per-batch tensors shared by all per-class decodes."""

    aligned_full: torch.Tensor    # (B, N, H, W)
    aligned_tiled: torch.Tensor   # (B, N, H, W)
    fused: torch.Tensor           # (B, N, H, W)
    sims: torch.Tensor            # (B, c, H, W)
    class_embeds: torch.Tensor    # (B, c, N)


class Segmenter(nn.Module):
    def __init__(
        self,
        num_classes: int,
        full_channels: int,
        tiled_channels: int,
        embed_dim: int = 256,
        decoder_dim: int = 128,
        decoder_blocks: int = 2,
        attn_heads: int = 4,
        cam_reduction: int = 16,
        norm_groups: int = 32,
        fusion: str = "gated",
        use_dense: bool = True,
        use_sparse: bool = True,
        use_residual: bool = True,
        bank_seed: int = 0,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.use_dense = use_dense
        self.use_sparse = use_sparse
        self.align_full = AlignmentMLP(full_channels, embed_dim)
        self.align_tiled = AlignmentMLP(tiled_channels, embed_dim)
        self.fusion = build_fusion(fusion, embed_dim, reduction=cam_reduction, groups=norm_groups)
        self.bank = PrototypeBank(num_classes, embed_dim, seed=bank_seed)
        self.embedder = ClassEmbedder(embed_dim, residual=use_residual)
        self.prompts = PromptBuilder(embed_dim)
        self.decoder = MaskDecoder(embed_dim, decoder_dim, decoder_blocks, attn_heads)

    def features(self, e_full: torch.Tensor, e_tiled: torch.Tensor) -> FeatureState:
        aligned_full = self.align_full(e_full)
        aligned_tiled = self.align_tiled(e_tiled)
        fused = self.fusion(aligned_tiled, aligned_full)
        sims = similarity(fused, self.bank.prototypes)
        embeds = torch.stack(
            [self.embedder(activate(fused, sims[:, k])) for k in range(self.num_classes)],
            dim=1,
        )
        return FeatureState(aligned_full, aligned_tiled, fused, sims, embeds)

    def class_logits(self, feats: FeatureState, k: int) -> torch.Tensor:
        """Logits (B, 4H, 4W) for class index k."""
        activated = activate(feats.fused, feats.sims[:, k])
        bundle = self.prompts(
            feats.class_embeds, activated, k,
            use_sparse=self.use_sparse, use_dense=self.use_dense,
        )
        return self.decoder(activated, bundle)

    def forward(self, e_full: torch.Tensor, e_tiled: torch.Tensor) -> tuple[torch.Tensor, FeatureState]:
        feats = self.features(e_full, e_tiled)
        logits = torch.stack(
            [self.class_logits(feats, k) for k in range(self.num_classes)], dim=1
        )
        return logits, feats


def build_model(cfg: Config, num_classes: int | None = None) -> Segmenter:
    """Construct the model from a config; call under a fixed torch seed for
    reproducible initialization."""
    m, t = cfg.model, cfg.train
    return Segmenter(
        num_classes=num_classes if num_classes is not None else len(cfg.data.classes),
        full_channels=cfg.sam_encoder.channels,
        tiled_channels=cfg.mae_encoder.channels,
        embed_dim=m.embed_dim,
        decoder_dim=m.decoder_dim,
        decoder_blocks=m.decoder_blocks,
        attn_heads=m.attn_heads,
        cam_reduction=m.cam_reduction,
        norm_groups=m.norm_groups,
        fusion=t.fusion,
        use_dense=t.use_dense,
        use_sparse=t.use_sparse,
        use_residual=t.use_residual,
        bank_seed=t.seed,
    )
