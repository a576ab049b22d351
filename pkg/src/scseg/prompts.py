"""Learned class prompting: prototype bank, similarity activation, and the
sparse/dense prompt construction consumed by the mask decoder.

Every class owns one learnable prototype vector. Cosine similarity between
the fused feature grid and a prototype yields a per-class similarity map; the
map residually activates the features, and pooled activated features become
per-class embeddings. One-hot routing through distinct positive/negative
projections turns those embeddings into sparse tokens, while a 1x1 projection
of the activated grid supplies the dense prompt.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError

SIM_EPS = 1e-8


def init_prototypes(num_classes: int, dim: int, seed: int) -> torch.Tensor:
    """Deterministic (num_classes, dim) init, i.i.d. normal(0, 0.02), no zero rows."""
    if num_classes < 1 or dim < 1:
        raise ValidationError("prototype bank needs num_classes >= 1 and dim >= 1")
    gen = torch.Generator().manual_seed(seed)
    protos = torch.randn(num_classes, dim, generator=gen) * 0.02
    assert bool((protos.norm(dim=1) > 0).all()), "degenerate zero prototype row"
    return protos


class PrototypeBank(nn.Module):
    def __init__(self, num_classes: int, dim: int, seed: int = 0):
        super().__init__()
        self.prototypes = nn.Parameter(init_prototypes(num_classes, dim, seed))

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]


def similarity(features: torch.Tensor, prototypes: torch.Tensor, eps: float = SIM_EPS) -> torch.Tensor:
    """Per-class cosine similarity maps.

    features: (B, N, H, W); prototypes: (c, N) -> (B, c, H, W) in [-1, 1].
    Zero vectors are epsilon-guarded to similarity 0.
    """
    if features.shape[1] != prototypes.shape[1]:
        raise ValidationError(
            f"feature channels {features.shape[1]} != prototype dim {prototypes.shape[1]}"
        )
    v = F.normalize(features, dim=1, eps=eps)
    p = F.normalize(prototypes, dim=1, eps=eps)
    return torch.einsum("bnhw,cn->bchw", v, p)


def activate(features: torch.Tensor, sim_map: torch.Tensor) -> torch.Tensor:
    """Residual class activation: (1 + S) * V, computed in exactly that form.

    features: (B, N, H, W); sim_map: (B, H, W) for one class.
    """
    return (1.0 + sim_map)[:, None] * features


class ClassEmbedder(nn.Module):
    """Pool an activated grid to one vector per image, with an MLP residual."""

    def __init__(self, dim: int, residual: bool = True):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.residual = residual

    def forward(self, activated: torch.Tensor) -> torch.Tensor:
        pooled = activated.mean(dim=(2, 3))
        out = self.mlp(pooled)
        return pooled + out if self.residual else out


@dataclass
class PromptBundle:
    """Decoder inputs for one target class: c sparse tokens + a dense grid."""

    sparse: torch.Tensor | None   # (B, c, N); exactly one positively-routed row
    dense: torch.Tensor | None    # (B, N, H, W)
    target_class: int


class PromptBuilder(nn.Module):
    """Routes class embeddings through positive/negative projections and
    projects the activated grid into the dense prompt (1x1, no spatial mixing)."""

    def __init__(self, dim: int):
        super().__init__()
        self.pos_proj = nn.Linear(dim, dim)
        self.neg_proj = nn.Linear(dim, dim)
        self.dense_proj = nn.Conv2d(dim, dim, 1)

    def sparse_tokens(self, class_embeds: torch.Tensor, target: int) -> torch.Tensor:
        b, c, _ = class_embeds.shape
        if not 0 <= target < c:
            raise ValidationError(f"target class index {target} outside [0, {c})")
        pos = self.pos_proj(class_embeds)
        neg = self.neg_proj(class_embeds)
        onehot = torch.zeros(c, dtype=torch.bool, device=class_embeds.device)
        onehot[target] = True
        return torch.where(onehot[None, :, None], pos, neg)

    def forward(
        self,
        class_embeds: torch.Tensor,
        activated: torch.Tensor,
        target: int,
        use_sparse: bool = True,
        use_dense: bool = True,
    ) -> PromptBundle:
        sparse = self.sparse_tokens(class_embeds, target) if use_sparse else None
        dense = self.dense_proj(activated) if use_dense else None
        return PromptBundle(sparse=sparse, dense=dense, target_class=target)
