"""Training objective: prototype contrast, Dice, and the weighted total.

The contrastive term ships in two denominator conventions. The default
includes the positive pair in the denominator (guaranteed nonnegative); the
`include_positive=False` variant excludes it and can go negative, kept for
fidelity experiments. Both are checked against brute-force oracles in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ValidationError

DICE_SMOOTH = 1.0


def prototype_contrast_loss(
    prototypes: torch.Tensor,
    class_embeds: torch.Tensor,
    temperature: float,
    include_positive: bool = True,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Temperature-scaled contrastive loss between prototypes and embeddings.

    prototypes: (c, N) anchors; class_embeds: (B, c, N) samples, row j of an
    item being that item's embedding for class j. For each anchor k the
    positive is the same-class embedding and the negatives are the other
    classes' embeddings of the same item; the result is the mean over anchors
    and batch items. Similarities are cosines of L2-normalized vectors.
    """
    if prototypes.ndim != 2 or class_embeds.ndim != 3:
        raise ValidationError("expected prototypes (c, N) and class_embeds (B, c, N)")
    c = prototypes.shape[0]
    if class_embeds.shape[1] != c:
        raise ValidationError(f"class count mismatch: {class_embeds.shape[1]} vs {c}")
    if c < 2:
        raise ValidationError("contrastive loss needs at least 2 classes (no negatives otherwise)")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")

    p = F.normalize(prototypes, dim=-1, eps=eps)
    e = F.normalize(class_embeds, dim=-1, eps=eps)
    sims = torch.einsum("kn,bjn->bkj", p, e) / temperature   # (B, anchor, sample)
    pos = sims.diagonal(dim1=1, dim2=2)                      # (B, c)
    if include_positive:
        denom = torch.logsumexp(sims, dim=2)
    else:
        masked = sims.masked_fill(torch.eye(c, dtype=torch.bool, device=sims.device), float("-inf"))
        denom = torch.logsumexp(masked, dim=2)
    return (denom - pos).mean()


def dice_loss(pred_probs: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Smoothed Dice loss, 1 - (2*sum(p*t)+s)/(sum(p)+sum(t)+s); range [0, 1)."""
    if pred_probs.shape != target.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred_probs.shape)} vs {tuple(target.shape)}")
    p = pred_probs.reshape(-1)
    t = target.reshape(-1)
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + smooth) / (p.sum() + t.sum() + smooth)


@dataclass
class LossReport:
    """One training step's loss decomposition; total is recomputed here in
    float64 so the identity total == align_weight*l_cos + l_ntx + l_dice is
    exact by construction."""

    l_cos: float
    l_ntx: float
    l_dice: float
    total: float
    align_weight: float
    temperature: float

    def decomposition_holds(self) -> bool:
        return self.total == self.align_weight * self.l_cos + self.l_ntx + self.l_dice

    def as_record(self) -> dict:
        return {
            "l_cos": self.l_cos,
            "l_ntx": self.l_ntx,
            "l_dice": self.l_dice,
            "total": self.total,
            "align_weight": self.align_weight,
            "temperature": self.temperature,
        }


def total_loss(l_cos: float, l_ntx: float, l_dice: float, align_weight: float, temperature: float) -> LossReport:
    if align_weight < 0:
        raise ValidationError("align_weight must be nonnegative")
    total = align_weight * l_cos + l_ntx + l_dice
    return LossReport(
        l_cos=float(l_cos),
        l_ntx=float(l_ntx),
        l_dice=float(l_dice),
        total=float(total),
        align_weight=float(align_weight),
        temperature=float(temperature),
    )
