"""Lightweight promptable mask decoder.

The activated feature grid plus the dense prompt form the feature stream;
sparse tokens form the token stream. Two bidirectional cross-attention blocks
mix the streams at the decoder width, the feature grid is upscaled 4x by two
stride-2 transposed convolutions, and the positively-routed token's output
queries the upscaled grid to produce one logit map per call.

Tokens carry no positional encoding and are re-ordered internally into a
canonical order (positive first, negatives sorted by value), so the output is
independent of the caller's negative-token order, bit for bit.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .gridops import resize_nearest
from .prompts import PromptBundle


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValidationError(f"decoder width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        b, tq, d = queries.shape
        tk = keys.shape[1]
        h = self.heads
        q = self.q(queries).reshape(b, tq, h, d // h).transpose(1, 2)
        k = self.k(keys).reshape(b, tk, h, d // h).transpose(1, 2)
        v = self.v(keys).reshape(b, tk, h, d // h).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / (d // h) ** 0.5, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out(mixed)


class DecoderBlock(nn.Module):
    """tokens attend to features, tokens run an MLP, features attend to tokens.

    Post-residual LayerNorms keep both streams bounded; without them the
    upstream feature scale (which the alignment loss is free to inflate)
    saturates the mask logits.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.token_to_feat = CrossAttention(dim, heads)
        self.token_mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        self.feat_to_token = CrossAttention(dim, heads)
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.norm_feat = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, feats: torch.Tensor):
        tokens = self.norm_attn(tokens + self.token_to_feat(tokens, feats))
        tokens = self.norm_mlp(tokens + self.token_mlp(tokens))
        feats = self.norm_feat(feats + self.feat_to_token(feats, tokens))
        return tokens, feats


def _canonical_order(tokens: torch.Tensor, target: int) -> torch.Tensor:
    """Reorder (B, c, D) tokens: positive row first, negatives byte-sorted."""
    b, c, d = tokens.shape
    raw = tokens.detach().cpu().numpy()
    rows = []
    for i in range(b):
        negs = sorted((j for j in range(c) if j != target), key=lambda j: raw[i, j].tobytes())
        rows.append([target] + negs)
    idx = torch.as_tensor(rows, device=tokens.device)
    return torch.gather(tokens, 1, idx[:, :, None].expand(b, c, d))


class MaskDecoder(nn.Module):
    def __init__(self, in_dim: int, dim: int = 128, blocks: int = 2, heads: int = 4):
        super().__init__()
        if dim % 4 != 0:
            raise ValidationError(f"decoder width must be divisible by 4, got {dim}")
        self.in_dim = in_dim
        self.dim = dim
        self.feat_proj = nn.Conv2d(in_dim, dim, 1)
        self.token_proj = nn.Linear(in_dim, dim)
        # stands in for the sparse stream when it is ablated away
        self.fallback_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.blocks = nn.ModuleList(DecoderBlock(dim, heads) for _ in range(blocks))
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 2, 2, stride=2),
            nn.ReLU(),
            nn.ConvTranspose2d(dim // 2, dim // 4, 2, stride=2),
            nn.ReLU(),
        )
        self.head = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim // 4))

    def forward(self, activated: torch.Tensor, bundle: PromptBundle, attn_bypass: bool = False) -> torch.Tensor:
        """Returns logits of shape (B, 4H, 4W) for the bundle's target class.

        attn_bypass skips the cross-attention blocks (a linear-probe test
        mode); the rest of the path is unchanged.
        """
        b, n, h, w = activated.shape
        if n != self.in_dim:
            raise ValidationError(f"decoder expects {self.in_dim} feature channels, got {n}")
        feats = activated
        if bundle.dense is not None:
            if bundle.dense.shape != activated.shape:
                raise ValidationError(
                    f"dense prompt shape {tuple(bundle.dense.shape)} != features {tuple(activated.shape)}"
                )
            feats = feats + bundle.dense

        x = self.feat_proj(feats)
        if bundle.sparse is not None:
            tokens = _canonical_order(self.token_proj(bundle.sparse), bundle.target_class)
        else:
            tokens = self.fallback_token[None, None].expand(b, 1, self.dim)

        seq = x.flatten(2).transpose(1, 2)
        if not attn_bypass:
            for blk in self.blocks:
                tokens, seq = blk(tokens, seq)
        x = seq.transpose(1, 2).reshape(b, self.dim, h, w)

        up = self.upscale(x)
        query = self.head(tokens[:, 0])
        return torch.einsum("bc,bchw->bhw", query, up)


def logits_to_mask(logits: np.ndarray, threshold: float = 0.0, out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Binarize logits at `threshold`, optionally nearest-resizing to out_shape."""
    mask = (np.asarray(logits) >= threshold).astype(np.uint8)
    if out_shape is not None and mask.shape != tuple(out_shape):
        mask = resize_nearest(mask, out_shape[0], out_shape[1])
    return mask


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
