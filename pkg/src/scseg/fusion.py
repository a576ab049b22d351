"""Alignment of the two frozen embeddings into a shared space, and fusion.

All modules take NCHW tensors. The alignment branches are strictly
per-location (1x1 projections), so no spatial mixing happens before fusion.
Three fusion strategies share one interface: the gated two-branch design
(default), plain concat + 1x1 projection, and symmetric cross-attention.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

COSINE_EPS = 1e-8


def group_count(channels: int, preferred: int = 32) -> int:
    for g in (preferred, 16, 8, 4, 2, 1):
        if g <= channels and channels % g == 0:
            return g
    return 1


class AlignmentMLP(nn.Module):
    """Two-layer per-location MLP: project, ReLU, project (shared output width)."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.fc_in = nn.Conv2d(in_channels, out_channels, 1)
        self.fc_out = nn.Conv2d(out_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc_out(F.relu(self.fc_in(x)))


def cosine_map(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Per-location cosine of two (B, C, H, W) grids over the channel axis.

    Zero-norm locations are epsilon-guarded and come out as cosine 0.
    """
    dot = (a * b).sum(dim=1)
    denom = (a.norm(dim=1) * b.norm(dim=1)).clamp_min(eps)
    return dot / denom


def alignment_cosine_loss(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Mean over all locations of (1 - cosine); range [0, 2]."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (1.0 - cosine_map(a, b, eps)).mean()


class ChannelAttention(nn.Module):
    """Per-channel sigmoid gate driven by pooled statistics.

    Average- and max-pooled channel vectors pass through one shared
    bottleneck MLP; the gate is sigmoid of the sum, in (0, 1) per channel.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc_down = nn.Linear(channels, hidden, bias=False)
        self.fc_up = nn.Linear(hidden, channels, bias=False)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        s = self.fc_up(F.relu(self.fc_down(avg))) + self.fc_up(F.relu(self.fc_down(mx)))
        return torch.sigmoid(s)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)[:, :, None, None]


class GatedFusion(nn.Module):
    """Two-branch fusion of the aligned embeddings.

    Main branch: concat -> conv3x3 -> GN -> ReLU -> conv3x3 -> GN -> ReLU ->
    channel attention, producing dim/2 channels. Auxiliary branch: one
    conv3x3 + channel attention on the tiled-encoder embedding, dim/2
    channels. Outputs concatenate back to `dim`; spatial shape is preserved.
    """

    def __init__(self, dim: int, reduction: int = 16, groups: int = 32):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError(f"fusion width must be even, got {dim}")
        half = dim // 2
        self.main = nn.Sequential(
            nn.Conv2d(2 * dim, dim, 3, padding=1),
            nn.GroupNorm(group_count(dim, groups), dim),
            nn.ReLU(),
            nn.Conv2d(dim, half, 3, padding=1),
            nn.GroupNorm(group_count(half, groups), half),
            nn.ReLU(),
        )
        self.main_att = ChannelAttention(half, reduction)
        self.aux = nn.Conv2d(dim, half, 3, padding=1)
        self.aux_att = ChannelAttention(half, reduction)

    def main_branch(self, aligned_tiled: torch.Tensor, aligned_full: torch.Tensor) -> torch.Tensor:
        return self.main_att(self.main(torch.cat([aligned_tiled, aligned_full], dim=1)))

    def forward(self, aligned_tiled: torch.Tensor, aligned_full: torch.Tensor) -> torch.Tensor:
        core = self.main_branch(aligned_tiled, aligned_full)
        side = self.aux_att(self.aux(aligned_tiled))
        return torch.cat([core, side], dim=1)


class ConcatFusion(nn.Module):
    """Ablation baseline: channel concat + 1x1 projection back to `dim`."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * dim, dim, 1)

    def forward(self, aligned_tiled: torch.Tensor, aligned_full: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([aligned_tiled, aligned_full], dim=1))


class CrossAttentionFusion(nn.Module):
    """Ablation baseline: symmetric two-way spatial attention.

    One pass attends from the full-image embedding into the tiled one, the
    reverse pass swaps roles; the two attended maps are concatenated and
    projected to `dim`. Quadratic in H*W, intended for desk-scale runs.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.q_full = nn.Linear(dim, dim)
        self.kv_tiled = nn.Linear(dim, dim)
        self.q_tiled = nn.Linear(dim, dim)
        self.kv_full = nn.Linear(dim, dim)
        self.proj = nn.Conv2d(2 * dim, dim, 1)
        self.scale = dim ** -0.5

    @staticmethod
    def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        attn = torch.softmax(q @ k.transpose(1, 2), dim=-1)
        return attn @ v

    def forward(self, aligned_tiled: torch.Tensor, aligned_full: torch.Tensor) -> torch.Tensor:
        b, c, h, w = aligned_full.shape
        full = aligned_full.flatten(2).transpose(1, 2)
        tiled = aligned_tiled.flatten(2).transpose(1, 2)
        a1 = self._attend(self.q_full(full) * self.scale, self.kv_tiled(tiled), tiled)
        a2 = self._attend(self.q_tiled(tiled) * self.scale, self.kv_full(full), full)
        out = torch.cat([a1, a2], dim=2).transpose(1, 2).reshape(b, 2 * c, h, w)
        return self.proj(out)


def build_fusion(mode: str, dim: int, reduction: int = 16, groups: int = 32) -> nn.Module:
    if mode == "gated":
        return GatedFusion(dim, reduction=reduction, groups=groups)
    if mode == "concat":
        return ConcatFusion(dim)
    if mode == "cross_attention":
        return CrossAttentionFusion(dim)
    raise ValueError(f"unknown fusion mode {mode!r}")
