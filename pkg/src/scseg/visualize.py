"""Plot emission: similarity heatmaps, mask overlays, embedding scatter,
and the per-epoch Dice curve."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .config import Config
from .data import LabeledSlice
from .engine import EmbeddingProvider, predict_slice, prepare_slice
from .errors import ValidationError
from .model import Segmenter

_CLASS_COLORS = ("tab:red", "tab:blue", "tab:green", "tab:orange", "tab:purple")


def similarity_maps(
    model: Segmenter, cfg: Config, provider: EmbeddingProvider, sl: LabeledSlice, out_dir: str | Path
) -> list[Path]:
    """One heatmap-over-image file per class; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prepared = prepare_slice(sl, cfg)
    e_s, e_m = provider.embed_slice(prepared, cacheable=False)
    with torch.no_grad():
        feats = model.features(
            torch.from_numpy(e_s).permute(2, 0, 1)[None],
            torch.from_numpy(e_m).permute(2, 0, 1)[None],
        )
        sims = feats.sims[0].numpy()
    written = []
    for k, cls in enumerate(cfg.data.classes):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(prepared.image, cmap="gray")
        ax.imshow(sims[k], cmap="inferno", alpha=0.55, vmin=-1, vmax=1,
                  extent=(0, prepared.image.shape[1], prepared.image.shape[0], 0))
        ax.set_title(f"similarity: {cls}")
        ax.axis("off")
        path = out_dir / f"similarity_{cls}.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def overlay(
    model: Segmenter, cfg: Config, provider: EmbeddingProvider, sl: LabeledSlice, out_dir: str | Path
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preds = predict_slice(model, cfg, provider, sl)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(sl.image, cmap="gray")
    for k, (cls, mask) in enumerate(preds.items()):
        color = _CLASS_COLORS[k % len(_CLASS_COLORS)]
        rgba = np.zeros((*mask.shape, 4))
        rgba[mask > 0] = matplotlib.colors.to_rgba(color, alpha=0.45)
        ax.imshow(rgba)
    ax.axis("off")
    path = out_dir / f"overlay_{sl.cell_id}_{sl.slice_index}.png"
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def project_2d(points: np.ndarray, method: str = "tsne", seed: int = 0) -> np.ndarray:
    """Seed-fixed 2D projection: stochastic-neighbor by default, PCA fallback."""
    if method == "pca":
        from sklearn.decomposition import PCA

        return PCA(n_components=2, random_state=seed).fit_transform(points)
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(2.0, points.shape[0] / 4 - 1))
        return TSNE(n_components=2, random_state=seed, init="pca", perplexity=perplexity).fit_transform(points)
    raise ValidationError(f"unknown projector {method!r} (expected tsne or pca)")


def embedding_scatter(
    source_a: np.ndarray,
    source_b: np.ndarray,
    out_path: str | Path,
    method: str = "tsne",
    seed: int = 0,
    max_points: int = 400,
    labels: tuple[str, str] = ("full-image", "tiled"),
) -> dict:
    """Scatter two embedding populations after a shared 2D projection.

    Inputs are (H, W, C) grids or (M, C) matrices; a seeded subsample caps the
    point count. Returns the projected points and group labels so callers can
    check separation numerically.
    """
    def flatten(x):
        x = np.asarray(x)
        return x.reshape(-1, x.shape[-1])

    a, b = flatten(source_a), flatten(source_b)
    rng = np.random.default_rng(seed)
    a = a[rng.choice(len(a), min(max_points, len(a)), replace=False)]
    b = b[rng.choice(len(b), min(max_points, len(b)), replace=False)]
    dim = min(a.shape[1], b.shape[1])
    stacked = np.vstack([a[:, :dim], b[:, :dim]]).astype(np.float64)
    pts = project_2d(stacked, method=method, seed=seed)
    group = np.array([0] * len(a) + [1] * len(b))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    for g, (lbl, color) in enumerate(zip(labels, ("tab:red", "tab:blue"))):
        m = group == g
        ax.scatter(pts[m, 0], pts[m, 1], s=6, c=color, label=lbl, alpha=0.7)
    ax.legend()
    fig.savefig(out_path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return {"points": pts, "group": group, "path": out_path}


def dice_curve(log_path: str | Path, out_path: str | Path) -> dict:
    """Plot mean train Dice per epoch from a training log; returns the points."""
    epochs, values = [], []
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("kind") == "epoch":
                epochs.append(rec["epoch"])
                values.append(rec["mean_dice"])
    if not epochs:
        raise ValidationError(f"no epoch records found in {log_path}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(epochs, values, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    fig.savefig(out_path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return {"epochs": epochs, "values": values, "path": out_path}
