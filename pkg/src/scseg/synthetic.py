"""Synthetic organelle-style slices for smoke tests and demos.

Each slice carries one large dark blob (nucleus), a few medium ellipses
(mitochondria) and many small bright dots (granules), each class with its own
intensity band so a desk-scale model can overfit quickly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .config import DatasetSpec
from .data import LabeledSlice

CLASSES = ("nucleus", "mitochondria", "granules")


def _disk(side: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synthetic_slice(side: int, seed: int, cell_id: str = "synthetic", index: int = 0) -> LabeledSlice:
    rng = np.random.default_rng(seed)
    img = 0.45 + 0.02 * rng.standard_normal((side, side))
    owner = np.zeros((side, side), dtype=np.int8)  # 0 bg, 1 nuc, 2 mito, 3 gran

    r = side * rng.uniform(0.24, 0.32)
    cy, cx = rng.uniform(0.3 * side, 0.7 * side, size=2)
    m = _disk(side, cy, cx, r, r * rng.uniform(0.8, 1.2))
    img[m] = 0.15 + 0.02 * rng.standard_normal(int(m.sum()))
    owner[m] = 1

    for _ in range(int(rng.integers(2, 4))):
        ry = side * rng.uniform(0.1, 0.16)
        rx = ry * rng.uniform(0.5, 0.9)
        cy, cx = rng.uniform(0.1 * side, 0.9 * side, size=2)
        m = _disk(side, cy, cx, ry, rx)
        img[m] = 0.68 + 0.02 * rng.standard_normal(int(m.sum()))
        owner[m] = 2

    for _ in range(int(rng.integers(4, 8))):
        r = side * rng.uniform(0.05, 0.08)
        cy, cx = rng.uniform(0.08 * side, 0.92 * side, size=2)
        m = _disk(side, cy, cx, r, r)
        img[m] = 0.92 + 0.02 * rng.standard_normal(int(m.sum()))
        owner[m] = 3

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    masks = {cls: (owner == i + 1).astype(np.uint8) for i, cls in enumerate(CLASSES)}
    return LabeledSlice(image=img, masks=masks, cell_id=cell_id, slice_index=index)


def synthetic_slices(n: int, side: int, seed: int, cell_id: str = "synthetic") -> list[LabeledSlice]:
    root = np.random.default_rng(seed)
    seeds = root.integers(0, 2**31 - 1, size=n)
    return [synthetic_slice(side, int(s), cell_id, i) for i, s in enumerate(seeds)]


def write_dataset(root: str | Path, cells: dict[str, int], side: int, seed: int) -> DatasetSpec:
    """Write a PNG dataset in the templated on-disk layout; returns its spec."""
    root = Path(root)
    spec = DatasetSpec(root=str(root), classes=CLASSES)
    for c, (cell_id, depth) in enumerate(sorted(cells.items())):
        slices = synthetic_slices(depth, side, seed + 1000 * c, cell_id)
        for sl in slices:
            img_path = root / spec.image_template.format(cell_id=cell_id, index=sl.slice_index)
            img_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray((sl.image * 255).astype(np.uint8)).save(img_path)
            for cls, m in sl.masks.items():
                mask_path = root / spec.mask_template.format(cell_id=cell_id, cls=cls, index=sl.slice_index)
                mask_path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray((m * 255).astype(np.uint8)).save(mask_path)
    return spec
