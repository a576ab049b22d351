"""EM slice ingestion: centered slice selection, normalization, augmentation.

On-disk layout is one grayscale image file plus one binary mask file per class
per slice, with paths templated in DatasetSpec (slice indices are contiguous
from 0). Loading, normalization and augmentation are pure functions of
(paths, seed) so they can run in any order or in parallel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DatasetSpec
from .errors import DataIOError, ValidationError
from .gridops import resize_bilinear, resize_mask

log = logging.getLogger(__name__)


@dataclass
class LabeledSlice:
    """One 2D EM slice with per-class binary masks."""

    image: np.ndarray                 # (H, W) float32
    masks: dict[str, np.ndarray]      # class -> (H, W) uint8 in {0, 1}
    cell_id: str
    slice_index: int

    def validate(self) -> None:
        if self.image.ndim != 2:
            raise ValidationError(f"slice image must be 2D, got shape {self.image.shape}")
        if not np.all(np.isfinite(self.image)):
            raise ValidationError(f"slice {self.cell_id}/{self.slice_index}: non-finite image values")
        for cls, m in self.masks.items():
            if m.shape != self.image.shape:
                raise ValidationError(
                    f"slice {self.cell_id}/{self.slice_index}: mask {cls!r} shape "
                    f"{m.shape} != image shape {self.image.shape}"
                )
            vals = np.unique(m)
            if not np.isin(vals, (0, 1)).all():
                raise ValidationError(f"mask {cls!r} has values outside {{0,1}}: {vals[:5]}")


def centered_window(depth: int, count: int) -> range:
    """Indices of the `count` slices centered on the volume midpoint.

    Clamps to the full volume when depth < count.
    """
    if count < 1:
        raise ValidationError("slice count must be >= 1")
    if depth <= count:
        return range(depth)
    start = (depth - count) // 2
    return range(start, start + count)


def _read_gray(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataIOError(f"missing file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.float32)


def _volume_depth(spec: DatasetSpec, cell_id: str) -> int:
    depth = 0
    while (Path(spec.root) / spec.image_template.format(cell_id=cell_id, index=depth)).exists():
        depth += 1
    if depth == 0:
        raise DataIOError(
            f"no slices found for cell {cell_id!r} under {spec.root} "
            f"(template {spec.image_template!r})"
        )
    return depth


def load_slice(spec: DatasetSpec, cell_id: str, index: int) -> LabeledSlice:
    root = Path(spec.root)
    image = _read_gray(root / spec.image_template.format(cell_id=cell_id, index=index))
    masks = {}
    for cls in spec.classes:
        m = _read_gray(root / spec.mask_template.format(cell_id=cell_id, cls=cls, index=index))
        masks[cls] = (m > 0).astype(np.uint8)
    sl = LabeledSlice(image=image, masks=masks, cell_id=cell_id, slice_index=index)
    sl.validate()
    return sl


def load_volume(spec: DatasetSpec, cell_id: str) -> list[LabeledSlice]:
    """Load the middle `slices_per_cell` slices of one cell, ordered by index."""
    depth = _volume_depth(spec, cell_id)
    if depth < spec.slices_per_cell:
        log.warning(
            "cell %s has only %d slices (< slices_per_cell=%d); using all of them",
            cell_id, depth, spec.slices_per_cell,
        )
    return [load_slice(spec, cell_id, i) for i in centered_window(depth, spec.slices_per_cell)]


def normalize(sl: LabeledSlice, spec: DatasetSpec) -> LabeledSlice:
    """Per-slice min-max to [0,1], then standardize by the dataset mean/std.

    A constant image maps to all zeros (min-max stage) instead of dividing by
    zero; with the default identity statistics it stays all zeros.
    """
    img = sl.image.astype(np.float32)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        img = (img - lo) / (hi - lo)
    else:
        img = np.zeros_like(img)
    img = (img - spec.norm_mean) / spec.norm_std
    return replace(sl, image=img.astype(np.float32))


def augment(
    sl: LabeledSlice,
    rng_seed: int,
    out_side: int,
    crop_range: tuple[float, float] = (0.6, 1.0),
) -> LabeledSlice:
    """Random crop + resize to out_side, identical window for image and masks.

    Deterministic given rng_seed. Masks are re-binarized at 0.5 after the
    bilinear resize.
    """
    rng = np.random.default_rng(rng_seed)
    h, w = sl.image.shape
    fh = rng.uniform(crop_range[0], crop_range[1])
    fw = rng.uniform(crop_range[0], crop_range[1])
    ch, cw = int(round(h * fh)), int(round(w * fw))
    if ch < 2 or cw < 2:
        raise ValidationError(f"crop window {ch}x{cw} is smaller than 2x2")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))

    img = sl.image[top:top + ch, left:left + cw]
    img = resize_bilinear(img, out_side, out_side).astype(np.float32)
    masks = {
        cls: resize_mask(m[top:top + ch, left:left + cw], out_side, out_side)
        for cls, m in sl.masks.items()
    }
    return replace(sl, image=img, masks=masks)


def resize_slice(sl: LabeledSlice, out_side: int) -> LabeledSlice:
    """Deterministic full-frame resize used on the evaluation path."""
    img = resize_bilinear(sl.image, out_side, out_side).astype(np.float32)
    masks = {cls: resize_mask(m, out_side, out_side) for cls, m in sl.masks.items()}
    return replace(sl, image=img, masks=masks)
