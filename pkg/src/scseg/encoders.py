"""Frozen embedding producers and the on-disk embedding cache.

Two encoder roles feed the trainable stack: a full-image encoder ("sam"
family, one grid per image) and a tiled encoder ("mae" family, four
independently encoded quadrants stitched by position). Both are frozen; real
backbones plug in as TorchScript modules, and a seeded synthetic encoder
stands in everywhere weights are unavailable.

Cache files are a fixed little-endian binary: magic, version, source tag,
shape triple, payload byte count, float32 payload, trailing CRC32. Round
trips are bit-exact, which is what makes cached and on-the-fly training
indistinguishable.
"""

from __future__ import annotations

import enum
import hashlib
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import EncoderHandle
from .errors import CorruptionError, EncoderInitError, FormatError, ValidationError

_MAGIC = b"SEMB"
_VERSION = 1
_HEADER = struct.Struct("<4sHBBIIIQ")  # magic, version, source, pad, H, W, C, payload bytes


class Source(enum.Enum):
    SAM = 0
    MAE = 1
    ALIGNED = 2
    FUSED = 3
    ACTIVATED = 4


@dataclass
class FeatureGrid:
    """An H x W x C float32 feature grid with a provenance tag."""

    data: np.ndarray
    source: Source

    def validate(self) -> None:
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValidationError(f"feature grid must be H x W x C with positive dims, got {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ValidationError(f"feature grid must be float32, got {self.data.dtype}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("feature grid contains non-finite values")


class SyntheticEncoder:
    """Seeded random projection of block-averaged image patches plus a fixed
    bias field. Deterministic per seed; an all-zero input returns the bias
    field exactly. Each output cell depends only on its own patch, so tiling
    and stitching commute with encoding by construction.
    """

    kind = "synthetic"

    def __init__(self, seed: int, input_side: int, grid_side: int, channels: int):
        if input_side % grid_side != 0:
            raise ValidationError(f"input side {input_side} not divisible by grid side {grid_side}")
        self.input_side = input_side
        self.grid_side = grid_side
        self.channels = channels
        patch = input_side // grid_side
        self.pool = 4 if patch % 4 == 0 else patch
        d = self.pool * self.pool
        rng = np.random.default_rng(seed)
        self.proj = (rng.standard_normal((d, channels)) / np.sqrt(d)).astype(np.float32)
        self.bias_field = (0.1 * rng.standard_normal((grid_side, grid_side, channels))).astype(np.float32)

    def encode(self, image: np.ndarray) -> np.ndarray:
        if image.shape != (self.input_side, self.input_side):
            raise ValidationError(
                f"encoder expects {self.input_side}x{self.input_side} input, got {image.shape}"
            )
        g, patch = self.grid_side, self.input_side // self.grid_side
        block = patch // self.pool
        x = image.astype(np.float32).reshape(g, self.pool, block, g, self.pool, block)
        feats = x.mean(axis=(2, 5)).transpose(0, 3, 1, 2).reshape(g, g, -1)
        return feats @ self.proj + self.bias_field

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.proj.tobytes())
        h.update(self.bias_field.tobytes())
        return h.hexdigest()


class TorchScriptEncoder:
    """Wraps a scripted frozen backbone: (1, 1, S, S) float32 -> (1, C, G, G)."""

    def __init__(self, kind: str, weights: str | None, input_side: int, grid_side: int, channels: int):
        if not weights or not Path(weights).exists():
            raise EncoderInitError(f"{kind}: weights file not found: {weights!r}")
        import torch

        self.kind = kind
        self.input_side = input_side
        self.grid_side = grid_side
        self.channels = channels
        self._torch = torch
        try:
            self.module = torch.jit.load(weights, map_location="cpu").eval()
        except Exception as exc:  # noqa: BLE001 - surface as init failure
            raise EncoderInitError(f"{kind}: could not load weights from {weights}: {exc}") from exc
        for p in self.module.parameters():
            p.requires_grad_(False)

    def encode(self, image: np.ndarray) -> np.ndarray:
        if image.shape != (self.input_side, self.input_side):
            raise ValidationError(
                f"encoder expects {self.input_side}x{self.input_side} input, got {image.shape}"
            )
        with self._torch.no_grad():
            t = self._torch.from_numpy(image.astype(np.float32))[None, None]
            out = self.module(t)
        arr = out[0].permute(1, 2, 0).numpy().astype(np.float32)
        if arr.shape != (self.grid_side, self.grid_side, self.channels):
            raise ValidationError(f"{self.kind}: backbone produced {arr.shape}, expected "
                                  f"({self.grid_side}, {self.grid_side}, {self.channels})")
        return arr

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.module.state_dict().items()):
            h.update(name.encode())
            h.update(p.numpy().tobytes())
        return h.hexdigest()


_KIND_CONTRACTS = {
    # kind -> required (input_side, grid_side, channels)
    "sam_vit": (1024, 64, 256),
    "mae_vit": (512, 32, 512),
}


def build_encoder(handle: EncoderHandle):
    if handle.kind == "synthetic":
        if handle.seed is None:
            raise ValidationError("synthetic encoder requires a seed")
        return SyntheticEncoder(handle.seed, handle.input_side, handle.grid_side, handle.channels)
    contract = _KIND_CONTRACTS.get(handle.kind)
    if contract is None:
        raise ValidationError(f"unknown encoder kind {handle.kind!r}")
    if (handle.input_side, handle.grid_side, handle.channels) != contract:
        raise ValidationError(
            f"{handle.kind} contract is input/grid/channels {contract}, "
            f"got ({handle.input_side}, {handle.grid_side}, {handle.channels})"
        )
    return TorchScriptEncoder(handle.kind, handle.weights, handle.input_side, handle.grid_side, handle.channels)


# ---------------------------------------------------------------------------
# embedding computation
# ---------------------------------------------------------------------------

def compute_sam_embedding(image: np.ndarray, enc) -> FeatureGrid:
    """Encode a full image (already resized/padded to the encoder side)."""
    if enc.kind not in ("sam_vit", "synthetic"):
        raise ValidationError(f"full-image embedding needs a sam_vit or synthetic encoder, got {enc.kind}")
    grid = FeatureGrid(enc.encode(image).astype(np.float32), Source.SAM)
    grid.validate()
    return grid


def compute_mae_embedding(image: np.ndarray, enc) -> FeatureGrid:
    """Encode the four quadrants of a padded square image independently and
    stitch them by original position into one grid."""
    if enc.kind not in ("mae_vit", "synthetic"):
        raise ValidationError(f"tiled embedding needs a mae_vit or synthetic encoder, got {enc.kind}")
    t = enc.input_side
    if image.shape != (2 * t, 2 * t):
        raise ValidationError(
            f"tiled embedding expects a padded {2 * t}x{2 * t} input, got {image.shape}"
        )
    g = enc.grid_side
    out = np.empty((2 * g, 2 * g, enc.channels), dtype=np.float32)
    for qy in (0, 1):
        for qx in (0, 1):
            tile = image[qy * t:(qy + 1) * t, qx * t:(qx + 1) * t]
            out[qy * g:(qy + 1) * g, qx * g:(qx + 1) * g] = enc.encode(tile)
    grid = FeatureGrid(out, Source.MAE)
    grid.validate()
    return grid


# ---------------------------------------------------------------------------
# cache file format
# ---------------------------------------------------------------------------

def store_embedding(grid: FeatureGrid, path: str | Path) -> None:
    grid.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    h, w, c = grid.data.shape
    header = _HEADER.pack(_MAGIC, _VERSION, grid.source.value, 0, h, w, c, len(payload))
    crc = struct.pack("<I", zlib.crc32(payload))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + payload + crc)
    tmp.replace(path)


def load_embedding(path: str | Path) -> FeatureGrid:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated embedding file ({len(blob)} bytes)")
    magic, version, source, _, h, w, c, payload_bytes = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = h * w * c * 4
    if payload_bytes != expected:
        raise FormatError(
            f"{path}: header shape ({h},{w},{c}) implies {expected} payload bytes "
            f"but file records {payload_bytes}"
        )
    if len(blob) < _HEADER.size + payload_bytes + 4:
        raise CorruptionError(f"{path}: truncated embedding file ({len(blob)} bytes)")
    payload = blob[_HEADER.size:_HEADER.size + payload_bytes]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + payload_bytes)
    if zlib.crc32(payload) != crc:
        raise CorruptionError(f"{path}: checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
    grid = FeatureGrid(data, Source(source))
    grid.validate()
    return grid


def cache_path(cache_dir: str | Path, cell_id: str, slice_index: int, family: str) -> Path:
    if family not in ("sam", "mae"):
        raise ValidationError(f"cache family must be 'sam' or 'mae', got {family!r}")
    return Path(cache_dir) / cell_id / f"{slice_index}.{family}.emb"


def grid_hash(grid: FeatureGrid) -> str:
    return hashlib.sha256(np.ascontiguousarray(grid.data, dtype="<f4").tobytes()).hexdigest()
