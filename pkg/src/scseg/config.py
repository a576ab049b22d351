"""Dataclass configuration tree, YAML loading, and dotted-key overrides.

The resolved config is what every entrypoint writes next to its outputs, so a
run can always be reproduced from the recorded file alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ValidationError

FUSION_MODES = ("gated", "concat", "cross_attention")
ENCODER_KINDS = ("sam_vit", "mae_vit", "synthetic")


@dataclass
class DatasetSpec:
    """Where the slices live and how they are selected/normalized."""

    root: str = "data"
    classes: tuple[str, ...] = ("nucleus", "mitochondria", "granules")
    slices_per_cell: int = 350
    train_cells: tuple[str, ...] = ()
    val_cells: tuple[str, ...] = ()
    image_template: str = "{cell_id}/image/{index:04d}.png"
    mask_template: str = "{cell_id}/{cls}/{index:04d}.png"
    # dataset-level standardization applied after per-slice min-max; the
    # defaults make standardization a no-op
    norm_mean: float = 0.0
    norm_std: float = 1.0


@dataclass
class EncoderHandle:
    """Pluggable frozen backbone: a real ViT checkpoint or a seeded stand-in.

    For the tiled (mae role) encoder, input_side/grid_side describe one tile;
    the stitched output covers a (2*input_side)^2 image on a (2*grid_side)^2
    grid.
    """

    kind: str = "synthetic"
    input_side: int = 1024
    grid_side: int = 64
    channels: int = 256
    weights: str | None = None
    seed: int | None = 0


@dataclass
class ModelConfig:
    """Trainable-stack dimensions (defaults match the full-scale setup)."""

    embed_dim: int = 256     # shared width after alignment, and prototype dim
    decoder_dim: int = 128   # mask decoder hidden width
    decoder_blocks: int = 2
    attn_heads: int = 4
    cam_reduction: int = 16
    norm_groups: int = 32


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    max_steps: int | None = None
    align_weight: float = 0.2
    temperature: float = 0.07
    seed: int = 0
    fusion: str = "gated"
    use_dense: bool = True
    use_sparse: bool = True
    use_align_loss: bool = True
    use_residual: bool = True
    eval_every: int = 1
    augment: bool = True
    crop_range: tuple[float, float] = (0.6, 1.0)
    deterministic: bool = True


@dataclass
class Config:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    sam_encoder: EncoderHandle = field(default_factory=EncoderHandle)
    mae_encoder: EncoderHandle = field(
        default_factory=lambda: EncoderHandle(
            kind="synthetic", input_side=512, grid_side=32, channels=512, seed=1
        )
    )
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cache_dir: str | None = None
    out_dir: str = "runs/default"


# ---------------------------------------------------------------------------
# dict <-> dataclass plumbing
# ---------------------------------------------------------------------------

def config_to_dict(cfg) -> dict:
    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        return v

    return convert(cfg)


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(value, tp, path: str):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ValidationError(f"{path}: null not allowed")
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ValidationError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ValidationError(f"{path}: expected a bool, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ValidationError(f"{path}: expected an int, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ValidationError(f"{path}: expected an int, got {value!r}") from None
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ValidationError(f"{path}: expected a float, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise ValidationError(f"{path}: expected a float, got {value!r}") from None
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(f"{path}: expected a string, got {value!r}")
        return value
    raise ValidationError(f"{path}: unsupported config field type {tp}")


def config_from_dict(data: dict, cls=Config, path: str = "") -> Config:
    if not isinstance(data, dict):
        raise ValidationError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(sorted((path + '.' if path else '') + k for k in unknown))}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        sub_path = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type if isinstance(f.type, type) else None):
            kwargs[name] = config_from_dict(data[name], f.type, sub_path)
        else:
            tp = typing.get_type_hints(cls)[name]
            if dataclasses.is_dataclass(tp):
                kwargs[name] = config_from_dict(data[name], tp, sub_path)
            else:
                kwargs[name] = _coerce(data[name], tp, sub_path)
    return cls(**kwargs)


def apply_overrides(cfg: Config, overrides) -> Config:
    """Apply 'a.b.c=value' strings; keys must exist, values are type-checked."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ValidationError(f"unknown config key: {key}")
            node = node[p]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ValidationError(f"unknown config key: {key}")
        node[leaf] = yaml.safe_load(raw)
    return config_from_dict(data)


def load_config(path: str | Path | None, overrides=()) -> Config:
    if path is None:
        cfg = Config()
    else:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        cfg = config_from_dict(data)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def save_config(cfg: Config, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


def config_hash(cfg: Config) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def validate_config(cfg: Config) -> None:
    t, m, d = cfg.train, cfg.model, cfg.data
    if t.lr <= 0 or t.batch_size <= 0 or t.epochs <= 0:
        raise ValidationError("train.lr, train.batch_size and train.epochs must be positive")
    if t.max_steps is not None and t.max_steps <= 0:
        raise ValidationError("train.max_steps must be positive when set")
    if t.fusion not in FUSION_MODES:
        raise ValidationError(f"train.fusion must be one of {FUSION_MODES}, got {t.fusion!r}")
    if not (t.use_dense or t.use_sparse):
        raise ValidationError("decoder needs at least one prompt stream: enable use_dense or use_sparse")
    if t.temperature <= 0:
        raise ValidationError("train.temperature must be positive")
    if t.align_weight < 0:
        raise ValidationError("train.align_weight must be nonnegative")
    if not (0 < t.crop_range[0] <= t.crop_range[1] <= 1.0):
        raise ValidationError(f"train.crop_range must satisfy 0 < lo <= hi <= 1, got {t.crop_range}")
    if m.embed_dim % 2 != 0:
        raise ValidationError("model.embed_dim must be even")
    if not d.classes:
        raise ValidationError("data.classes must be non-empty")
    if d.slices_per_cell < 1:
        raise ValidationError("data.slices_per_cell must be >= 1")
    if d.norm_std <= 0:
        raise ValidationError("data.norm_std must be positive")
    for enc_name in ("sam_encoder", "mae_encoder"):
        enc: EncoderHandle = getattr(cfg, enc_name)
        if enc.kind not in ENCODER_KINDS:
            raise ValidationError(f"{enc_name}.kind must be one of {ENCODER_KINDS}, got {enc.kind!r}")
        if enc.kind == "synthetic" and enc.seed is None:
            raise ValidationError(f"{enc_name}: synthetic encoders require a seed")
        if enc.input_side % enc.grid_side != 0:
            raise ValidationError(f"{enc_name}: input_side must be a multiple of grid_side")
    if cfg.sam_encoder.grid_side != 2 * cfg.mae_encoder.grid_side:
        raise ValidationError(
            "sam_encoder.grid_side must equal 2 * mae_encoder.grid_side so the "
            "stitched tile grid matches the full-image grid"
        )
