"""Single command-line entrypoint: precompute, train, eval, predict,
visualize, ablate.

Exit codes: 0 ok, 2 usage, 3 validation, 4 I/O, 5 numeric failure. Every
subcommand writes the fully resolved config next to its outputs so a run can
be reproduced from the recorded file alone. Input data directories are never
written to. The SCSEG_CACHE_ROOT environment variable supplies a default
embedding-cache root when the config leaves it unset.
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import engine, visualize
from .config import Config, apply_overrides, load_config, save_config
from .data import LabeledSlice, load_volume
from .data import _read_gray  # shared grayscale reader
from .errors import DataIOError, NumericError, ValidationError
from .encoders import FeatureGrid, Source, store_embedding, cache_path
from .engine import EmbeddingProvider, load_checkpoint, model_from_checkpoint, prepare_slice

log = logging.getLogger(__name__)

_CONFIG_OPT = click.option("--config", "config_path", type=str, default=None, help="YAML config file.")
_OVERRIDE_OPT = click.option(
    "-o", "--override", "overrides", multiple=True, metavar="KEY=VALUE",
    help="Dotted-key config override, e.g. -o train.lr=0.01",
)
_SLICES_OPT = click.option(
    "--slices-per-cell", type=int, default=None,
    help="Override data.slices_per_cell (default 350).",
)


def _resolve(config_path, overrides, slices_per_cell=None) -> Config:
    cfg = load_config(config_path, overrides)
    if slices_per_cell is not None:
        cfg = apply_overrides(cfg, [f"data.slices_per_cell={slices_per_cell}"])
    env_root = os.environ.get("SCSEG_CACHE_ROOT")
    if cfg.cache_dir is None and env_root:
        log.info("cache root from SCSEG_CACHE_ROOT: %s", env_root)
        cfg = apply_overrides(cfg, [f"cache_dir={env_root}"])
    return cfg


def _load_cells(cfg: Config, cells) -> list[LabeledSlice]:
    slices: list[LabeledSlice] = []
    for cell in cells:
        slices.extend(load_volume(cfg.data, cell))
    return slices


def _require_checkpoint(path: str) -> dict:
    if not Path(path).exists():
        raise DataIOError(f"required artifact missing: checkpoint file {path}")
    return load_checkpoint(path)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@_CONFIG_OPT
@_OVERRIDE_OPT
@_SLICES_OPT
@click.option("--encoder", type=click.Choice(["sam", "mae", "synthetic"]), required=True,
              help="Which embedding family to produce (synthetic fills both).")
@click.option("--weights", type=str, default=None, help="Backbone weights file (TorchScript).")
@click.option("--out", "out_dir", type=str, required=True, help="Cache directory to fill.")
@click.option("--cells", type=str, default=None, help="Comma-separated cell ids (default: all split cells).")
def precompute(config_path, overrides, slices_per_cell, encoder, weights, out_dir, cells):
    """Compute and store frozen embeddings for every selected slice."""
    cfg = _resolve(config_path, overrides, slices_per_cell)
    if weights is not None:
        fam = "sam_encoder" if encoder in ("sam", "synthetic") else "mae_encoder"
        cfg = apply_overrides(cfg, [f"{fam}.weights={weights}"])
    families = ("sam", "mae") if encoder == "synthetic" else (encoder,)
    provider = EmbeddingProvider(cfg)
    cell_ids = cells.split(",") if cells else list(cfg.data.train_cells) + list(cfg.data.val_cells)
    if not cell_ids:
        raise ValidationError("no cells selected: set data.train_cells/val_cells or pass --cells")
    out_path = Path(out_dir)
    written = 0
    for cell in cell_ids:
        for sl in load_volume(cfg.data, cell):
            prepared = prepare_slice(sl, cfg)
            e_s, e_m = provider.embed_image(prepared.image)
            if "sam" in families:
                store_embedding(FeatureGrid(e_s, Source.SAM), cache_path(out_path, cell, sl.slice_index, "sam"))
                written += 1
            if "mae" in families:
                store_embedding(FeatureGrid(e_m, Source.MAE), cache_path(out_path, cell, sl.slice_index, "mae"))
                written += 1
    save_config(cfg, out_path / "resolved_config.yaml")
    click.echo(f"wrote {written} embedding files under {out_path}")


@cli.command()
@_CONFIG_OPT
@_OVERRIDE_OPT
@_SLICES_OPT
@click.option("--out", "out_dir", type=str, default=None, help="Run directory (default: config out_dir).")
def train(config_path, overrides, slices_per_cell, out_dir):
    """Train the full stack on the configured training cells."""
    cfg = _resolve(config_path, overrides, slices_per_cell)
    if not cfg.data.train_cells:
        raise ValidationError("data.train_cells is empty")
    slices = _load_cells(cfg, cfg.data.train_cells)
    result = engine.train(cfg, slices, out_dir=out_dir or cfg.out_dir)
    last = result.records[-1] if result.records else {}
    click.echo(
        f"trained {result.checkpoint['steps']} steps in {result.wall_time:.1f}s; "
        f"checkpoint: {result.checkpoint_path}; last record: {last}"
    )


@cli.command(name="eval")
@_CONFIG_OPT
@_OVERRIDE_OPT
@_SLICES_OPT
@click.option("--checkpoint", "ckpt_path", type=str, required=True)
@click.option("--split", type=click.Choice(["val", "train"]), default="val")
@click.option("--out", "out_dir", type=str, default=None, help="Where to write the metrics report.")
def eval_cmd(config_path, overrides, slices_per_cell, ckpt_path, split, out_dir):
    """Evaluate a checkpoint on the configured validation (or training) cells."""
    ckpt = _require_checkpoint(ckpt_path)
    if config_path is None and not overrides and slices_per_cell is None:
        cfg = load_config(None)
        from .config import config_from_dict

        cfg = config_from_dict(ckpt["config"])
    else:
        cfg = _resolve(config_path, overrides, slices_per_cell)
    cells = cfg.data.val_cells if split == "val" else cfg.data.train_cells
    if not cells:
        raise ValidationError(f"data.{'val' if split == 'val' else 'train'}_cells is empty")
    slices = _load_cells(cfg, cells)
    report = engine.evaluate(ckpt, slices, split=split, cache_dir=cfg.cache_dir)
    click.echo(report.to_table())
    if out_dir:
        out_path = Path(out_dir)
        report.save(out_path / "metrics.json")
        (out_path / "metrics.txt").write_text(report.to_table() + "\n")
        save_config(cfg, out_path / "resolved_config.yaml")
        click.echo(f"report written to {out_path}")


@cli.command()
@click.option("--checkpoint", "ckpt_path", type=str, required=True)
@click.option("--image", "image_path", type=str, required=True)
@click.option("--class-name", "class_name", type=str, required=True)
@click.option("--out", "out_path", type=str, required=True, help="Output mask image file.")
def predict(ckpt_path, image_path, class_name, out_path):
    """Write the binary mask for one class of one image."""
    from PIL import Image

    ckpt = _require_checkpoint(ckpt_path)
    model, cfg = model_from_checkpoint(ckpt)
    if class_name not in cfg.data.classes:
        raise click.UsageError(
            f"unknown class {class_name!r}; valid classes: {', '.join(cfg.data.classes)}"
        )
    if not Path(image_path).exists():
        raise DataIOError(f"image file not found: {image_path}")
    image = _read_gray(Path(image_path))
    sl = LabeledSlice(image=image, masks={}, cell_id="cli", slice_index=0)
    provider = EmbeddingProvider(cfg)
    preds = engine.predict_slice(model, cfg, provider, sl)
    mask = preds[class_name]
    out_file = Path(out_path)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask * 255).astype(np.uint8)).save(out_file)
    save_config(cfg, out_file.parent / "resolved_config.yaml")
    click.echo(f"mask written to {out_file}")


@cli.command()
@_CONFIG_OPT
@_OVERRIDE_OPT
@click.option("--kind", type=click.Choice(["similarity", "overlay", "embedding_scatter", "dice_curve"]),
              required=True)
@click.option("--checkpoint", "ckpt_path", type=str, default=None)
@click.option("--image", "image_path", type=str, default=None, help="Input image for image-based kinds.")
@click.option("--log", "log_path", type=str, default=None, help="Training log for dice_curve.")
@click.option("--projector", type=click.Choice(["tsne", "pca"]), default="tsne")
@click.option("--stage", type=click.Choice(["pre", "post"]), default="pre",
              help="embedding_scatter: project raw or aligned embeddings.")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=str, required=True)
def visualize_cmd(config_path, overrides, kind, ckpt_path, image_path, log_path, projector, stage, seed, out_dir):
    """Emit plots: similarity heatmaps, overlays, embedding scatter, Dice curve."""
    import torch

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)

    if kind == "dice_curve":
        if log_path is None or not Path(log_path).exists():
            raise DataIOError(f"required artifact missing: training log {log_path}")
        info = visualize.dice_curve(log_path, out_path / "dice_curve.png")
        click.echo(f"plotted {len(info['epochs'])} epochs to {info['path']}")
        return

    if ckpt_path is None:
        raise DataIOError(f"required artifact missing: checkpoint (needed for kind={kind})")
    ckpt = _require_checkpoint(ckpt_path)
    model, cfg = model_from_checkpoint(ckpt)
    if overrides or config_path:
        cfg = _resolve(config_path, overrides)
    provider = EmbeddingProvider(cfg)

    if image_path is None or not Path(image_path).exists():
        raise DataIOError(f"required artifact missing: input image {image_path}")
    image = _read_gray(Path(image_path))
    sl = LabeledSlice(image=image, masks={}, cell_id="cli", slice_index=0)

    if kind == "similarity":
        files = visualize.similarity_maps(model, cfg, provider, sl, out_path)
        click.echo("wrote:\n" + "\n".join(str(f) for f in files))
    elif kind == "overlay":
        path = visualize.overlay(model, cfg, provider, sl, out_path)
        click.echo(f"wrote {path}")
    else:  # embedding_scatter
        prepared = prepare_slice(sl, cfg)
        e_s, e_m = provider.embed_slice(prepared, cacheable=False)
        if stage == "post":
            with torch.no_grad():
                feats = model.features(
                    torch.from_numpy(e_s).permute(2, 0, 1)[None],
                    torch.from_numpy(e_m).permute(2, 0, 1)[None],
                )
            a = feats.aligned_full[0].permute(1, 2, 0).numpy()
            b = feats.aligned_tiled[0].permute(1, 2, 0).numpy()
        else:
            a, b = e_s, e_m
        info = visualize.embedding_scatter(a, b, out_path / f"scatter_{stage}.png",
                                           method=projector, seed=seed)
        click.echo(f"wrote {info['path']}")
    save_config(cfg, out_path / "resolved_config.yaml")


_BUILTIN_GRIDS = {
    "lambda": [
        ("align_weight_0.1", {"train.align_weight": 0.1}),
        ("align_weight_0.2", {"train.align_weight": 0.2}),
        ("align_weight_0.3", {"train.align_weight": 0.3}),
    ],
    "fusion": [
        ("fusion_gated", {"train.fusion": "gated"}),
        ("fusion_concat", {"train.fusion": "concat"}),
        ("fusion_cross_attention", {"train.fusion": "cross_attention"}),
    ],
}


@cli.command()
@_CONFIG_OPT
@_OVERRIDE_OPT
@_SLICES_OPT
@click.option("--grid", type=str, required=True,
              help="Built-in grid name (lambda, fusion) or a YAML file of {name, overrides} entries.")
@click.option("--out", "out_dir", type=str, required=True)
def ablate(config_path, overrides, slices_per_cell, grid, out_dir):
    """Run a grid of config deltas and emit a consolidated table."""
    import yaml

    cfg = _resolve(config_path, overrides, slices_per_cell)
    if grid in _BUILTIN_GRIDS:
        deltas = _BUILTIN_GRIDS[grid]
    else:
        if not Path(grid).exists():
            raise DataIOError(f"grid file not found: {grid}")
        with open(grid) as fh:
            entries = yaml.safe_load(fh)
        deltas = [(e["name"], e["overrides"]) for e in entries]
    if not cfg.data.train_cells:
        raise ValidationError("data.train_cells is empty")
    train_slices = _load_cells(cfg, cfg.data.train_cells)
    eval_slices = _load_cells(cfg, cfg.data.val_cells) if cfg.data.val_cells else None
    rows = engine.run_ablation(cfg, deltas, train_slices, eval_slices, out_dir=out_dir)
    from .engine import ablation_table

    table = ablation_table(rows)
    click.echo(table)
    save_config(cfg, Path(out_dir) / "resolved_config.yaml")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except ValidationError as exc:
        click.echo(f"validation error: {exc}", err=True)
        return 3
    except (DataIOError, OSError) as exc:
        click.echo(f"I/O error: {exc}", err=True)
        return 4
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return 5


if __name__ == "__main__":
    sys.exit(main())
