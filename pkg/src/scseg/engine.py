"""Training and evaluation orchestration.

Encoders stay frozen outside the optimizer: embeddings enter the trainable
stack as plain tensors, and their producers are hashed before and after every
run to prove nothing touched them. In deterministic mode a (config, seed,
data order) triple fully determines the checkpoint and the loss trace.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config, apply_overrides, config_from_dict, config_hash, config_to_dict, save_config
from .data import LabeledSlice, augment, normalize, resize_slice
from .decoder import count_parameters, logits_to_mask
from .encoders import (
    FeatureGrid,
    Source,
    build_encoder,
    cache_path,
    compute_mae_embedding,
    compute_sam_embedding,
    load_embedding,
    store_embedding,
)
from .errors import NumericError, ValidationError
from .fusion import alignment_cosine_loss
from .gridops import resize_nearest
from .losses import dice_loss, prototype_contrast_loss, total_loss
from .metrics import MetricsAccumulator, MetricsReport, dice_score
from .model import Segmenter, build_model

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


class EmbeddingProvider:
    """Builds both frozen encoders and serves per-slice embedding pairs,
    optionally memoized through the on-disk cache."""

    def __init__(self, cfg: Config, cache_dir: str | Path | None = None):
        self.sam = build_encoder(cfg.sam_encoder)
        self.mae = build_encoder(cfg.mae_encoder)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if cfg.sam_encoder.input_side != 2 * self.mae.input_side:
            raise ValidationError(
                "full-image encoder side must be twice the tile side so one "
                "prepared image feeds both encoders"
            )

    def hashes(self) -> dict[str, str]:
        return {"sam": self.sam.weights_hash(), "mae": self.mae.weights_hash()}

    def embed_image(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        e_s = compute_sam_embedding(image, self.sam).data
        e_m = compute_mae_embedding(image, self.mae).data
        return e_s, e_m

    def embed_slice(self, sl: LabeledSlice, cacheable: bool = True) -> tuple[np.ndarray, np.ndarray]:
        if self.cache_dir is None or not cacheable:
            return self.embed_image(sl.image)
        paths = {
            fam: cache_path(self.cache_dir, sl.cell_id, sl.slice_index, fam)
            for fam in ("sam", "mae")
        }
        if paths["sam"].exists() and paths["mae"].exists():
            return load_embedding(paths["sam"]).data, load_embedding(paths["mae"]).data
        e_s, e_m = self.embed_image(sl.image)
        store_embedding(FeatureGrid(e_s, Source.SAM), paths["sam"])
        store_embedding(FeatureGrid(e_m, Source.MAE), paths["mae"])
        return e_s, e_m


def prepare_slice(
    sl: LabeledSlice,
    cfg: Config,
    aug_seed: int | None = None,
) -> LabeledSlice:
    """Normalize and bring a slice to the encoder input side.

    aug_seed enables the random crop+resize; None gives the deterministic
    full-frame resize used for evaluation and for cacheable embeddings.
    """
    side = cfg.sam_encoder.input_side
    out = normalize(sl, cfg.data)
    if aug_seed is not None:
        return augment(out, aug_seed, side, cfg.train.crop_range)
    if out.image.shape != (side, side):
        return resize_slice(out, side)
    return out


def _aug_seed(base: int, epoch: int, sl: LabeledSlice) -> int:
    key = f"{base}:{epoch}:{sl.cell_id}:{sl.slice_index}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def _ensure_finite(value: torch.Tensor, context: str, model: Segmenter, out_dir: Path | None) -> None:
    if torch.isfinite(value).all():
        return
    snapshot = None
    if out_dir is not None:
        snapshot = Path(out_dir) / "nan_snapshot.pt"
        torch.save({"context": context, "model_state": model.state_dict()}, snapshot)
    raise NumericError(
        f"non-finite value in {context}"
        + (f"; diagnostic snapshot at {snapshot}" if snapshot else "")
    )


@dataclass
class TrainResult:
    checkpoint: dict
    records: list[dict]
    encoder_hashes_before: dict[str, str]
    encoder_hashes_after: dict[str, str]
    wall_time: float
    out_dir: Path | None = None
    checkpoint_path: Path | None = None


def _nearest_resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    if mask.shape == (side, side):
        return mask
    return resize_nearest(mask, side, side)


def _batch_tensors(
    slices: list[LabeledSlice],
    provider: EmbeddingProvider,
    classes: list[str],
    logits_side: int,
    cacheable: bool,
):
    e_full, e_tiled, masks = [], [], []
    for sl in slices:
        e_s, e_m = provider.embed_slice(sl, cacheable=cacheable)
        e_full.append(torch.from_numpy(e_s).permute(2, 0, 1))
        e_tiled.append(torch.from_numpy(e_m).permute(2, 0, 1))
        masks.append(
            np.stack([
                _nearest_resize_mask(sl.masks[c], logits_side) if c in sl.masks
                else np.zeros((logits_side, logits_side), dtype=np.uint8)
                for c in classes
            ])
        )
    target = torch.from_numpy(np.stack(masks)).float()  # (B, c, S, S)
    present = target.sum(dim=(2, 3)) > 0
    return torch.stack(e_full), torch.stack(e_tiled), target, present


def _batch_losses(model: Segmenter, cfg: Config, e_full, e_tiled, target, present):
    t = cfg.train
    feats = model.features(e_full, e_tiled)
    l_cos = alignment_cosine_loss(feats.aligned_full, feats.aligned_tiled)
    l_ntx = prototype_contrast_loss(model.bank.prototypes, feats.class_embeds, t.temperature)
    dice_terms = []
    for k in range(len(cfg.data.classes)):
        logits = model.class_logits(feats, k)
        probs = torch.sigmoid(logits)
        for b in range(target.shape[0]):
            if present[b, k]:
                dice_terms.append(dice_loss(probs[b], target[b, k]))
    l_dice = torch.stack(dice_terms).mean() if dice_terms else e_full.new_zeros(())
    weight = t.align_weight if t.use_align_loss else 0.0
    total = weight * l_cos + l_ntx + l_dice
    report = total_loss(l_cos.item(), l_ntx.item(), l_dice.item(), weight, t.temperature)
    return total, report


def _train_set_dice(model: Segmenter, cfg: Config, prepared: list[LabeledSlice], provider: EmbeddingProvider, cacheable: bool) -> dict:
    classes = list(cfg.data.classes)
    logits_side = 4 * cfg.sam_encoder.grid_side
    scores: dict[str, list[float]] = {c: [] for c in classes}
    with torch.no_grad():
        for sl in prepared:
            e_f, e_t, target, present = _batch_tensors([sl], provider, classes, logits_side, cacheable)
            feats = model.features(e_f, e_t)
            for k, c in enumerate(classes):
                if not present[0, k]:
                    continue
                logits = model.class_logits(feats, k)[0].numpy()
                pred = logits_to_mask(logits)
                scores[c].append(dice_score(pred, target[0, k].numpy() > 0.5))
    per_class = {c: float(np.mean(v)) if v else 1.0 for c, v in scores.items()}
    return {"per_class": per_class, "mean": float(np.mean(list(per_class.values())))}


def train(cfg: Config, train_slices: list[LabeledSlice], out_dir: str | Path | None = None) -> TrainResult:
    t = cfg.train
    classes = list(cfg.data.classes)
    if len(classes) < 2:
        raise ValidationError("training needs at least 2 classes (contrastive term has no negatives)")
    if not train_slices:
        raise ValidationError("training set is empty")
    if cfg.cache_dir and t.augment:
        raise ValidationError(
            "embedding cache and augmentation are mutually exclusive: augmented "
            "crops change per step, so they must be encoded on the fly"
        )

    out_path = Path(out_dir) if out_dir else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_path / "resolved_config.yaml")
        log_fh = open(out_path / "train_log.jsonl", "w")

    started = time.time()
    set_determinism(t.seed, t.deterministic)
    provider = EmbeddingProvider(cfg, cfg.cache_dir)
    hashes_before = provider.hashes()

    model = build_model(cfg, len(classes))
    optimizer = torch.optim.Adam(model.parameters(), lr=t.lr)

    normalized = [normalize(sl, cfg.data) for sl in train_slices]
    cacheable = not t.augment
    logits_side = 4 * cfg.sam_encoder.grid_side
    n = len(normalized)
    batch = min(t.batch_size, n)
    steps_per_epoch = math.ceil(n / batch)
    max_steps = t.max_steps if t.max_steps is not None else t.epochs * steps_per_epoch

    records: list[dict] = []

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    rng = np.random.default_rng(t.seed)
    step = 0
    epoch = 0
    eval_slices = None  # prepared once, un-augmented, for the per-epoch curve
    try:
        while step < max_steps and epoch < t.epochs:
            order = rng.permutation(n)
            for start in range(0, n, batch):
                if step >= max_steps:
                    break
                idx = order[start:start + batch]
                if t.augment:
                    prepared = [
                        prepare_slice(train_slices[i], cfg, _aug_seed(t.seed, epoch, train_slices[i]))
                        for i in idx
                    ]
                else:
                    prepared = [prepare_slice(train_slices[i], cfg) for i in idx]
                e_f, e_t, target, present = _batch_tensors(prepared, provider, classes, logits_side, cacheable)
                total, report = _batch_losses(model, cfg, e_f, e_t, target, present)
                _ensure_finite(total, f"loss at step {step}", model, out_path)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                emit({"kind": "step", "step": step, "epoch": epoch, **report.as_record()})
                step += 1
            epoch += 1
            if epoch % t.eval_every == 0 or step >= max_steps or epoch >= t.epochs:
                if eval_slices is None:
                    eval_slices = [prepare_slice(sl, cfg) for sl in train_slices]
                model.eval()
                dice = _train_set_dice(model, cfg, eval_slices, provider, cacheable=not t.augment and cfg.cache_dir is not None)
                model.train()
                emit({"kind": "epoch", "epoch": epoch, "step": step, "mean_dice": dice["mean"], "per_class": dice["per_class"]})
    finally:
        if log_fh is not None:
            log_fh.close()

    hashes_after = provider.hashes()
    if hashes_after != hashes_before:
        raise NumericError("frozen encoder hash changed during training")

    checkpoint = {
        "version": CHECKPOINT_VERSION,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "classes": classes,
        "epoch": epoch,
        "steps": step,
        "encoder_hashes": hashes_after,
        "trainable_params": count_parameters(model),
    }
    log.info(
        "trainable parameters: %d (full-scale reference count is 27.6M; informational only)",
        checkpoint["trainable_params"],
    )

    ckpt_path = None
    if out_path is not None:
        ckpt_path = out_path / "checkpoint.pt"
        torch.save(checkpoint, ckpt_path)

    return TrainResult(
        checkpoint=checkpoint,
        records=records,
        encoder_hashes_before=hashes_before,
        encoder_hashes_after=hashes_after,
        wall_time=time.time() - started,
        out_dir=out_path,
        checkpoint_path=ckpt_path,
    )


# ---------------------------------------------------------------------------
# checkpoint + inference
# ---------------------------------------------------------------------------

def load_checkpoint(path: str | Path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(checkpoint: dict) -> tuple[Segmenter, Config]:
    cfg = config_from_dict(checkpoint["config"])
    set_determinism(cfg.train.seed, cfg.train.deterministic)
    model = build_model(cfg, len(checkpoint["classes"]))
    model.load_state_dict(checkpoint["model_state"])
    model.eval()
    return model, cfg


def count_trainable(checkpoint: dict) -> int:
    model, _ = model_from_checkpoint(checkpoint)
    return count_parameters(model)


def predict_slice(
    model: Segmenter,
    cfg: Config,
    provider: EmbeddingProvider,
    sl: LabeledSlice,
    cacheable: bool = False,
) -> dict[str, np.ndarray]:
    """Per-class binary masks at the slice's original resolution."""
    original_shape = sl.image.shape
    prepared = prepare_slice(sl, cfg)
    e_s, e_m = provider.embed_slice(prepared, cacheable=cacheable)
    e_f = torch.from_numpy(e_s).permute(2, 0, 1)[None]
    e_t = torch.from_numpy(e_m).permute(2, 0, 1)[None]
    preds = {}
    with torch.no_grad():
        feats = model.features(e_f, e_t)
        for k, cls in enumerate(cfg.data.classes):
            logits = model.class_logits(feats, k)[0].numpy()
            preds[cls] = logits_to_mask(logits, 0.0, out_shape=original_shape)
    return preds


def evaluate(
    checkpoint: dict | str | Path,
    slices: list[LabeledSlice],
    split: str = "val",
    cache_dir: str | Path | None = None,
) -> MetricsReport:
    if not isinstance(checkpoint, dict):
        checkpoint = load_checkpoint(checkpoint)
    if not slices:
        raise ValidationError("evaluation set is empty")
    model, cfg = model_from_checkpoint(checkpoint)
    provider = EmbeddingProvider(cfg, cache_dir)
    acc = MetricsAccumulator(list(cfg.data.classes), split=split)
    for sl in slices:
        missing = [c for c in cfg.data.classes if c not in sl.masks]
        for c in missing:
            log.warning("slice %s/%d lacks mask for class %r; skipped", sl.cell_id, sl.slice_index, c)
        preds = predict_slice(model, cfg, provider, sl, cacheable=cache_dir is not None)
        acc.add(preds, sl.masks)
    return acc.report()


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    name: str
    overrides: dict
    report: MetricsReport | None = None
    error: str | None = None
    columns: dict = field(default_factory=dict)


def run_ablation(
    cfg: Config,
    deltas: list[tuple[str, dict]],
    train_slices: list[LabeledSlice],
    eval_slices: list[LabeledSlice] | None = None,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """One training run per delta, shared seed, consolidated table.

    A failed run is recorded on its row; the table is still emitted.
    """
    rows = []
    out_path = Path(out_dir) if out_dir else None
    for name, overrides in deltas:
        row = AblationRow(name=name, overrides=dict(overrides))
        try:
            variant = apply_overrides(cfg, [f"{k}={v}" for k, v in overrides.items()])
            run_dir = out_path / name if out_path else None
            result = train(variant, train_slices, out_dir=run_dir)
            row.report = evaluate(result.checkpoint, eval_slices or train_slices, split="ablation")
            gran = row.report.per_class_dice.get("granules")
            row.columns = {
                "C IoU": row.report.challenge_iou,
                "AJI": row.report.aji,
                "m Dice": row.report.overall_dice,
                "Dice_gra": gran if gran is not None else float("nan"),
            }
        except Exception as exc:  # noqa: BLE001 - the table must survive failed runs
            row.error = f"{type(exc).__name__}: {exc}"
            log.warning("ablation run %r failed: %s", name, row.error)
        rows.append(row)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "ablation_table.txt").write_text(ablation_table(rows) + "\n")
        (out_path / "ablation_table.json").write_text(json.dumps(
            [
                {
                    "name": r.name,
                    "overrides": r.overrides,
                    "columns": r.columns,
                    "error": r.error,
                }
                for r in rows
            ],
            indent=2,
        ) + "\n")
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    header = ["run", "C IoU", "AJI", "m Dice", "Dice_gra"]
    widths = [max(len(header[0]), *(len(r.name) for r in rows))] + [8] * 4
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        if r.error is not None:
            cells = [r.name.ljust(widths[0]), f"FAILED: {r.error}"]
        else:
            cells = [r.name.ljust(widths[0])] + [
                f"{r.columns[c]:.3f}".ljust(8) for c in header[1:]
            ]
        lines.append("  ".join(cells))
    return "\n".join(lines)
