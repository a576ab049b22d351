"""Evaluation metrics: per-class Dice, mIoU, Challenge IoU, AJI.

Conventions (fixed here, documented in the README):
- Dice and IoU of two empty masks are 1 (correctly predicted absence).
- mIoU averages over all configured classes; Challenge IoU averages only over
  classes with nonempty ground truth in the evaluated set.
- AJI derives instances from 4-connected components of each class's semantic
  mask, matches them greedily by descending IoU, and adds unmatched pixels of
  either side to the denominator.

Dataset-level scores pool pixel counts over slices, so IoU = D / (2 - D)
holds exactly for every reported pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    ps, ts = int(p.sum()), int(t.sum())
    if ps + ts == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / (ps + ts)


def iou_score(pred: np.ndarray, target: np.ndarray) -> float:
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


def iou_scores(preds: dict[str, np.ndarray], targets: dict[str, np.ndarray]):
    """Returns (m_iou, challenge_iou, per-class IoU dict).

    Classes are taken from `targets`; every class counts toward mIoU, only
    classes with nonempty ground truth count toward Challenge IoU.
    """
    per_class = {cls: iou_score(preds[cls], targets[cls]) for cls in targets}
    m_iou = float(np.mean(list(per_class.values())))
    present = [cls for cls, t in targets.items() if np.asarray(t, dtype=bool).any()]
    challenge = float(np.mean([per_class[c] for c in present])) if present else 1.0
    return m_iou, challenge, per_class


def _instances(mask: np.ndarray) -> list[np.ndarray]:
    labeled, n = ndimage.label(np.asarray(mask, dtype=bool), structure=FOUR_CONN)
    return [labeled == i for i in range(1, n + 1)]


def aji_parts(preds: dict[str, np.ndarray], targets: dict[str, np.ndarray]) -> tuple[int, int]:
    """Aggregated intersection/union pixel counts for the AJI ratio.

    Instances never cross class boundaries; matching is greedy by descending
    IoU with each instance used at most once.
    """
    inter_total, union_total = 0, 0
    for cls in targets:
        gts = _instances(targets[cls])
        prs = _instances(preds[cls])
        candidates = []
        for gi, g in enumerate(gts):
            for pi, p in enumerate(prs):
                inter = int((g & p).sum())
                if inter > 0:
                    union = int((g | p).sum())
                    candidates.append((inter / union, gi, pi, inter, union))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        used_g, used_p = set(), set()
        for _, gi, pi, inter, union in candidates:
            if gi in used_g or pi in used_p:
                continue
            used_g.add(gi)
            used_p.add(pi)
            inter_total += inter
            union_total += union
        for gi, g in enumerate(gts):
            if gi not in used_g:
                union_total += int(g.sum())
        for pi, p in enumerate(prs):
            if pi not in used_p:
                union_total += int(p.sum())
    return inter_total, union_total


def aji(preds: dict[str, np.ndarray], targets: dict[str, np.ndarray]) -> float:
    inter, union = aji_parts(preds, targets)
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class MetricsReport:
    per_class_dice: dict[str, float]
    overall_dice: float
    per_class_iou: dict[str, float]
    m_iou: float
    challenge_iou: float
    aji: float
    slices_evaluated: int
    split: str = "unspecified"
    skipped_classes: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "split": self.split,
            "slices_evaluated": self.slices_evaluated,
            "challenge_iou": self.challenge_iou,
            "m_iou": self.m_iou,
            "aji": self.aji,
            "per_class_dice": self.per_class_dice,
            "overall_dice": self.overall_dice,
            "per_class_iou": self.per_class_iou,
            "skipped_classes": self.skipped_classes,
        }

    def to_table(self) -> str:
        classes = list(self.per_class_dice)
        head = ["Challenge IoU", "m IoU", "AJI"] + [f"Dice {c}" for c in classes] + ["Dice overall"]
        vals = [self.challenge_iou, self.m_iou, self.aji]
        vals += [self.per_class_dice[c] for c in classes] + [self.overall_dice]
        widths = [max(len(h), 7) for h in head]
        top = "  ".join(h.ljust(w) for h, w in zip(head, widths))
        row = "  ".join(f"{v:.3f}".ljust(w) for v, w in zip(vals, widths))
        return top + "\n" + row

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.as_dict(), indent=2) + "\n")


class MetricsAccumulator:
    """Pools per-class pixel counts and AJI parts over evaluated slices."""

    def __init__(self, classes: list[str], split: str = "unspecified"):
        self.classes = list(classes)
        self.split = split
        self.inter = {c: 0 for c in self.classes}
        self.pred = {c: 0 for c in self.classes}
        self.target = {c: 0 for c in self.classes}
        self.aji_inter = 0
        self.aji_union = 0
        self.slices = 0
        self.skipped: dict[str, int] = {}

    def add(self, preds: dict[str, np.ndarray], targets: dict[str, np.ndarray]) -> None:
        self.slices += 1
        evaluated = {}
        for cls in self.classes:
            if cls not in targets:
                self.skipped[cls] = self.skipped.get(cls, 0) + 1
                continue
            p = np.asarray(preds[cls], dtype=bool)
            t = np.asarray(targets[cls], dtype=bool)
            self.inter[cls] += int((p & t).sum())
            self.pred[cls] += int(p.sum())
            self.target[cls] += int(t.sum())
            evaluated[cls] = True
        ai, au = aji_parts(
            {c: preds[c] for c in evaluated}, {c: targets[c] for c in evaluated}
        )
        self.aji_inter += ai
        self.aji_union += au

    def report(self) -> MetricsReport:
        dice, iou = {}, {}
        for c in self.classes:
            denom = self.pred[c] + self.target[c]
            dice[c] = 1.0 if denom == 0 else 2.0 * self.inter[c] / denom
            union = denom - self.inter[c]
            iou[c] = 1.0 if union == 0 else self.inter[c] / union
        present = [c for c in self.classes if self.target[c] > 0]
        return MetricsReport(
            per_class_dice=dice,
            overall_dice=float(np.mean(list(dice.values()))),
            per_class_iou=iou,
            m_iou=float(np.mean(list(iou.values()))),
            challenge_iou=float(np.mean([iou[c] for c in present])) if present else 1.0,
            aji=1.0 if self.aji_union == 0 else self.aji_inter / self.aji_union,
            slices_evaluated=self.slices,
            split=self.split,
            skipped_classes=self.skipped,
        )
