"""Confusion-matrix metrics, cross-fold aggregation, timeline rendering,
and high-confidence error export.

All metrics are on the 0-100 percent scale. The positive class is the
out-of-body irrelevant frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .dataset import ClassLabel
from .errors import LengthMismatchError, TooFewFoldsError

# timeline bar colors (RGB): light blue = relevant, dark blue = irrelevant
COLOR_RELEVANT = (173, 216, 230)
COLOR_IRRELEVANT = (25, 25, 112)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_json(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False  # set when a zero denominator forced a 0

    def to_json(self) -> dict:
        return {"precision": self.precision, "recall": self.recall,
                "f1": self.f1, "degenerate": self.degenerate}


@dataclass(frozen=True)
class FoldReport:
    values: tuple
    mean: float
    std: float  # sample (n-1) convention

    @property
    def n_folds(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class PredictionTimeline:
    video_id: str
    pred: tuple          # of ClassLabel, one per second from t=0
    confidence: tuple    # softmax probability of the predicted class
    truth: tuple         # of ClassLabel

    def __post_init__(self):
        if not (len(self.pred) == len(self.confidence) == len(self.truth)):
            raise LengthMismatchError("timeline field lengths differ")


def confusion(preds, truth) -> ConfusionMatrix:
    if len(preds) != len(truth) or len(preds) == 0:
        raise LengthMismatchError(
            f"{len(preds)} predictions vs {len(truth)} truth labels")
    pos = ClassLabel.positive()
    tp = fp = fn = tn = 0
    for p, t in zip(preds, truth):
        if p is pos and t is pos:
            tp += 1
        elif p is pos:
            fp += 1
        elif t is pos:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)


def class_metrics(cm: ConfusionMatrix, cls: ClassLabel) -> ClassMetrics:
    """Percent-scale precision/recall/F1 of one class.

    Zero denominators yield 0 with the degeneracy flag set, so callers can
    tell a true zero from an undefined value.
    """
    if cls is ClassLabel.positive():
        tp, fp, fn = cm.tp, cm.fp, cm.fn
    else:  # swap class roles: negatives become the class of interest
        tp, fp, fn = cm.tn, cm.fn, cm.fp
    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = 100.0 * tp / (tp + fp)
    if tp + fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = 100.0 * tp / (tp + fn)
    if precision + recall == 0:
        f1, degenerate = 0.0, True
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassMetrics(precision=precision, recall=recall, f1=f1,
                        degenerate=degenerate)


def macro_f1(cm: ConfusionMatrix) -> float:
    """Arithmetic mean of the per-class F1 scores (percent scale)."""
    f1_rel = class_metrics(cm, ClassLabel.RELEVANT).f1
    f1_irr = class_metrics(cm, ClassLabel.IRRELEVANT).f1
    return (f1_rel + f1_irr) / 2.0


def aggregate_folds(values) -> FoldReport:
    values = tuple(float(v) for v in values)
    if len(values) < 2:
        raise TooFewFoldsError(f"need >= 2 fold values, got {len(values)}")
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return FoldReport(values=values, mean=mean, std=math.sqrt(var))


def metrics_report(cm: ConfusionMatrix, fold_id: int = 0,
                   split: str = "test") -> dict:
    """Metrics report JSON structure for one evaluated split."""
    return {
        "fold_id": fold_id,
        "split": split,
        "mF1": macro_f1(cm),
        "per_class": {
            "relevant": class_metrics(cm, ClassLabel.RELEVANT).to_json(),
            "irrelevant": class_metrics(cm, ClassLabel.IRRELEVANT).to_json(),
        },
        "confusion": cm.to_json(),
    }


def run_length_encode(labels) -> list:
    """[(label, run_length), ...] for a label sequence."""
    runs = []
    for lab in labels:
        if runs and runs[-1][0] is lab:
            runs[-1][1] += 1
        else:
            runs.append([lab, 1])
    return [(lab, n) for lab, n in runs]


def run_length_decode(runs) -> list:
    out = []
    for lab, n in runs:
        out.extend([lab] * n)
    return out


def render_timeline(tl: PredictionTimeline, out_path, px_per_second: int = 4,
                    bar_height: int = 24) -> None:
    """Write a two-row color bar (prediction over truth) PNG and a text RLE."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = len(tl.pred)
    width = n * px_per_second
    img = np.zeros((2 * bar_height + 2, width, 3), dtype=np.uint8)

    def paint(row0, labels):
        for t, lab in enumerate(labels):
            color = COLOR_IRRELEVANT if lab is ClassLabel.IRRELEVANT else COLOR_RELEVANT
            img[row0:row0 + bar_height,
                t * px_per_second:(t + 1) * px_per_second] = color

    paint(0, tl.pred)
    paint(bar_height + 2, tl.truth)
    cv2.imwrite(str(out_path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))

    def rle_text(labels):
        return " ".join(
            f"{'irr' if lab is ClassLabel.IRRELEVANT else 'rel'}x{n}"
            for lab, n in run_length_encode(labels))

    txt = (f"video {tl.video_id} duration {n}s\n"
           f"pred:  {rle_text(tl.pred)}\n"
           f"truth: {rle_text(tl.truth)}\n")
    out_path.with_suffix(".txt").write_text(txt)


def export_errors(tl: PredictionTimeline, frame_loader, k: int,
                  out_dir) -> list:
    """Write the k highest-confidence misclassified frames plus a JSON index.

    `frame_loader(video_id, t)` returns the RGB frame for a timestamp.
    Fewer than k errors exports all of them. Returns the index entries.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    errors = [
        (t, tl.pred[t], tl.truth[t], tl.confidence[t])
        for t in range(len(tl.pred)) if tl.pred[t] is not tl.truth[t]
    ]
    errors.sort(key=lambda e: -e[3])
    index = []
    for t, pred, truth, conf in errors[:k]:
        name = f"{tl.video_id}_{t:06d}.png"
        img = frame_loader(tl.video_id, t)
        cv2.imwrite(str(out_dir / name), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        index.append({
            "video_id": tl.video_id,
            "t": t,
            "truth": truth.value,
            "pred": pred.value,
            "confidence": conf,
            "image": name,
        })
    with open(out_dir / "errors.json", "w") as f:
        json.dump(index, f, indent=2)
    return index
