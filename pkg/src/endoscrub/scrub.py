"""Video scrubbing: per-second classification, run-length segmentization,
edit lists, and removal of irrelevant spans.

Edit granularity is whole seconds: a second is cut when its 1 fps
representative frame is predicted irrelevant, taking all source frames of
that second with it. The `margin_s` knob dilates removals for
privacy-conservative boundaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .dataset import ClassLabel, FrameStore, SegmentAnnotation, VideoRecord
from .errors import (
    EvenWindowError,
    IntervalMismatchError,
    MissingFramesError,
    NegativeMarginError,
    NonContiguousError,
)
from .model import ClassifierModel, forward_numpy
from .preprocess import eval_preprocess


@dataclass(frozen=True)
class FramePrediction:
    timestamp_s: int
    label: ClassLabel
    confidence: float  # softmax probability of the predicted class

    def __post_init__(self):
        # binary argmax decision always has probability >= 0.5
        assert 0.0 <= self.confidence <= 1.0


@dataclass(frozen=True)
class EditList:
    video_id: str
    duration_s: int
    remove: tuple  # ordered disjoint [start, end) second intervals
    keep: tuple
    margin_s: int = 0
    smoothing: str = "none"  # "none" or "median(w)"
    model_hash: str = ""

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "duration_s": self.duration_s,
            "margin_s": self.margin_s,
            "smoothing": self.smoothing,
            "remove": [list(iv) for iv in self.remove],
            "keep": [list(iv) for iv in self.keep],
            "model": self.model_hash,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EditList":
        return cls(
            video_id=d["video_id"],
            duration_s=d["duration_s"],
            remove=tuple(tuple(iv) for iv in d["remove"]),
            keep=tuple(tuple(iv) for iv in d["keep"]),
            margin_s=d.get("margin_s", 0),
            smoothing=d.get("smoothing", "none"),
            model_hash=d.get("model", ""),
        )


def classify_video(model: ClassifierModel, video: VideoRecord, store: FrameStore,
                   crop_size: int = 640, out_size: int = 224,
                   batch_size: int = 64) -> list:
    """One deterministic eval-mode prediction per second of the video."""
    timestamps = list(range(video.duration_s))
    available = set(store.timestamps(video.video_id))
    missing = [t for t in timestamps if t not in available]
    if missing:
        raise MissingFramesError(
            f"{video.video_id}: missing frames at t={missing[:5]}...")
    preds = []
    for i in range(0, len(timestamps), batch_size):
        chunk = timestamps[i:i + batch_size]
        batch = np.stack([
            eval_preprocess(store.get(video.video_id, t), crop_size, out_size)
            for t in chunk
        ])
        logits = forward_numpy(model, batch, train=False)
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        for t, p in zip(chunk, probs):
            cls = int(np.argmax(p))
            label = ClassLabel.IRRELEVANT if cls == 1 else ClassLabel.RELEVANT
            preds.append(FramePrediction(t, label, float(p[cls])))
    return preds


def smooth(preds, window: int) -> list:
    """Per-second majority label over a centered window with edge clamping."""
    if window < 1 or window % 2 == 0:
        raise EvenWindowError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return list(preds)
    half = window // 2
    n = len(preds)
    out = []
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        votes = sum(1 for p in preds[lo:hi]
                    if p.label is ClassLabel.IRRELEVANT)
        label = (ClassLabel.IRRELEVANT if votes * 2 > (hi - lo)
                 else ClassLabel.RELEVANT)
        out.append(FramePrediction(preds[i].timestamp_s, label,
                                   preds[i].confidence))
    return out


def segmentize(preds) -> list:
    """Maximal runs of equal labels as (start_s, end_s, label) triples."""
    for i, p in enumerate(preds):
        if p.timestamp_s != i:
            raise NonContiguousError(
                f"timestamps must be contiguous from 0, got {p.timestamp_s} at {i}")
    segments = []
    for p in preds:
        if segments and segments[-1][2] is p.label:
            segments[-1][1] = p.timestamp_s + 1
        else:
            segments.append([p.timestamp_s, p.timestamp_s + 1, p.label])
    return [(s, e, lab) for s, e, lab in segments]


def predictions_to_segments(video_id, preds) -> list:
    return [SegmentAnnotation(video_id, s, e, lab)
            for s, e, lab in segmentize(preds)]


def make_edit_list(video_id: str, segments, margin_s: int = 0,
                   smoothing: str = "none", model_hash: str = "") -> EditList:
    """Remove = irrelevant segments dilated by margin_s, merged, clipped."""
    if margin_s < 0:
        raise NegativeMarginError(f"margin_s must be >= 0, got {margin_s}")
    duration = max(e for s, e, _ in segments)
    dilated = sorted(
        (max(0, s - margin_s), min(duration, e + margin_s))
        for s, e, lab in segments if lab is ClassLabel.IRRELEVANT
    )
    remove = []
    for s, e in dilated:
        if remove and s <= remove[-1][1]:
            remove[-1][1] = max(remove[-1][1], e)
        else:
            remove.append([s, e])
    keep = []
    cursor = 0
    for s, e in remove:
        if s > cursor:
            keep.append((cursor, s))
        cursor = e
    if cursor < duration:
        keep.append((cursor, duration))
    return EditList(
        video_id=video_id,
        duration_s=duration,
        remove=tuple(tuple(iv) for iv in remove),
        keep=tuple(keep),
        margin_s=margin_s,
        smoothing=smoothing,
        model_hash=model_hash,
    )


def _kept_seconds(edl: EditList) -> list:
    out = []
    for s, e in edl.keep:
        out.extend(range(s, e))
    return out


def apply_edit_list_frames(store: FrameStore, edl: EditList,
                           out_store: FrameStore) -> dict:
    """Scrub a 1 fps frame store: copy kept seconds, renumbered from 0.

    Returns the audit record mapping new -> old timestamps.
    """
    available = set(store.timestamps(edl.video_id))
    kept = _kept_seconds(edl)
    missing = [t for t in kept if t not in available]
    if missing:
        raise IntervalMismatchError(
            f"{edl.video_id}: edit list references missing seconds {missing[:5]}")
    mapping = {}
    for new_t, old_t in enumerate(kept):
        out_store.put(edl.video_id, new_t, store.get(edl.video_id, old_t))
        mapping[new_t] = old_t
    return {
        "video_id": edl.video_id,
        "input_duration_s": edl.duration_s,
        "output_duration_s": len(kept),
        "timestamp_map": mapping,
        "edit_list": edl.to_json(),
    }


def apply_edit_list_video(src_path, edl: EditList, out_path) -> dict:
    """Scrub a source video file by concatenating the keep intervals.

    Kept spans are re-encoded; the audit JSON is the contract of record.
    """
    cap = cv2.VideoCapture(str(src_path))
    if not cap.isOpened():
        raise IOError(f"cannot open {src_path}")
    fps = cap.get(cv2.CAP_PROP_FPS)
    w = int(cap.get(cv2.CAP_PROP_FRAME_WIDTH))
    h = int(cap.get(cv2.CAP_PROP_FRAME_HEIGHT))
    n_frames = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
    writer = cv2.VideoWriter(str(out_path), cv2.VideoWriter_fourcc(*"mp4v"),
                             fps, (w, h))
    kept_frame_count = 0
    frames_per_s = fps
    for s, e in edl.keep:
        first = round(s * frames_per_s)
        last = min(round(e * frames_per_s), n_frames)
        cap.set(cv2.CAP_PROP_POS_FRAMES, first)
        for _ in range(first, last):
            ok, frame = cap.read()
            if not ok:
                break
            writer.write(frame)
            kept_frame_count += 1
    cap.release()
    writer.release()
    audit = {
        "video_id": edl.video_id,
        "input_duration_s": edl.duration_s,
        "output_duration_s": sum(e - s for s, e in edl.keep),
        "output_frames": kept_frame_count,
        "edit_list": edl.to_json(),
    }
    return audit


def apply_edit_list(source, edl: EditList, out, audit_path=None) -> dict:
    """Dispatch on source type: frame-store directory or video file."""
    source = Path(source)
    if source.is_dir():
        # a per-video frame directory: <root>/<video_id>/<t>.png
        if source.name != edl.video_id:
            raise IntervalMismatchError(
                f"frame dir {source.name!r} != edit list video {edl.video_id!r}")
        audit = apply_edit_list_frames(FrameStore(source.parent), edl,
                                       FrameStore(out))
    else:
        audit = apply_edit_list_video(source, edl, out)
    if audit_path is not None:
        Path(audit_path).parent.mkdir(parents=True, exist_ok=True)
        with open(audit_path, "w") as f:
            json.dump(audit, f, indent=2)
    return audit
