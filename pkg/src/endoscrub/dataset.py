"""Corpus ingestion: annotations, per-second frame labels, fold splits,
label subsampling, and dataset statistics.

All randomized operations take an explicit seed and are bit-reproducible.
Splits are case-level: whole videos, never individual frames.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    BoundsError,
    DecodeError,
    EmptyCorpusError,
    FractionError,
    GapError,
    MalformedRowError,
    MissingTimestampError,
    OverlapError,
    RatioError,
)
from .seeds import derive_seed


class ClassLabel(Enum):
    """Binary frame label; the out-of-body irrelevant class is positive."""

    RELEVANT = "relevant"
    IRRELEVANT = "irrelevant"

    @classmethod
    def positive(cls) -> "ClassLabel":
        return cls.IRRELEVANT

    @classmethod
    def from_string(cls, s: str) -> "ClassLabel":
        try:
            return cls(s)
        except ValueError:
            raise MalformedRowError(f"unknown class label: {s!r}") from None


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    procedure_type: str
    duration_s: int
    source_fps: float = 30.0
    frame_dir: str | None = None  # locator for extracted 1 fps frames

    def __post_init__(self):
        if self.duration_s < 1:
            raise BoundsError(f"{self.video_id}: duration must be >= 1 s")


@dataclass(frozen=True)
class SegmentAnnotation:
    video_id: str
    start_s: int
    end_s: int
    label: ClassLabel

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s):
            raise BoundsError(
                f"{self.video_id}: bad segment [{self.start_s},{self.end_s})"
            )


@dataclass(frozen=True)
class FrameSample:
    video_id: str
    timestamp_s: int
    label: ClassLabel | None = None


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    seed: int
    train_ids: frozenset
    val_ids: frozenset
    test_ids: frozenset

    def to_json(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "seed": self.seed,
            "train": sorted(self.train_ids),
            "val": sorted(self.val_ids),
            "test": sorted(self.test_ids),
        }

    @classmethod
    def from_json(cls, d: dict) -> "FoldSplit":
        return cls(
            fold_id=d["fold_id"],
            seed=d["seed"],
            train_ids=frozenset(d["train"]),
            val_ids=frozenset(d["val"]),
            test_ids=frozenset(d["test"]),
        )


@dataclass(frozen=True)
class LabeledSubset:
    fold_id: int
    fraction: float
    seed: int
    frame_refs: tuple  # of (video_id, timestamp_s)


@dataclass
class StatsReport:
    n_relevant_frames: int = 0
    n_irrelevant_frames: int = 0
    n_relevant_segments: int = 0
    n_irrelevant_segments: int = 0
    ratio: float | None = None  # irrelevant:relevant, 4 decimals; None if undefined

    def to_json(self) -> dict:
        return {
            "relevant_frames": self.n_relevant_frames,
            "irrelevant_frames": self.n_irrelevant_frames,
            "relevant_segments": self.n_relevant_segments,
            "irrelevant_segments": self.n_irrelevant_segments,
            "ratio": self.ratio,
        }


class FrameStore:
    """Directory of 1 fps frames: <root>/<video_id>/<t:06d>.png, RGB uint8."""

    def __init__(self, root):
        self.root = Path(root)

    def frame_path(self, video_id: str, t: int) -> Path:
        return self.root / video_id / f"{t:06d}.png"

    def put(self, video_id: str, t: int, img_rgb: np.ndarray) -> None:
        p = self.frame_path(video_id, t)
        p.parent.mkdir(parents=True, exist_ok=True)
        ok = cv2.imwrite(str(p), cv2.cvtColor(img_rgb, cv2.COLOR_RGB2BGR))
        if not ok:
            raise IOError(f"failed to write {p}")

    def get(self, video_id: str, t: int) -> np.ndarray:
        p = self.frame_path(video_id, t)
        img = cv2.imread(str(p), cv2.IMREAD_COLOR)
        if img is None:
            raise MissingTimestampError(f"no frame for {video_id} t={t}")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)

    def timestamps(self, video_id: str) -> list:
        d = self.root / video_id
        if not d.is_dir():
            return []
        return sorted(int(p.stem) for p in d.glob("*.png"))


def load_manifest(path) -> list:
    """Read the corpus manifest JSON into VideoRecords."""
    with open(path) as f:
        entries = json.load(f)
    records = []
    for e in entries:
        records.append(
            VideoRecord(
                video_id=e["video_id"],
                procedure_type=e.get("procedure_type", "unknown"),
                duration_s=int(e["duration_s"]),
                source_fps=float(e.get("source_fps", 30.0)),
                frame_dir=e.get("path"),
            )
        )
    ids = [r.video_id for r in records]
    if len(set(ids)) != len(ids):
        raise MalformedRowError("duplicate video_id in manifest")
    return records


def write_manifest(records, path) -> None:
    entries = [
        {
            "video_id": r.video_id,
            "procedure_type": r.procedure_type,
            "duration_s": r.duration_s,
            "source_fps": r.source_fps,
            "path": r.frame_dir,
        }
        for r in records
    ]
    with open(path, "w") as f:
        json.dump(entries, f, indent=2)


def validate_segments(segments, duration_s: int | None = None) -> None:
    """Check ordering, overlap, gap-free tiling for one video's segments."""
    segs = sorted(segments, key=lambda s: s.start_s)
    if not segs:
        raise GapError("no segments given")
    vid = segs[0].video_id
    if segs[0].start_s != 0:
        raise GapError(f"{vid}: no segment covers second 0")
    for a, b in zip(segs, segs[1:]):
        if b.start_s < a.end_s:
            raise OverlapError(
                f"{vid}: segments [{a.start_s},{a.end_s}) and "
                f"[{b.start_s},{b.end_s}) overlap"
            )
        if b.start_s > a.end_s:
            raise GapError(f"{vid}: gap at second {a.end_s}")
    if duration_s is not None:
        if segs[-1].end_s > duration_s:
            raise BoundsError(
                f"{vid}: segment ends at {segs[-1].end_s} > duration {duration_s}"
            )
        if segs[-1].end_s < duration_s:
            raise GapError(f"{vid}: gap at second {segs[-1].end_s}")


def parse_annotations(path, durations: dict | None = None) -> dict:
    """Parse the annotation CSV into {video_id: [SegmentAnnotation sorted]}.

    `durations` (video_id -> duration_s) enables the bounds and full-tiling
    checks; without it only ordering/overlap/gap-between-segments are checked.
    """
    by_video: dict = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["video_id", "start_s", "end_s", "label"]:
            raise MalformedRowError(f"bad annotation header: {header}")
        for i, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise MalformedRowError(f"line {i}: expected 4 fields, got {len(row)}")
            vid, start, end, label = row
            try:
                seg = SegmentAnnotation(
                    video_id=vid,
                    start_s=int(start),
                    end_s=int(end),
                    label=ClassLabel.from_string(label),
                )
            except ValueError:
                raise MalformedRowError(f"line {i}: non-integer timestamps") from None
            by_video.setdefault(vid, []).append(seg)
    for vid, segs in by_video.items():
        dur = durations.get(vid) if durations else None
        validate_segments(segs, dur)
        by_video[vid] = sorted(segs, key=lambda s: s.start_s)
    return by_video


def write_annotations(by_video: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["video_id", "start_s", "end_s", "label"])
        for vid in sorted(by_video):
            for s in by_video[vid]:
                w.writerow([s.video_id, s.start_s, s.end_s, s.label.value])


def derive_frame_labels(video: VideoRecord, segments) -> list:
    """One labeled FrameSample per integer second of the video."""
    validate_segments(segments, video.duration_s)
    segs = sorted(segments, key=lambda s: s.start_s)
    out = []
    for seg in segs:
        for t in range(seg.start_s, seg.end_s):
            out.append(FrameSample(video.video_id, t, seg.label))
    assert len(out) == video.duration_s
    return out


def extract_frames(source, store: FrameStore, video_id: str, rate: float = 1.0) -> int:
    """Extract frames at `rate` fps into the store; returns the frame count.

    `source` is either a decodable video file or a directory of already
    timestamped PNG frames (copied through unchanged).
    """
    source = Path(source)
    if source.is_dir():
        src = FrameStore(source.parent)
        n = 0
        for t in src.timestamps(source.name):
            store.put(video_id, t, src.get(source.name, t))
            n += 1
        if n == 0:
            raise DecodeError(f"no frames found under {source}")
        return n
    cap = cv2.VideoCapture(str(source))
    if not cap.isOpened():
        raise DecodeError(f"cannot open video {source}")
    fps = cap.get(cv2.CAP_PROP_FPS)
    n_frames = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
    if fps <= 0 or n_frames <= 0:
        cap.release()
        raise DecodeError(f"bad metadata for {source}: fps={fps} frames={n_frames}")
    duration = n_frames / fps
    n_out = int(duration * rate)
    count = 0
    for i in range(n_out):
        t_src = i / rate
        cap.set(cv2.CAP_PROP_POS_FRAMES, round(t_src * fps))
        ok, frame = cap.read()
        if not ok:
            cap.release()
            raise MissingTimestampError(f"{source}: cannot read frame at t={t_src}")
        store.put(video_id, i, cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
        count += 1
    cap.release()
    return count


def split_folds(video_ids, n_folds: int, seed: int,
                ratios=(0.45, 0.20, 0.35)) -> list:
    """Build n_folds independent seeded random case-level splits.

    Train/val sizes are round(ratio * n); the rounding remainder goes to
    test. Each fold draws its own permutation from a seed derived from
    (seed, fold index), so folds are independent re-splits of the corpus.
    """
    ids = sorted(video_ids)
    if not ids:
        raise EmptyCorpusError("no video ids to split")
    if len(ids) < n_folds:
        raise EmptyCorpusError(f"{len(ids)} videos < {n_folds} folds")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise RatioError(f"ratios {ratios} do not sum to 1")
    if any(r < 0 for r in ratios):
        raise RatioError(f"negative ratio in {ratios}")
    n = len(ids)
    n_train = round(ratios[0] * n)
    n_val = round(ratios[1] * n)
    folds = []
    for k in range(n_folds):
        rng = np.random.default_rng(derive_seed(seed, f"fold-split:{k}"))
        perm = rng.permutation(n)
        shuffled = [ids[i] for i in perm]
        folds.append(
            FoldSplit(
                fold_id=k,
                seed=seed,
                train_ids=frozenset(shuffled[:n_train]),
                val_ids=frozenset(shuffled[n_train:n_train + n_val]),
                test_ids=frozenset(shuffled[n_train + n_val:]),
            )
        )
    return folds


def subsample_size(fraction: float, n: int) -> int:
    """floor(fraction * n), computed in exact arithmetic to dodge fp edge
    cases like 0.1 * 3 != 0.3."""
    from fractions import Fraction

    return math.floor(Fraction(fraction).limit_denominator(10**6) * n)


def subsample_labels(fold: FoldSplit, frames, fraction: float, seed: int) -> LabeledSubset:
    """Uniform sample without replacement of floor(fraction * N) training
    frames. No stratification."""
    if not (0 < fraction <= 1):
        raise FractionError(f"fraction {fraction} outside (0, 1]")
    train_frames = [f for f in frames if f.video_id in fold.train_ids]
    n = len(train_frames)
    k = subsample_size(fraction, n)
    rng = np.random.default_rng(derive_seed(seed, f"label-subsample:{fold.fold_id}"))
    idx = rng.choice(n, size=k, replace=False) if k < n else np.arange(n)
    refs = tuple((train_frames[i].video_id, train_frames[i].timestamp_s)
                 for i in sorted(idx.tolist()))
    return LabeledSubset(fold_id=fold.fold_id, fraction=fraction, seed=seed,
                         frame_refs=refs)


def dataset_stats(frames, segments) -> StatsReport:
    rep = StatsReport()
    for f in frames:
        if f.label is ClassLabel.RELEVANT:
            rep.n_relevant_frames += 1
        elif f.label is ClassLabel.IRRELEVANT:
            rep.n_irrelevant_frames += 1
    for s in segments:
        if s.label is ClassLabel.RELEVANT:
            rep.n_relevant_segments += 1
        else:
            rep.n_irrelevant_segments += 1
    if rep.n_relevant_frames > 0:
        rep.ratio = round(rep.n_irrelevant_frames / rep.n_relevant_frames, 4)
    return rep
