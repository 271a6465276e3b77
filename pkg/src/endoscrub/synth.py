"""Seeded synthetic corpus generator.

Stands in for clinical footage: in-body frames are red-dominant, dark and
smoothly textured (with occasional smoke/blur distractors); out-of-body
frames are bright, gray-blue and edge-heavy with text-like rectangles.
Classes are separable by construction so acceptance tests measure pipeline
correctness, not modeling difficulty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .dataset import (
    ClassLabel,
    FrameStore,
    SegmentAnnotation,
    VideoRecord,
    write_annotations,
    write_manifest,
)
from .errors import ConfigError
from .seeds import derive_seed

DISTRACTOR_RATE = 0.10  # fraction of in-body frames given smoke/blur


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 20
    duration_range: tuple = (60, 90)
    irrelevant_ratio: float = 0.073  # target irrelevant:relevant frame ratio
    seed: int = 0
    image_size: tuple = (720, 1280)  # (height, width), pre-crop geometry

    def __post_init__(self):
        if not (0 < self.irrelevant_ratio < 1):
            raise ConfigError("irrelevant_ratio must be in (0, 1)")
        if self.duration_range[0] < 4:
            raise ConfigError("minimum duration is 4 s")
        if self.n_videos < 1:
            raise ConfigError("need at least one video")


def _split_chunks(total: int, k: int, rng: np.random.Generator) -> list:
    """Split `total` seconds into k chunks of >= 2 s each."""
    assert total >= 2 * k
    extra = total - 2 * k
    cuts = sorted(rng.integers(0, extra + 1, size=k - 1).tolist()) if k > 1 else []
    bounds = [0] + cuts + [extra]
    return [2 + b - a for a, b in zip(bounds, bounds[1:])]


def _plan_segments(video_id: str, duration: int, target_frac: float,
                   rng: np.random.Generator) -> list:
    """Tile [0, duration) with 1-6 alternating labeled segments."""
    frac = float(np.clip(rng.normal(target_frac, 0.02), 0.015, 0.45))
    irr_total = int(round(frac * duration))
    if irr_total < 2:
        irr_total = 2 if rng.uniform() < 0.7 else 0
    if irr_total == 0:
        return [SegmentAnnotation(video_id, 0, duration, ClassLabel.RELEVANT)]
    rel_total = duration - irr_total
    k = int(rng.integers(1, min(3, irr_total // 2) + 1))
    # start-irrelevant patterns end relevant (scope insertion); otherwise
    # irrelevant chunks sit between relevant ones. Keep segments <= 6.
    start_irr = k == 3 or rng.uniform() < 0.35
    n_rel = k if start_irr else k + 1
    while n_rel > 1 and rel_total < 2 * n_rel:
        n_rel -= 1
        k = max(1, n_rel - (0 if start_irr else 1))
    irr_lens = _split_chunks(irr_total, k, rng)
    rel_lens = _split_chunks(rel_total, n_rel, rng)
    order = []
    if start_irr:
        for i in range(k):
            order.append((ClassLabel.IRRELEVANT, irr_lens[i]))
            if i < n_rel:
                order.append((ClassLabel.RELEVANT, rel_lens[i]))
    else:
        for i in range(n_rel):
            order.append((ClassLabel.RELEVANT, rel_lens[i]))
            if i < k:
                order.append((ClassLabel.IRRELEVANT, irr_lens[i]))
    segs = []
    t = 0
    for lab, n in order:
        segs.append(SegmentAnnotation(video_id, t, t + n, lab))
        t += n
    assert t == duration and len(segs) <= 6
    return segs


def _vertical_light(h, w) -> np.ndarray:
    """Overhead-light illumination falloff: brighter top, darker bottom.

    A consistent orientation cue across the corpus, so the rotation
    pretext task is solvable; survives crops, flips and color jitter.
    """
    gy = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None, None]
    return 1.25 - 0.5 * gy


def _render_in_body(h, w, rng: np.random.Generator,
                    distractor: bool) -> np.ndarray:
    """Dark, red-dominant, smooth tissue-like frame."""
    base_r = rng.uniform(0.45, 0.65)
    img = np.empty((h, w, 3), dtype=np.float32)
    gy = np.linspace(-1, 1, h)[:, None]
    gx = np.linspace(-1, 1, w)[None, :]
    vignette = 1.0 - 0.35 * (gy ** 2 + gx ** 2)
    img[..., 0] = base_r * vignette
    img[..., 1] = rng.uniform(0.08, 0.18) * vignette
    img[..., 2] = rng.uniform(0.06, 0.16) * vignette
    noise = rng.normal(0, 1, (h // 8, w // 8)).astype(np.float32)
    noise = cv2.resize(noise, (w, h), interpolation=cv2.INTER_LINEAR)
    img[..., 0] += 0.05 * noise
    # a few darker tissue blobs
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        ax = int(rng.integers(w // 10, w // 4))
        ay = int(rng.integers(h // 10, h // 4))
        shade = rng.uniform(0.6, 0.9)
        cv2.ellipse(img, (cx, cy), (ax, ay), float(rng.uniform(0, 180)),
                    0, 360, (float(base_r * shade), 0.05, 0.05), -1)
    img *= _vertical_light(h, w)
    if distractor:
        if rng.uniform() < 0.5:  # smoke: soft bright haze
            mask = np.zeros((h, w), np.float32)
            cv2.circle(mask, (int(rng.integers(0, w)), int(rng.integers(0, h))),
                       int(rng.integers(min(h, w) // 4, min(h, w) // 2)), 1.0, -1)
            mask = cv2.GaussianBlur(mask, (0, 0), min(h, w) / 8)
            img += 0.35 * mask[..., None]
        else:  # motion blur
            ksz = int(rng.integers(7, 15)) | 1
            img = cv2.blur(img, (ksz, 1))
    return np.clip(img, 0, 1)


def _render_out_of_body(h, w, rng: np.random.Generator) -> np.ndarray:
    """Bright gray-blue operating-room-like frame with hard edges and
    text-like rectangles."""
    img = np.empty((h, w, 3), dtype=np.float32)
    img[..., 0] = rng.uniform(0.55, 0.70)
    img[..., 1] = rng.uniform(0.60, 0.75)
    img[..., 2] = rng.uniform(0.70, 0.88)
    # large high-contrast shapes (equipment, walls)
    for _ in range(int(rng.integers(3, 7))):
        x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
        x1 = min(w, x0 + int(rng.integers(w // 8, w // 2)))
        y1 = min(h, y0 + int(rng.integers(h // 8, h // 2)))
        g = rng.uniform(0.2, 1.0)
        tint = rng.uniform(0.9, 1.1)
        cv2.rectangle(img, (x0, y0), (x1, y1),
                      (float(g), float(g), float(min(1.0, g * tint))), -1)
        cv2.rectangle(img, (x0, y0), (x1, y1), (0.1, 0.1, 0.12), 2)
    # text-like rows of small dark rectangles
    for _ in range(int(rng.integers(1, 4))):
        ty = int(rng.integers(0, max(1, h - 12)))
        tx = int(rng.integers(0, w // 2))
        for c in range(int(rng.integers(5, 14))):
            cw = int(rng.integers(4, 10))
            cv2.rectangle(img, (tx, ty), (min(w - 1, tx + cw), ty + 8),
                          (0.05, 0.05, 0.08), -1)
            tx += cw + 3
    noise = rng.normal(0, 0.02, (h, w, 1)).astype(np.float32)
    img = (img + noise) * _vertical_light(h, w)
    return np.clip(img, 0, 1)


def frame_is_distractor(video_id: str, t: int, seed: int) -> bool:
    """Whether an in-body frame at (video, second) carries a smoke/blur
    distractor. The decision is the first draw of the frame's rng stream,
    so it can be checked without rendering."""
    rng = np.random.default_rng(derive_seed(seed, f"frame:{video_id}:{t}"))
    return bool(rng.uniform() < DISTRACTOR_RATE)


def render_frame(video_id: str, t: int, label: ClassLabel, size,
                 seed: int) -> np.ndarray:
    """Deterministic uint8 RGB frame for (video, second)."""
    h, w = size
    rng = np.random.default_rng(derive_seed(seed, f"frame:{video_id}:{t}"))
    if label is ClassLabel.RELEVANT:
        img = _render_in_body(h, w, rng, distractor=rng.uniform() < DISTRACTOR_RATE)
    else:
        img = _render_out_of_body(h, w, rng)
    return (img * 255).round().astype(np.uint8)


def generate_corpus(cfg: SynthConfig, out_dir):
    """Write manifest.json, annotations.csv and a 1 fps frame store.

    Returns (records, segments-by-video, FrameStore). Fully seeded:
    identical config gives a bit-identical corpus.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = FrameStore(out_dir / "frames")
    records = []
    by_video = {}
    target_frac = cfg.irrelevant_ratio / (1 + cfg.irrelevant_ratio)
    for v in range(cfg.n_videos):
        vid = f"video_{v:03d}"
        rng = np.random.default_rng(derive_seed(cfg.seed, f"synth:{vid}"))
        duration = int(rng.integers(cfg.duration_range[0],
                                    cfg.duration_range[1] + 1))
        segs = _plan_segments(vid, duration, target_frac, rng)
        by_video[vid] = segs
        records.append(VideoRecord(
            video_id=vid,
            procedure_type="synthetic",
            duration_s=duration,
            source_fps=30.0,
            frame_dir=str(out_dir / "frames" / vid),
        ))
        for seg in segs:
            for t in range(seg.start_s, seg.end_s):
                store.put(vid, t, render_frame(vid, t, seg.label,
                                               cfg.image_size, cfg.seed))
    write_manifest(records, out_dir / "manifest.json")
    write_annotations(by_video, out_dir / "annotations.csv")
    return records, by_video, store
