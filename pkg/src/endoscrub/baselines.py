"""Handcrafted visual descriptors (Color, HOG, Texture, Blob, Fusion) and
an MLP-2 classifier trained on them with the same schedule and weighted
loss as the deep models.

Descriptors are deterministic and extracted from the un-augmented eval
path image ([0,1] floats, before normalization).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from scipy.ndimage import gaussian_filter, maximum_filter
from skimage.feature import hog as skimage_hog

from .dataset import FrameStore
from .errors import EmptyDatasetError
from .model import BackboneConfig, ClassifierModel, Mlp2Head
from .preprocess import center_crop, resize, to_float
from .seeds import derive_seed
from .train import LABEL_INDEX, FinetuneConfig, TrainLog, lr_schedule, weighted_ce

logger = logging.getLogger(__name__)

COLOR_BINS = 32
COLOR_DIM = 3 * COLOR_BINS

HOG_ORIENTATIONS = 9
HOG_CELL = 8
HOG_BLOCK = 2

LBP_BINS = 59

BLOB_SIGMAS = (2.0, 2.83, 4.0, 5.66, 8.0)
BLOB_THRESHOLD = 0.01
BLOB_DIM = 11
BLOB_HIST_BINS = 8
BLOB_HIST_MAX = 0.5

FEATURE_KINDS = ("color", "hog", "texture", "blob", "fusion")


def color_feature(img: np.ndarray) -> np.ndarray:
    """Concatenated per-channel HSV histograms, 32 bins each, L1-normalized."""
    hsv = cv2.cvtColor(to_float(img), cv2.COLOR_RGB2HSV)
    ranges = [(0.0, 360.0), (0.0, 1.0), (0.0, 1.0)]
    parts = []
    for c, (lo, hi) in enumerate(ranges):
        hist, _ = np.histogram(hsv[..., c], bins=COLOR_BINS, range=(lo, hi))
        parts.append(hist / max(1, hist.sum()))
    return np.concatenate(parts).astype(np.float64)


def _to_gray(img: np.ndarray) -> np.ndarray:
    return to_float(img) @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


def hog_feature(img: np.ndarray) -> np.ndarray:
    """Histogram of oriented gradients: 9 orientations, 8x8 cells, 2x2-cell
    blocks with L2 normalization."""
    return skimage_hog(
        _to_gray(img),
        orientations=HOG_ORIENTATIONS,
        pixels_per_cell=(HOG_CELL, HOG_CELL),
        cells_per_block=(HOG_BLOCK, HOG_BLOCK),
        block_norm="L2",
        feature_vector=True,
    ).astype(np.float64)


def hog_dim(size: int) -> int:
    cells = size // HOG_CELL
    blocks = cells - HOG_BLOCK + 1
    return blocks * blocks * HOG_BLOCK * HOG_BLOCK * HOG_ORIENTATIONS


# 8 neighbors of radius 1, counterclockwise from East
_LBP_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1),
                (0, -1), (1, -1), (1, 0), (1, 1))


def _lbp_lookup() -> np.ndarray:
    """Map each 8-bit pattern to a bin: uniform patterns (<= 2 circular
    0/1 transitions) get bins 0..57 in value order, the rest share bin 58."""
    table = np.full(256, LBP_BINS - 1, dtype=np.int64)
    nxt = 0
    for p in range(256):
        bits = [(p >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if transitions <= 2:
            table[p] = nxt
            nxt += 1
    assert nxt == 58
    return table


_LBP_TABLE = _lbp_lookup()


def lbp_codes(gray: np.ndarray) -> np.ndarray:
    """Raw 8-bit LBP pattern per interior pixel (neighbor > center, so flat
    regions give the all-zeros pattern)."""
    c = gray[1:-1, 1:-1]
    codes = np.zeros(c.shape, dtype=np.int64)
    for bit, (dy, dx) in enumerate(_LBP_OFFSETS):
        nb = gray[1 + dy:gray.shape[0] - 1 + dy, 1 + dx:gray.shape[1] - 1 + dx]
        codes |= (nb > c).astype(np.int64) << bit
    return codes


def texture_feature(img: np.ndarray) -> np.ndarray:
    """Uniform LBP histogram, radius 1, 8 neighbors, 59 bins, L1-normalized."""
    codes = lbp_codes(_to_gray(img))
    bins = _LBP_TABLE[codes]
    hist = np.bincount(bins.ravel(), minlength=LBP_BINS).astype(np.float64)
    return hist / max(1, hist.sum())


def detect_blobs(gray: np.ndarray):
    """Difference-of-Gaussian bright-blob detection across 5 scales.

    Returns (scales, responses) of local maxima above threshold.
    """
    smoothed = [gaussian_filter(gray.astype(np.float64), s)
                for s in BLOB_SIGMAS + (BLOB_SIGMAS[-1] * np.sqrt(2),)]
    dog = np.stack([smoothed[i] - smoothed[i + 1]
                    for i in range(len(BLOB_SIGMAS))])
    local_max = maximum_filter(dog, size=3, mode="nearest") == dog
    mask = local_max & (dog > BLOB_THRESHOLD)
    idx = np.argwhere(mask)
    scales = np.array([BLOB_SIGMAS[i] for i, _, _ in idx])
    responses = dog[mask]
    return scales, responses


def blob_feature(img: np.ndarray) -> np.ndarray:
    """[count/255 (capped), mean scale, mean |response|, 8-bin |response|
    histogram]; an empty detection puts all histogram mass in bin 0."""
    scales, responses = detect_blobs(_to_gray(img))
    out = np.zeros(BLOB_DIM, dtype=np.float64)
    n = len(scales)
    if n == 0:
        out[3] = 1.0
        return out
    out[0] = min(n, 255) / 255.0
    out[1] = float(scales.mean())
    out[2] = float(np.abs(responses).mean())
    hist, _ = np.histogram(np.abs(responses), bins=BLOB_HIST_BINS,
                           range=(0.0, BLOB_HIST_MAX))
    out[3:] = hist / n
    return out


def fusion_feature(img: np.ndarray) -> np.ndarray:
    """Color || HOG || Texture || Blob, in that fixed order."""
    return np.concatenate([
        color_feature(img),
        hog_feature(img),
        texture_feature(img),
        blob_feature(img),
    ])


_EXTRACTORS = {
    "color": color_feature,
    "hog": hog_feature,
    "texture": texture_feature,
    "blob": blob_feature,
    "fusion": fusion_feature,
}


def extract_feature(kind: str, img: np.ndarray) -> np.ndarray:
    return _EXTRACTORS[kind](img)


def feature_dim(kind: str, size: int = 224) -> int:
    return {
        "color": COLOR_DIM,
        "hog": hog_dim(size),
        "texture": LBP_BINS,
        "blob": BLOB_DIM,
        "fusion": COLOR_DIM + hog_dim(size) + LBP_BINS + BLOB_DIM,
    }[kind]


class FeatureCache:
    """Binary feature file (little-endian float64 vectors) + JSON sidecar
    index keyed by (video_id, timestamp_s, kind)."""

    @staticmethod
    def write(path, kind: str, entries) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        index = []
        dim = None
        with open(path, "wb") as f:
            for (vid, t), vec in entries:
                vec = np.asarray(vec, dtype="<f8")
                if dim is None:
                    dim = len(vec)
                assert len(vec) == dim
                index.append({"video_id": vid, "timestamp_s": t})
                f.write(vec.tobytes())
        sidecar = {"kind": kind, "dim": dim, "dtype": "<f8", "records": index}
        with open(path.with_suffix(path.suffix + ".json"), "w") as f:
            json.dump(sidecar, f)

    @staticmethod
    def read(path):
        path = Path(path)
        with open(path.with_suffix(path.suffix + ".json")) as f:
            sidecar = json.load(f)
        data = np.fromfile(path, dtype="<f8").reshape(-1, sidecar["dim"])
        out = {}
        for i, rec in enumerate(sidecar["records"]):
            out[(rec["video_id"], rec["timestamp_s"])] = data[i]
        return sidecar["kind"], out


def eval_path_image(store: FrameStore, video_id: str, t: int,
                    crop_size: int = 640, out_size: int = 224) -> np.ndarray:
    """Deterministic [0,1] image the descriptors run on (no normalization)."""
    return resize(to_float(center_crop(store.get(video_id, t), crop_size)),
                  out_size)


def train_feature_classifier(kind: str, train_samples, val_samples,
                             store: FrameStore, cfg: FinetuneConfig, seed: int,
                             crop_size: int = 640, out_size: int = 224):
    """Train the MLP-2 head on precomputed descriptors with the shared
    schedule and class-weighted loss. Returns (model, TrainLog)."""
    if kind not in _EXTRACTORS:
        raise ValueError(f"unknown feature kind: {kind}")
    if not train_samples:
        raise EmptyDatasetError("no labeled training samples")
    if not val_samples:
        raise EmptyDatasetError("no validation samples")
    t0 = time.time()

    def feats(samples):
        x = np.stack([
            extract_feature(kind, eval_path_image(store, s.video_id,
                                                  s.timestamp_s,
                                                  crop_size, out_size))
            for s in samples
        ])
        y = np.array([LABEL_INDEX[s.label] for s in samples])
        return (torch.as_tensor(x, dtype=torch.float32),
                torch.as_tensor(y, dtype=torch.long))

    x_train, y_train = feats(train_samples)
    x_val, y_val = feats(val_samples)
    # standardize features so Adam's fixed lr behaves across descriptors;
    # zero-variance features keep unit scale so unseen val/test variation
    # in them stays bounded instead of exploding
    mu = x_train.mean(0, keepdim=True)
    sd = x_train.std(0, keepdim=True)
    sd = torch.where(sd < 1e-6, torch.ones_like(sd), sd)
    x_train = (x_train - mu) / sd
    x_val = (x_val - mu) / sd

    dim = x_train.shape[1]
    torch.manual_seed(derive_seed(seed, f"baseline-{kind}"))
    bcfg = BackboneConfig(kind="feature-passthrough", feature_dim=dim,
                          input_size=out_size)
    model = ClassifierModel(bcfg, torch.nn.Identity(), Mlp2Head(dim, 2), 2)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
    log = TrainLog()
    best_loss, best_state = float("inf"), None
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.epochs, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        rng = np.random.default_rng(derive_seed(seed, f"baseline-shuffle:{epoch}"))
        order = rng.permutation(len(x_train))
        epoch_loss, n_batches = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[i:i + cfg.batch_size])
            loss = weighted_ce(model(x_train[idx]), y_train[idx],
                               cfg.class_weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        model.eval()
        with torch.no_grad():
            val_loss = float(torch.nn.functional.cross_entropy(
                model(x_val), y_val))
        log.append(epoch, epoch_loss / max(1, n_batches), val_loss, lr)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            log.selected_epoch = epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    log.wall_time_s = time.time() - t0
    model.eval()
    # keep the standardization with the model so inference matches training
    model.feature_mean = mu
    model.feature_std = sd
    return model, log


def predict_features(model, kind: str, samples, store: FrameStore,
                     crop_size: int = 640, out_size: int = 224) -> np.ndarray:
    """Eval-mode class predictions (indices) for labeled/unlabeled samples."""
    x = np.stack([
        extract_feature(kind, eval_path_image(store, s.video_id,
                                              s.timestamp_s,
                                              crop_size, out_size))
        for s in samples
    ])
    xt = torch.as_tensor(x, dtype=torch.float32)
    if hasattr(model, "feature_mean"):
        xt = (xt - model.feature_mean) / model.feature_std
    model.eval()
    with torch.no_grad():
        return model(xt).argmax(1).numpy()
