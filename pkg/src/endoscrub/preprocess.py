"""Image preprocessing and seeded stochastic augmentation.

Images are float32 RGB rasters, shape (H, W, 3), values in [0, 1] prior to
normalization. The deterministic eval path is center_crop -> resize ->
normalize; the train path inserts `augment` before normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import cv2
import numpy as np

from .errors import TooSmallError, ZeroStdError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [0,1]; float input passes through."""
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32, copy=False)


def center_crop(img: np.ndarray, size: int = 640) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise TooSmallError(f"image {h}x{w} smaller than crop size {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[top:top + size, left:left + size]


def resize(img: np.ndarray, size: int = 224) -> np.ndarray:
    """Bilinear resize to size x size."""
    return cv2.resize(img, (size, size), interpolation=cv2.INTER_LINEAR)


def normalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if np.any(std <= 0):
        raise ZeroStdError(f"std must be positive, got {std}")
    return (to_float(img) - mean) / std


def denormalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return img * std + mean


def eval_preprocess(img: np.ndarray, crop_size: int = 640, out_size: int = 224,
                    mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Deterministic validation/test path. Never augments."""
    return normalize(resize(center_crop(to_float(img), crop_size), out_size),
                     mean, std)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: Tuple[float, float] = (0.08, 1.00)
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.9
    brightness: Tuple[float, float] = (0.8, 1.2)
    contrast: Tuple[float, float] = (0.8, 1.2)
    saturation: Tuple[float, float] = (0.8, 1.2)
    hue: Tuple[float, float] = (-0.1, 0.1)
    blur_kernel: int = 3
    blur_sigma: Tuple[float, float] = (0.1, 2.0)

    def to_json(self) -> dict:
        return {
            "crop_scale": list(self.crop_scale),
            "crop_ratio": list(self.crop_ratio),
            "flip_p": self.flip_p,
            "jitter_p": self.jitter_p,
            "brightness": list(self.brightness),
            "contrast": list(self.contrast),
            "saturation": list(self.saturation),
            "hue": list(self.hue),
            "blur_kernel": self.blur_kernel,
            "blur_sigma": list(self.blur_sigma),
        }

    @classmethod
    def from_json(cls, d: dict) -> "AugmentConfig":
        kw = {}
        for f in ("crop_scale", "crop_ratio", "brightness", "contrast",
                  "saturation", "hue", "blur_sigma"):
            if f in d:
                kw[f] = tuple(d[f])
        for f in ("flip_p", "jitter_p", "blur_kernel"):
            if f in d:
                kw[f] = d[f]
        return cls(**kw)


@dataclass(frozen=True)
class AugmentParams:
    """Fully resolved draws for one augmentation application."""

    scale_draw: float
    ratio_draw: float
    crop_box: Tuple[int, int, int, int]  # top, left, h, w
    flip: bool
    do_jitter: bool
    brightness: float
    contrast: float
    saturation: float
    hue: float
    blur_sigma: float


def sample_augment_params(cfg: AugmentConfig, rng: np.random.Generator,
                          in_hw: Tuple[int, int]) -> AugmentParams:
    h, w = in_hw
    area = h * w
    scale_draw = ratio_draw = None
    box = None
    # up to 10 attempts for a feasible crop window, else the largest
    # centered square
    for _ in range(10):
        s = rng.uniform(*cfg.crop_scale)
        r = rng.uniform(*cfg.crop_ratio)
        if scale_draw is None:
            scale_draw, ratio_draw = s, r
        cw = int(round(np.sqrt(area * s * r)))
        ch = int(round(np.sqrt(area * s / r)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            box = (top, left, ch, cw)
            break
    if box is None:
        side = min(h, w)
        box = ((h - side) // 2, (w - side) // 2, side, side)
    flip = rng.uniform() < cfg.flip_p
    do_jitter = rng.uniform() < cfg.jitter_p
    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.contrast)
    sat = rng.uniform(*cfg.saturation)
    hue = rng.uniform(*cfg.hue)
    lo, hi = cfg.blur_sigma
    sigma = rng.uniform(lo, hi) if hi > 0 else 0.0
    return AugmentParams(scale_draw, ratio_draw, box, flip, do_jitter,
                         b, c, sat, hue, sigma)


def _adjust_brightness(img, f):
    return np.clip(img * f, 0.0, 1.0)


def _adjust_contrast(img, f):
    gray = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    m = float(gray.mean())
    return np.clip(m + (img - m) * f, 0.0, 1.0)


def _adjust_saturation(img, f):
    gray = (img @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[..., None]
    return np.clip(gray + (img - gray) * f, 0.0, 1.0)


def _adjust_hue(img, f):
    # f is a fraction of the full hue circle, in [-0.5, 0.5]
    hsv = cv2.cvtColor(img.astype(np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 0] = (hsv[..., 0] + f * 360.0) % 360.0
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def apply_augment_params(img: np.ndarray, params: AugmentParams,
                         cfg: AugmentConfig, out_size: int = 224) -> np.ndarray:
    img = to_float(img)
    top, left, ch, cw = params.crop_box
    img = resize(img[top:top + ch, left:left + cw], out_size)
    if params.flip:
        img = img[:, ::-1].copy()
    if params.do_jitter:
        img = _adjust_brightness(img, params.brightness)
        img = _adjust_contrast(img, params.contrast)
        img = _adjust_saturation(img, params.saturation)
        img = _adjust_hue(img, params.hue)
    if params.blur_sigma > 0:
        k = cfg.blur_kernel
        img = cv2.GaussianBlur(img, (k, k), params.blur_sigma)
    return np.ascontiguousarray(img, dtype=np.float32)


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
            out_size: int = 224) -> np.ndarray:
    """Seeded stochastic train-path transform: random resized crop,
    horizontal flip, color jitter, Gaussian blur. Output is always
    out_size x out_size x 3, fully determined by the rng stream."""
    params = sample_augment_params(cfg, rng, img.shape[:2])
    return apply_augment_params(img, params, cfg, out_size)
