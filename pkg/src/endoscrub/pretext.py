"""Rotation auxiliary task: exact 90-degree rotations, pseudo-labels, and
the 4-way rotation classification loss.

Only the rotation task is implemented; `PRETEXT_TASKS` is the pluggable
registry other auxiliary tasks would hook into.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch

from .errors import EmptyBatchError, NonSquareError, ShapeMismatchError

ROTATION_ANGLES = (0, 90, 180, 270)
N_ROTATION_CLASSES = 4


def angle_to_class(angle: int) -> int:
    if angle not in ROTATION_ANGLES:
        raise ValueError(f"angle must be one of {ROTATION_ANGLES}, got {angle}")
    return angle // 90


def class_to_angle(idx: int) -> int:
    if idx not in (0, 1, 2, 3):
        raise ValueError(f"rotation class must be 0..3, got {idx}")
    return idx * 90


def rotate(img: np.ndarray, angle: int) -> np.ndarray:
    """Lossless counterclockwise rotation by a multiple of 90 degrees.

    A pure pixel permutation: no interpolation, square input required.
    """
    if img.shape[0] != img.shape[1]:
        raise NonSquareError(f"rotation requires a square image, got {img.shape}")
    k = angle_to_class(angle)
    return np.ascontiguousarray(np.rot90(img, k=k, axes=(0, 1)))


@dataclass(frozen=True)
class RotationBatch:
    images: List[np.ndarray]
    labels: List[int]

    def __post_init__(self):
        assert len(self.images) == len(self.labels)


def make_rotation_batch(imgs: Sequence[np.ndarray], mode: str = "all_four",
                        rng: np.random.Generator | None = None) -> RotationBatch:
    """Expand source images into a rotation-pseudo-labeled batch.

    all_four: each source appears under all four angles (batch = 4x sources).
    random_one: each source appears once under a uniformly drawn angle.
    """
    if len(imgs) == 0:
        raise EmptyBatchError("no images to rotate")
    images, labels = [], []
    if mode == "all_four":
        for img in imgs:
            for cls in range(N_ROTATION_CLASSES):
                images.append(rotate(img, cls * 90))
                labels.append(cls)
    elif mode == "random_one":
        if rng is None:
            raise ValueError("random_one mode requires an rng")
        for img in imgs:
            cls = int(rng.integers(0, N_ROTATION_CLASSES))
            images.append(rotate(img, cls * 90))
            labels.append(cls)
    else:
        raise ValueError(f"unknown expansion mode: {mode}")
    return RotationBatch(images=images, labels=labels)


def rotation_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of the 4-way rotation prediction."""
    if logits.ndim != 2 or logits.shape[1] != N_ROTATION_CLASSES:
        raise ShapeMismatchError(f"expected Bx4 logits, got {tuple(logits.shape)}")
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatchError(
            f"{logits.shape[0]} logits vs {labels.shape[0]} labels")
    return torch.nn.functional.cross_entropy(logits, labels)
