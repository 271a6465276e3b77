"""Pretraining and fine-tuning loops.

Pretraining: Adam at a fixed learning rate on the rotation task over the
fold's unlabeled training frames. Fine-tuning / supervised training: the
whole network, class-weighted cross-entropy, and a step learning-rate
schedule decaying x0.1 after 25/50/75% of the epochs.

Validation loss for model selection is always the unweighted mean CE, so
selection stays comparable across weighting configs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import ClassLabel, FrameStore
from .errors import EmptyDatasetError, ShapeMismatchError
from .model import (
    BackboneConfig,
    CheckpointMeta,
    ClassifierModel,
    build_model,
    swap_head,
)
from .preprocess import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    AugmentConfig,
    augment,
    center_crop,
    normalize,
    resize,
    to_float,
)
from .pretext import make_rotation_batch, rotation_loss
from .seeds import derive_seed

logger = logging.getLogger(__name__)

LABEL_INDEX = {ClassLabel.RELEVANT: 0, ClassLabel.IRRELEVANT: 1}
INDEX_LABEL = {v: k for k, v in LABEL_INDEX.items()}


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 80   # rotated instances per step
    epochs: int = 150
    lr: float = 0.001      # fixed across epochs
    expansion: str = "all_four"  # or "random_one"


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 100
    epochs: int = 40
    base_lr: float = 0.001
    milestone_fracs: tuple = (0.25, 0.50, 0.75)
    decay_factor: float = 0.1
    min_lr: float = 1e-6
    class_weights: tuple = (0.15, 0.85)  # (relevant, irrelevant)
    warmup_epochs: int = 0


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)
    selected_epoch: int = -1
    wall_time_s: float = 0.0

    def append(self, epoch, train_loss, val_loss, lr):
        self.epochs.append((epoch, train_loss, val_loss, lr))

    def best_val_loss(self) -> float:
        return min(e[2] for e in self.epochs) if self.epochs else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            w.writerows(self.epochs)

    def write_summary(self, path):
        with open(path, "w") as f:
            json.dump({
                "selected_epoch": self.selected_epoch,
                "best_val_loss": self.best_val_loss(),
                "n_epochs": len(self.epochs),
                "wall_time_s": self.wall_time_s,
            }, f, indent=2)


def lr_schedule(epoch: int, total: int, cfg: FinetuneConfig) -> float:
    """Step decay: lr = base * decay^k after each milestone, clamped at
    min_lr. A milestone counts as passed when epoch >= ceil(frac * total).
    Optional linear warm-up over cfg.warmup_epochs (default off)."""
    if not (0 <= epoch < total):
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    k = sum(1 for f in cfg.milestone_fracs if epoch >= math.ceil(f * total))
    return max(cfg.base_lr * cfg.decay_factor ** k, cfg.min_lr)


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor,
                weights=(0.15, 0.85)) -> torch.Tensor:
    """Weighted mean cross-entropy: sum(w_y * CE) / sum(w_y)."""
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatchError(
            f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if any(w <= 0 for w in weights):
        raise ValueError("class weights must be positive")
    w = torch.as_tensor(weights, dtype=logits.dtype)
    per = torch.nn.functional.cross_entropy(logits, labels, reduction="none")
    wy = w[labels]
    return (wy * per).sum() / wy.sum()


class FrameDataSource:
    """Loads frames, caching the center crop, and produces train/eval batches.

    The train path is augment -> (rotate) -> normalize over the cached
    640-geometry crop; the eval path is center_crop -> resize -> normalize.
    """

    def __init__(self, store: FrameStore, crop_size: int = 640,
                 out_size: int = 224, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.store = store
        self.crop_size = crop_size
        self.out_size = out_size
        self.mean = mean
        self.std = std
        self._crop_cache: dict = {}

    def crop(self, video_id: str, t: int) -> np.ndarray:
        key = (video_id, t)
        if key not in self._crop_cache:
            self._crop_cache[key] = center_crop(self.store.get(video_id, t),
                                                self.crop_size)
        return self._crop_cache[key]

    def eval_image(self, video_id: str, t: int) -> np.ndarray:
        img = resize(to_float(self.crop(video_id, t)), self.out_size)
        return normalize(img, self.mean, self.std)

    def eval_batch(self, refs) -> np.ndarray:
        return np.stack([self.eval_image(v, t) for v, t in refs])

    def augmented(self, video_id: str, t: int, aug_cfg: AugmentConfig,
                  rng: np.random.Generator) -> np.ndarray:
        """Augmented image before normalization (values in [0, 1])."""
        return augment(to_float(self.crop(video_id, t)), aug_cfg, rng,
                       self.out_size)

    def normalize_batch(self, imgs) -> np.ndarray:
        return np.stack([normalize(im, self.mean, self.std) for im in imgs])


def _to_torch(batch_nhwc: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch_nhwc)).permute(0, 3, 1, 2)


def _eval_rotation(model, source, refs, batch: int = 128):
    """Mean rotation loss and accuracy on the deterministic eval path,
    all four rotations per frame."""
    model.eval()
    losses, correct, total = [], 0, 0
    with torch.no_grad():
        for i in range(0, len(refs), batch // 4):
            chunk = refs[i:i + batch // 4]
            imgs = [source.eval_image(v, t) for v, t in chunk]
            rb = make_rotation_batch(imgs, mode="all_four")
            x = _to_torch(np.stack(rb.images))
            y = torch.as_tensor(rb.labels)
            logits = model(x)
            losses.append(float(rotation_loss(logits, y)) * len(y))
            correct += int((logits.argmax(1) == y).sum())
            total += len(y)
    return sum(losses) / total, correct / total


def _eval_classification(model, source, samples, batch: int = 128):
    """Unweighted mean CE and predictions on labeled samples."""
    model.eval()
    loss_sum, total = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i:i + batch]
            x = _to_torch(source.eval_batch([(s.video_id, s.timestamp_s)
                                             for s in chunk]))
            y = torch.as_tensor([LABEL_INDEX[s.label] for s in chunk])
            per = torch.nn.functional.cross_entropy(model(x), y,
                                                    reduction="sum")
            loss_sum += float(per)
            total += len(chunk)
    return loss_sum / total


def pretrain(backbone_cfg: BackboneConfig, train_frames, store: FrameStore,
             cfg: PretrainConfig, seed: int, val_frames=None,
             aug_cfg: AugmentConfig = AugmentConfig(),
             crop_size: int = 640, out_size: int = 224,
             log: TrainLog | None = None):
    """Rotation pretext training over unlabeled frames.

    Returns (model with 4-way head, TrainLog). The best-validation-loss
    epoch's weights are kept when validation frames are given, else the
    final epoch's.
    """
    if not train_frames:
        raise EmptyDatasetError("no unlabeled frames for pretraining")
    log = log if log is not None else TrainLog()
    t0 = time.time()
    torch.manual_seed(derive_seed(seed, "pretrain-torch"))
    model = build_model(backbone_cfg, n_out=4,
                        seed=derive_seed(seed, "pretrain-init"))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    source = FrameDataSource(store, crop_size, out_size)
    refs = [(f.video_id, f.timestamp_s) for f in train_frames]
    val_refs = [(f.video_id, f.timestamp_s) for f in (val_frames or [])]
    n_sources = max(1, cfg.batch_size // 4 if cfg.expansion == "all_four"
                    else cfg.batch_size)
    best_loss, best_state = float("inf"), None
    for epoch in range(cfg.epochs):
        model.train()
        shuffle_rng = np.random.default_rng(
            derive_seed(seed, f"pretrain-shuffle:{epoch}"))
        aug_rng = np.random.default_rng(
            derive_seed(seed, f"pretrain-augment:{epoch}"))
        order = shuffle_rng.permutation(len(refs))
        epoch_loss, n_batches = 0.0, 0
        for i in range(0, len(order), n_sources):
            batch_refs = [refs[j] for j in order[i:i + n_sources]]
            imgs = [source.augmented(v, t, aug_cfg, aug_rng)
                    for v, t in batch_refs]
            rb = make_rotation_batch(imgs, mode=cfg.expansion, rng=aug_rng)
            x = _to_torch(source.normalize_batch(rb.images))
            y = torch.as_tensor(rb.labels)
            loss = rotation_loss(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        train_loss = epoch_loss / max(1, n_batches)
        if val_refs:
            val_loss, val_acc = _eval_rotation(model, source, val_refs)
        else:
            val_loss, val_acc = train_loss, float("nan")
        log.append(epoch, train_loss, val_loss, cfg.lr)
        logger.info("pretrain epoch %d: train %.4f val %.4f acc %.3f",
                    epoch, train_loss, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            log.selected_epoch = epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    log.wall_time_s = time.time() - t0
    model.eval()
    return model, log


def _train_classifier(model: ClassifierModel, train_samples, val_samples,
                      cfg: FinetuneConfig, seed: int, source: FrameDataSource,
                      aug_cfg: AugmentConfig, log: TrainLog):
    """Shared supervised loop: weighted CE, step lr schedule, best-val
    selection. Trains every parameter of `model` in place."""
    if not train_samples:
        raise EmptyDatasetError("no labeled training samples")
    if not val_samples:
        raise EmptyDatasetError("no validation samples")
    t0 = time.time()
    torch.manual_seed(derive_seed(seed, "train-torch"))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
    best_loss, best_state = float("inf"), None
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.epochs, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        shuffle_rng = np.random.default_rng(
            derive_seed(seed, f"train-shuffle:{epoch}"))
        aug_rng = np.random.default_rng(
            derive_seed(seed, f"train-augment:{epoch}"))
        order = shuffle_rng.permutation(len(train_samples))
        epoch_loss, n_batches = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train_samples[j] for j in order[i:i + cfg.batch_size]]
            imgs = [source.augmented(s.video_id, s.timestamp_s, aug_cfg,
                                     aug_rng) for s in chunk]
            x = _to_torch(source.normalize_batch(imgs))
            y = torch.as_tensor([LABEL_INDEX[s.label] for s in chunk])
            loss = weighted_ce(model(x), y, cfg.class_weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        train_loss = epoch_loss / max(1, n_batches)
        val_loss = _eval_classification(model, source, val_samples)
        log.append(epoch, train_loss, val_loss, lr)
        logger.info("epoch %d: lr %.1e train %.4f val %.4f",
                    epoch, lr, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            log.selected_epoch = epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    log.wall_time_s = time.time() - t0
    model.eval()
    return model


def finetune(pretext_model: ClassifierModel, train_samples, val_samples,
             store: FrameStore, cfg: FinetuneConfig, seed: int,
             aug_cfg: AugmentConfig = AugmentConfig(),
             crop_size: int = 640, out_size: int = 224):
    """Swap the pretext head for a binary one and fine-tune the whole net."""
    model = swap_head(pretext_model, n_out=2,
                      seed=derive_seed(seed, "finetune-head"))
    source = FrameDataSource(store, crop_size, out_size)
    log = TrainLog()
    model = _train_classifier(model, list(train_samples), list(val_samples),
                              cfg, seed, source, aug_cfg, log)
    return model, log


def train_supervised(backbone_cfg: BackboneConfig, train_samples, val_samples,
                     store: FrameStore, cfg: FinetuneConfig, seed: int,
                     init: str = "random", weights_path=None,
                     aug_cfg: AugmentConfig = AugmentConfig(),
                     crop_size: int = 640, out_size: int = 224):
    """Fully supervised baseline: same loop as finetune, from scratch or
    from an external backbone weights file."""
    model = build_model(backbone_cfg, n_out=2, init=init,
                        seed=derive_seed(seed, "supervised-init"),
                        weights_path=weights_path)
    source = FrameDataSource(store, crop_size, out_size)
    log = TrainLog()
    model = _train_classifier(model, list(train_samples), list(val_samples),
                              cfg, seed, source, aug_cfg, log)
    return model, log


def checkpoint_meta(phase: str, seed: int, log: TrainLog,
                    config_hash: str = "") -> CheckpointMeta:
    return CheckpointMeta(phase=phase, seed=seed,
                          epoch=log.selected_epoch,
                          val_loss=log.best_val_loss(),
                          config_hash=config_hash)
