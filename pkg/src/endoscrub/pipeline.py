"""Glue between the config and the individual stages: corpus loading,
fold files, training runs, evaluation, and scrubbing, with run-directory
provenance (config hash, seed, input hashes).
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from . import train as tr
from .baselines import predict_features, train_feature_classifier
from .config import ExperimentConfig
from .dataset import ClassLabel, FoldSplit, FrameStore
from .errors import DataValidationError
from .evaluation import (
    PredictionTimeline,
    confusion,
    export_errors,
    metrics_report,
    render_timeline,
)
from .model import load_checkpoint, save_checkpoint
from .scrub import classify_video, make_edit_list, segmentize, smooth
from .seeds import derive_seed

logger = logging.getLogger(__name__)


def set_deterministic() -> None:
    """Single-threaded fully deterministic torch execution."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


class Corpus:
    """A corpus directory: manifest.json, annotations.csv, frames/."""

    def __init__(self, root):
        self.root = Path(root)
        self.records = ds.load_manifest(self.root / "manifest.json")
        durations = {r.video_id: r.duration_s for r in self.records}
        self.segments = ds.parse_annotations(self.root / "annotations.csv",
                                             durations)
        missing = set(durations) - set(self.segments)
        if missing:
            raise DataValidationError(
                f"videos without annotations: {sorted(missing)[:5]}")
        self.store = FrameStore(self.root / "frames")
        self.record_by_id = {r.video_id: r for r in self.records}

    def frames(self) -> list:
        """All labeled per-second frame samples of the corpus."""
        out = []
        for r in self.records:
            out.extend(ds.derive_frame_labels(r, self.segments[r.video_id]))
        return out

    def input_hash(self) -> str:
        h = hashlib.sha256()
        for name in ("manifest.json", "annotations.csv"):
            h.update((self.root / name).read_bytes())
        return h.hexdigest()[:16]


def frames_in(frames, video_ids) -> list:
    return [f for f in frames if f.video_id in video_ids]


def write_folds(cfg: ExperimentConfig, corpus: Corpus, out_dir) -> list:
    folds = ds.split_folds({r.video_id for r in corpus.records},
                           cfg.folds.n_folds, cfg.seed, cfg.folds.ratios)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fold in folds:
        with open(out_dir / f"fold_{fold.fold_id}.json", "w") as f:
            json.dump(fold.to_json(), f, indent=2, sort_keys=True)
    return folds


def load_fold(path) -> FoldSplit:
    with open(path) as f:
        return FoldSplit.from_json(json.load(f))


def _run_dir(cfg: ExperimentConfig, name: str) -> Path:
    d = Path(cfg.run_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_provenance(cfg: ExperimentConfig, corpus: Corpus, run_dir: Path,
                      extra: dict | None = None) -> None:
    prov = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "input_hash": corpus.input_hash(),
    }
    prov.update(extra or {})
    with open(run_dir / "provenance.json", "w") as f:
        json.dump(prov, f, indent=2, sort_keys=True)


def run_pretrain(cfg: ExperimentConfig, corpus: Corpus, fold: FoldSplit,
                 run_name: str | None = None):
    """Rotation pretraining on the fold's training frames (labels unused)."""
    if cfg.deterministic:
        set_deterministic()
    frames = corpus.frames()
    train_frames = frames_in(frames, fold.train_ids)
    val_frames = frames_in(frames, fold.val_ids)
    model, log = tr.pretrain(
        cfg.backbone, train_frames, corpus.store, cfg.pretrain,
        seed=derive_seed(cfg.seed, f"pretrain:{fold.fold_id}"),
        val_frames=val_frames, aug_cfg=cfg.augment,
        crop_size=cfg.preprocess.crop_size, out_size=cfg.preprocess.out_size)
    run_dir = _run_dir(cfg, run_name or f"pretrain_fold{fold.fold_id}")
    meta = tr.checkpoint_meta("pretext", cfg.seed, log, cfg.config_hash())
    save_checkpoint(model, meta, run_dir / "checkpoint.ckpt")
    log.write_csv(run_dir / "trainlog.csv")
    log.write_summary(run_dir / "summary.json")
    _write_provenance(cfg, corpus, run_dir, {"fold": fold.fold_id})
    return model, log, run_dir


def _labeled_train_samples(cfg, corpus, fold, fraction):
    frames = corpus.frames()
    subset = ds.subsample_labels(fold, frames, fraction,
                                 derive_seed(cfg.seed, "labels"))
    by_ref = {(f.video_id, f.timestamp_s): f for f in frames}
    train_samples = [by_ref[r] for r in subset.frame_refs]
    val_samples = frames_in(frames, fold.val_ids)
    test_samples = frames_in(frames, fold.test_ids)
    return train_samples, val_samples, test_samples


def run_finetune(cfg: ExperimentConfig, corpus: Corpus, fold: FoldSplit,
                 fraction: float, pretext_model=None, pretext_ckpt=None,
                 run_name: str | None = None, seed: int | None = None):
    """Fine-tune a pretext model at the given label fraction."""
    if cfg.deterministic:
        set_deterministic()
    if pretext_model is None:
        pretext_model, _ = load_checkpoint(pretext_ckpt)
    train_samples, val_samples, _ = _labeled_train_samples(
        cfg, corpus, fold, fraction)
    seed = seed if seed is not None else derive_seed(
        cfg.seed, f"finetune:{fold.fold_id}:{fraction}")
    model, log = tr.finetune(
        pretext_model, train_samples, val_samples, corpus.store,
        cfg.finetune, seed, aug_cfg=cfg.augment,
        crop_size=cfg.preprocess.crop_size, out_size=cfg.preprocess.out_size)
    run_dir = _run_dir(cfg, run_name
                       or f"finetune_fold{fold.fold_id}_frac{fraction}")
    meta = tr.checkpoint_meta("finetune", seed, log, cfg.config_hash())
    save_checkpoint(model, meta, run_dir / "checkpoint.ckpt")
    log.write_csv(run_dir / "trainlog.csv")
    log.write_summary(run_dir / "summary.json")
    _write_provenance(cfg, corpus, run_dir,
                      {"fold": fold.fold_id, "fraction": fraction})
    return model, log, run_dir


def run_supervised(cfg: ExperimentConfig, corpus: Corpus, fold: FoldSplit,
                   fraction: float, init: str = "random", weights_path=None,
                   run_name: str | None = None, seed: int | None = None):
    if cfg.deterministic:
        set_deterministic()
    train_samples, val_samples, _ = _labeled_train_samples(
        cfg, corpus, fold, fraction)
    seed = seed if seed is not None else derive_seed(
        cfg.seed, f"supervised:{fold.fold_id}:{fraction}")
    model, log = tr.train_supervised(
        cfg.backbone, train_samples, val_samples, corpus.store,
        cfg.finetune, seed, init=init, weights_path=weights_path,
        aug_cfg=cfg.augment, crop_size=cfg.preprocess.crop_size,
        out_size=cfg.preprocess.out_size)
    run_dir = _run_dir(cfg, run_name
                       or f"supervised_fold{fold.fold_id}_frac{fraction}")
    meta = tr.checkpoint_meta("supervised", seed, log, cfg.config_hash())
    save_checkpoint(model, meta, run_dir / "checkpoint.ckpt")
    log.write_csv(run_dir / "trainlog.csv")
    log.write_summary(run_dir / "summary.json")
    _write_provenance(cfg, corpus, run_dir,
                      {"fold": fold.fold_id, "fraction": fraction})
    return model, log, run_dir


def run_baseline(cfg: ExperimentConfig, corpus: Corpus, fold: FoldSplit,
                 fraction: float, feature: str,
                 run_name: str | None = None, seed: int | None = None):
    train_samples, val_samples, _ = _labeled_train_samples(
        cfg, corpus, fold, fraction)
    seed = seed if seed is not None else derive_seed(
        cfg.seed, f"baseline:{feature}:{fold.fold_id}:{fraction}")
    model, log = train_feature_classifier(
        feature, train_samples, val_samples, corpus.store, cfg.finetune,
        seed, crop_size=cfg.preprocess.crop_size,
        out_size=cfg.preprocess.out_size)
    run_dir = _run_dir(cfg, run_name
                       or f"baseline_{feature}_fold{fold.fold_id}_frac{fraction}")
    log.write_csv(run_dir / "trainlog.csv")
    log.write_summary(run_dir / "summary.json")
    _write_provenance(cfg, corpus, run_dir,
                      {"fold": fold.fold_id, "fraction": fraction,
                       "feature": feature})
    return model, log, run_dir


def evaluate_model(cfg: ExperimentConfig, corpus: Corpus, fold: FoldSplit,
                   model, split: str = "test", run_dir=None,
                   method: str = "model", fraction: float = 1.0) -> dict:
    """Per-frame test-set evaluation: metrics JSON, per-video timelines,
    and the high-confidence error report."""
    ids = {"train": fold.train_ids, "val": fold.val_ids,
           "test": fold.test_ids}[split]
    frames = corpus.frames()
    preds_all, truth_all = [], []
    timelines = []
    for vid in sorted(ids):
        record = corpus.record_by_id[vid]
        vid_frames = sorted((f for f in frames if f.video_id == vid),
                            key=lambda f: f.timestamp_s)
        preds = classify_video(model, record, corpus.store,
                               cfg.preprocess.crop_size,
                               cfg.preprocess.out_size)
        tl = PredictionTimeline(
            video_id=vid,
            pred=tuple(p.label for p in preds),
            confidence=tuple(p.confidence for p in preds),
            truth=tuple(f.label for f in vid_frames),
        )
        timelines.append(tl)
        preds_all.extend(tl.pred)
        truth_all.extend(tl.truth)
    cm = confusion(preds_all, truth_all)
    report = metrics_report(cm, fold_id=fold.fold_id, split=split)
    report["method"] = method
    report["fraction"] = fraction
    if run_dir is not None:
        run_dir = Path(run_dir)
        with open(run_dir / "metrics.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        for tl in timelines:
            render_timeline(tl, run_dir / "timelines" / f"{tl.video_id}.png",
                            cfg.eval.px_per_second)
            export_errors(tl, corpus.store.get, cfg.eval.error_top_k,
                          run_dir / "errors" / tl.video_id)
    return report


def evaluate_baseline(cfg: ExperimentConfig, corpus: Corpus, fold: FoldSplit,
                      model, feature: str, split: str = "test",
                      run_dir=None, fraction: float = 1.0) -> dict:
    ids = {"train": fold.train_ids, "val": fold.val_ids,
           "test": fold.test_ids}[split]
    frames = sorted(frames_in(corpus.frames(), ids),
                    key=lambda f: (f.video_id, f.timestamp_s))
    pred_idx = predict_features(model, feature, frames, corpus.store,
                                cfg.preprocess.crop_size,
                                cfg.preprocess.out_size)
    preds = [tr.INDEX_LABEL[int(i)] for i in pred_idx]
    truth = [f.label for f in frames]
    cm = confusion(preds, truth)
    report = metrics_report(cm, fold_id=fold.fold_id, split=split)
    report["method"] = feature
    report["fraction"] = fraction
    if run_dir is not None:
        with open(Path(run_dir) / "metrics.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    return report


def scrub_video(cfg: ExperimentConfig, model, record, store: FrameStore,
                out_path, margin_s: int | None = None,
                smooth_window: int | None = None, model_hash: str = "",
                edl_path=None, audit_path=None):
    """classify -> smooth -> segmentize -> edit list -> scrubbed output."""
    from .scrub import apply_edit_list

    margin_s = cfg.scrub.margin_s if margin_s is None else margin_s
    window = cfg.scrub.smooth_window if smooth_window is None else smooth_window
    preds = classify_video(model, record, store, cfg.preprocess.crop_size,
                           cfg.preprocess.out_size)
    if window > 1:
        preds = smooth(preds, window)
    segments = segmentize(preds)
    edl = make_edit_list(record.video_id, segments, margin_s=margin_s,
                         smoothing="none" if window <= 1 else f"median({window})",
                         model_hash=model_hash)
    if edl_path is not None:
        Path(edl_path).parent.mkdir(parents=True, exist_ok=True)
        with open(edl_path, "w") as f:
            json.dump(edl.to_json(), f, indent=2)
    audit = apply_edit_list(store.root / record.video_id
                            if (store.root / record.video_id).is_dir()
                            else record.frame_dir,
                            edl, out_path, audit_path)
    return edl, audit
