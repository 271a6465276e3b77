"""Experiment configuration: a YAML key-value tree whose defaults are the
published training recipe, plus a stable content hash for run provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import BackboneConfig
from .preprocess import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig
from .synth import SynthConfig
from .train import FinetuneConfig, PretrainConfig

DEFAULT_FRACTIONS = (0.02, 0.05, 0.10, 0.15, 1.0)


@dataclass(frozen=True)
class PreprocessSettings:
    crop_size: int = 640
    out_size: int = 224
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD


@dataclass(frozen=True)
class FoldSettings:
    n_folds: int = 5
    ratios: tuple = (0.45, 0.20, 0.35)


@dataclass(frozen=True)
class ScrubSettings:
    margin_s: int = 0
    smooth_window: int = 1  # 1 = no smoothing


@dataclass(frozen=True)
class EvalSettings:
    px_per_second: int = 4
    error_top_k: int = 20


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus_dir: str = "corpus"
    run_dir: str = "runs"
    fractions: tuple = DEFAULT_FRACTIONS
    folds: FoldSettings = field(default_factory=FoldSettings)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    scrub: ScrubSettings = field(default_factory=ScrubSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    deterministic: bool = False

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "corpus_dir": self.corpus_dir,
            "run_dir": self.run_dir,
            "fractions": list(self.fractions),
            "folds": {"n_folds": self.folds.n_folds,
                      "ratios": list(self.folds.ratios)},
            "preprocess": {
                "crop_size": self.preprocess.crop_size,
                "out_size": self.preprocess.out_size,
                "mean": list(self.preprocess.mean),
                "std": list(self.preprocess.std),
            },
            "augment": self.augment.to_json(),
            "backbone": self.backbone.to_json(),
            "pretrain": {
                "batch_size": self.pretrain.batch_size,
                "epochs": self.pretrain.epochs,
                "lr": self.pretrain.lr,
                "expansion": self.pretrain.expansion,
            },
            "finetune": {
                "batch_size": self.finetune.batch_size,
                "epochs": self.finetune.epochs,
                "base_lr": self.finetune.base_lr,
                "milestone_fracs": list(self.finetune.milestone_fracs),
                "decay_factor": self.finetune.decay_factor,
                "min_lr": self.finetune.min_lr,
                "class_weights": list(self.finetune.class_weights),
                "warmup_epochs": self.finetune.warmup_epochs,
            },
            "synth": {
                "n_videos": self.synth.n_videos,
                "duration_range": list(self.synth.duration_range),
                "irrelevant_ratio": self.synth.irrelevant_ratio,
                "seed": self.synth.seed,
                "image_size": list(self.synth.image_size),
            },
            "scrub": {"margin_s": self.scrub.margin_s,
                      "smooth_window": self.scrub.smooth_window},
            "eval": {"px_per_second": self.eval.px_per_second,
                     "error_top_k": self.eval.error_top_k},
            "deterministic": self.deterministic,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        try:
            cfg = cls()
            kw: dict = {}
            for key in ("seed", "corpus_dir", "run_dir", "deterministic"):
                if key in d:
                    kw[key] = d[key]
            if "fractions" in d:
                kw["fractions"] = tuple(d["fractions"])
            if "folds" in d:
                kw["folds"] = FoldSettings(
                    n_folds=d["folds"].get("n_folds", cfg.folds.n_folds),
                    ratios=tuple(d["folds"].get("ratios", cfg.folds.ratios)),
                )
            if "preprocess" in d:
                p = d["preprocess"]
                kw["preprocess"] = PreprocessSettings(
                    crop_size=p.get("crop_size", 640),
                    out_size=p.get("out_size", 224),
                    mean=tuple(p.get("mean", IMAGENET_MEAN)),
                    std=tuple(p.get("std", IMAGENET_STD)),
                )
            if "augment" in d:
                kw["augment"] = AugmentConfig.from_json(d["augment"])
            if "backbone" in d:
                kw["backbone"] = BackboneConfig.from_json(d["backbone"])
            if "pretrain" in d:
                kw["pretrain"] = PretrainConfig(**d["pretrain"])
            if "finetune" in d:
                ft = dict(d["finetune"])
                for tkey in ("milestone_fracs", "class_weights"):
                    if tkey in ft:
                        ft[tkey] = tuple(ft[tkey])
                kw["finetune"] = FinetuneConfig(**ft)
            if "synth" in d:
                s = dict(d["synth"])
                for tkey in ("duration_range", "image_size"):
                    if tkey in s:
                        s[tkey] = tuple(s[tkey])
                kw["synth"] = SynthConfig(**s)
            if "scrub" in d:
                kw["scrub"] = ScrubSettings(**d["scrub"])
            if "eval" in d:
                kw["eval"] = EvalSettings(**d["eval"])
            return cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad experiment config: {e}") from e

    def config_hash(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def load_config(path=None) -> ExperimentConfig:
    """Load YAML config; missing keys fall back to the paper defaults."""
    if path is None:
        return ExperimentConfig()
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return ExperimentConfig.from_json(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_json(), f, sort_keys=True)
