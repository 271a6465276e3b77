"""Shared fixtures: a small deterministic synthetic corpus and helpers."""

import numpy as np
import pytest

from endoscrub.config import (
    ExperimentConfig,
    FoldSettings,
    PreprocessSettings,
)
from endoscrub.model import BackboneConfig
from endoscrub.synth import SynthConfig, generate_corpus
from endoscrub.train import FinetuneConfig, PretrainConfig


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A tiny seeded corpus shared by unit tests that need real frames."""
    root = tmp_path_factory.mktemp("small_corpus")
    cfg = SynthConfig(n_videos=6, duration_range=(18, 26),
                      irrelevant_ratio=0.15, seed=123, image_size=(90, 160))
    records, by_video, store = generate_corpus(cfg, root)
    return {"root": root, "cfg": cfg, "records": records,
            "segments": by_video, "store": store}


@pytest.fixture(scope="session")
def small_exp_cfg(small_corpus, tmp_path_factory):
    """Experiment config sized for the small corpus."""
    run_dir = tmp_path_factory.mktemp("runs")
    return ExperimentConfig(
        seed=123,
        corpus_dir=str(small_corpus["root"]),
        run_dir=str(run_dir),
        folds=FoldSettings(n_folds=2),
        preprocess=PreprocessSettings(crop_size=80, out_size=48),
        backbone=BackboneConfig(kind="small-residual", feature_dim=32,
                                input_size=48),
        pretrain=PretrainConfig(batch_size=16, epochs=2),
        finetune=FinetuneConfig(batch_size=32, epochs=4),
        synth=small_corpus["cfg"],
    )


def rand_image(rng, h=32, w=32, dtype=np.float32):
    img = rng.random((h, w, 3))
    if dtype == np.uint8:
        return (img * 255).astype(np.uint8)
    return img.astype(dtype)
