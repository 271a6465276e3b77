"""Backbone + MLP-2 head models with head swapping and checkpoint I/O.

Two backbones: `reference-residual-50` (the full-scale 50-layer residual
network, feature width 2048) and `small-residual` (a 4-stage desk-scale
residual net) so tests and acceptance runs finish in minutes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeMismatchError, VersionMismatchError, WeightMismatchError

CHECKPOINT_MAGIC = b"ENDOSCK1"
CHECKPOINT_VERSION = 1

HEAD_HIDDEN = 512
HEAD_DROPOUT = 0.1


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "small-residual"  # or "reference-residual-50"
    feature_dim: int = 128        # fixed at 2048 for the reference backbone
    input_size: int = 224

    def __post_init__(self):
        if self.kind not in ("small-residual", "reference-residual-50",
                             "feature-passthrough"):
            raise ValueError(f"unknown backbone kind: {self.kind}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")

    def resolved_feature_dim(self) -> int:
        return 2048 if self.kind == "reference-residual-50" else self.feature_dim

    def to_json(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim,
                "input_size": self.input_size}

    @classmethod
    def from_json(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


@dataclass
class CheckpointMeta:
    phase: str = "supervised"  # pretext | finetune | supervised
    seed: int = 0
    epoch: int = 0
    val_loss: float = float("nan")
    config_hash: str = ""

    def to_json(self) -> dict:
        return {"phase": self.phase, "seed": self.seed, "epoch": self.epoch,
                "val_loss": self.val_loss, "config_hash": self.config_hash}

    @classmethod
    def from_json(cls, d: dict) -> "CheckpointMeta":
        return cls(**d)


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class SmallResidualBackbone(nn.Module):
    """4 residual stages, global average pool; accepts any input >= 32 px."""

    def __init__(self, feature_dim=128):
        super().__init__()
        widths = [max(8, feature_dim // 8), max(8, feature_dim // 4),
                  max(8, feature_dim // 2), feature_dim]
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = widths[0]
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages.append(BasicBlock(in_ch, w, stride=stride))
            stages.append(BasicBlock(w, w))
            in_ch = w
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = feature_dim

    def forward(self, x):
        x = self.stages(self.stem(x))
        return self.pool(x).flatten(1)


class ReferenceResidual50Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.fc = nn.Identity()
        self.net = net
        self.feature_dim = 2048

    def forward(self, x):
        return self.net(x)


class Mlp2Head(nn.Module):
    """512-unit hidden layer, ReLU, dropout 0.1, linear projection to logits."""

    def __init__(self, feature_dim, n_out, hidden=HEAD_HIDDEN, dropout=HEAD_DROPOUT):
        super().__init__()
        self.fc1 = nn.Linear(feature_dim, hidden)
        self.relu = nn.ReLU(inplace=True)
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, n_out)

    def forward(self, x):
        return self.fc2(self.dropout(self.relu(self.fc1(x))))


class ClassifierModel(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, backbone: nn.Module,
                 head: Mlp2Head, n_out: int):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.backbone = backbone
        self.head = head
        self.n_out = n_out

    def forward(self, x):
        return self.head(self.backbone(x))


def _make_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "reference-residual-50":
        return ReferenceResidual50Backbone()
    if cfg.kind == "feature-passthrough":
        # precomputed feature vectors go straight to the head (baselines)
        return nn.Identity()
    return SmallResidualBackbone(cfg.feature_dim)


def build_model(cfg: BackboneConfig, n_out: int, init: str = "random",
                seed: int = 0, weights_path=None) -> ClassifierModel:
    """Construct backbone + fresh MLP-2 head.

    init="random" draws all parameters from the seeded stream;
    init="external-weights" loads `weights_path` into the backbone only
    (the head is always freshly initialized).
    """
    if n_out < 2:
        raise ValueError("n_out must be >= 2")
    torch.manual_seed(seed)
    backbone = _make_backbone(cfg)
    head = Mlp2Head(cfg.resolved_feature_dim(), n_out)
    model = ClassifierModel(cfg, backbone, head, n_out)
    if init == "external-weights":
        if weights_path is None:
            raise ValueError("external-weights init requires weights_path")
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        try:
            model.backbone.load_state_dict(state)
        except RuntimeError as e:
            raise WeightMismatchError(str(e)) from e
    elif init != "random":
        raise ValueError(f"unknown init: {init}")
    return model


def swap_head(model: ClassifierModel, n_out: int, seed: int = 0) -> ClassifierModel:
    """Replace the head with a fresh MLP-2; backbone parameters untouched."""
    torch.manual_seed(seed)
    head = Mlp2Head(model.backbone_cfg.resolved_feature_dim(), n_out)
    return ClassifierModel(model.backbone_cfg, model.backbone, head, n_out)


def forward_numpy(model: ClassifierModel, batch: np.ndarray,
                  train: bool = False) -> np.ndarray:
    """Run a NHWC float32 batch through the model, returning numpy logits.

    Eval mode (train=False) is deterministic: dropout disabled, no grad.
    """
    if batch.ndim != 4 or batch.shape[3] != 3:
        raise ShapeMismatchError(f"expected NxHxWx3, got {batch.shape}")
    if batch.shape[0] == 0:
        return np.zeros((0, model.n_out), dtype=np.float32)
    x = torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 3, 1, 2)
    model.train(train)
    if train:
        return model(x).detach().numpy()
    with torch.no_grad():
        out = model(x)
    return out.numpy()


def save_checkpoint(model: ClassifierModel, meta: CheckpointMeta, path) -> None:
    """Versioned container: magic, JSON header, named parameter arrays."""
    header = {
        "version": CHECKPOINT_VERSION,
        "backbone": model.backbone_cfg.to_json(),
        "n_out": model.n_out,
        "meta": meta.to_json(),
    }
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (model, meta).

    Eval-mode outputs of the loaded model are bit-identical to the saved one.
    """
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise VersionMismatchError(f"bad checkpoint magic in {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise VersionMismatchError(f"corrupt checkpoint header: {e}") from e
        payload = f.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    cfg = BackboneConfig.from_json(header["backbone"])
    model = build_model(cfg, header["n_out"])
    arrays = np.load(io.BytesIO(payload))
    state = {k: torch.from_numpy(np.array(arrays[k])) for k in arrays.files}
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise WeightMismatchError(str(e)) from e
    meta = CheckpointMeta.from_json(header["meta"])
    model.eval()
    return model, meta


def head_param_count(feature_dim: int, n_out: int) -> int:
    """Exact parameter count of the MLP-2 head (two affine maps)."""
    return feature_dim * HEAD_HIDDEN + HEAD_HIDDEN + HEAD_HIDDEN * n_out + n_out
