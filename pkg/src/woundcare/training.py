"""Two-phase fine-tuning: Adam warm-up, then low-rate SGD.

Both phases minimize binary cross-entropy over the nine findings.
Batches are optionally augmented online: each batch carries the
original images plus one randomly transformed copy of each, labeled
identically. Validation loss is always computed on clean images.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn.functional import binary_cross_entropy_with_logits

from .augment import AugmentConfig, sample_params, apply_transform
from .dataset import DatasetSplit, ManifestEntry
from .errors import NonFiniteLoss
from .imaging import ClaheConfig, RawImage, apply_clahe, decode_image, resize_image, to_model_input
from .network import ModelHandle, inputs_to_tensor, save_model

LOSS_EPS = 1e-7


@dataclass(frozen=True)
class PhaseConfig:
    optimizer: str  # "adam" or "sgd"
    learning_rate: float
    epochs: int

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    phase1: PhaseConfig = field(default_factory=lambda: PhaseConfig("adam", 1e-3, 30))
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig("sgd", 1e-4, 50))
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    seed: int = 0
    clahe: ClaheConfig = field(default_factory=ClaheConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    phase: int
    epoch: int
    train_loss: float
    val_loss: float | None
    seconds: float


@dataclass
class TrainReport:
    """One record per completed epoch, serializable as JSON lines."""

    records: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            lines.append(
                json.dumps(
                    {
                        "phase": r.phase,
                        "epoch": r.epoch,
                        "train_loss": r.train_loss,
                        "val_loss": r.val_loss,
                        "seconds": round(r.seconds, 3),
                    }
                )
            )
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainReport":
        records = []
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(
                EpochRecord(
                    phase=d["phase"],
                    epoch=d["epoch"],
                    train_loss=d["train_loss"],
                    val_loss=d["val_loss"],
                    seconds=d.get("seconds", 0.0),
                )
            )
        return cls(records)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


def bce_loss(predicted, target) -> float:
    """Mean binary cross-entropy between probabilities and 0/1 targets.

    Probabilities are clamped to [1e-7, 1 - 1e-7], so the result is
    always finite and non-negative.
    """
    p = np.clip(np.asarray(predicted, dtype=np.float64), LOSS_EPS, 1.0 - LOSS_EPS)
    t = np.asarray([float(v) for v in target], dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))


def prepare_entry(
    entry: ManifestEntry, input_size: int, clahe: ClaheConfig
) -> RawImage:
    """Decode, resize, and contrast-normalize one manifest image."""
    payload = Path(entry.image_path).read_bytes()
    img = decode_image(payload)
    return apply_clahe(resize_image(img, input_size), clahe)


def _make_optimizer(phase: PhaseConfig, params) -> torch.optim.Optimizer:
    if phase.optimizer == "adam":
        return torch.optim.Adam(params, lr=phase.learning_rate)
    return torch.optim.SGD(params, lr=phase.learning_rate)


def _targets(entries: Sequence[ManifestEntry]) -> torch.Tensor:
    return torch.tensor([e.labels.as_floats() for e in entries], dtype=torch.float32)


def train(
    handle: ModelHandle,
    split: DatasetSplit,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelHandle, TrainReport]:
    """Run both phases, returning the fine-tuned model and its report.

    Deterministic for a given seed: shuffling, augmentation draws, and
    dropout masks all derive from ``cfg.seed``. Frozen layers are
    excluded from the optimizer. A checkpoint bundle is written at the
    end of each phase when ``checkpoint_dir`` is given.
    """
    if not split.train:
        raise ValueError("training partition is empty")
    net = handle.net
    size = handle.input_size

    train_images = [prepare_entry(e, size, cfg.clahe) for e in split.train]
    train_targets = _targets(split.train)
    val_inputs = None
    val_targets = None
    if split.validation:
        val_images = [prepare_entry(e, size, cfg.clahe) for e in split.validation]
        val_inputs = inputs_to_tensor(
            handle, [to_model_input(img, size) for img in val_images]
        )
        val_targets = _targets(split.validation)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    trainable = [p for p in net.parameters() if p.requires_grad]
    report = TrainReport()

    for phase_no, phase in ((1, cfg.phase1), (2, cfg.phase2)):
        if phase.epochs == 0:
            continue
        optimizer = _make_optimizer(phase, trainable)
        for epoch in range(1, phase.epochs + 1):
            start = time.monotonic()
            net.train()
            order = rng.permutation(len(train_images))
            total_loss = 0.0
            total_count = 0
            for batch_no, lo in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[lo : lo + cfg.batch_size]
                inputs = []
                target_rows = [train_targets[i] for i in idx]
                for i in idx:
                    inputs.append(to_model_input(train_images[i], size))
                if cfg.augment is not None:
                    for i in idx:
                        params = sample_params(cfg.augment, rng)
                        warped, _ = apply_transform(
                            train_images[i], split.train[i].labels, params
                        )
                        inputs.append(to_model_input(warped, size))
                        target_rows.append(train_targets[i])
                x = inputs_to_tensor(handle, inputs)
                y = torch.stack(target_rows)
                logits = net.forward_logits(x)
                loss = binary_cross_entropy_with_logits(logits, y)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(phase_no, epoch, batch_no)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total_loss += loss.item() * len(inputs)
                total_count += len(inputs)

            val_loss = None
            if val_inputs is not None:
                net.eval()
                with torch.no_grad():
                    val_logits = net.forward_logits(val_inputs)
                    val_loss = float(
                        binary_cross_entropy_with_logits(val_logits, val_targets)
                    )
            report.records.append(
                EpochRecord(
                    phase=phase_no,
                    epoch=epoch,
                    train_loss=total_loss / total_count,
                    val_loss=val_loss,
                    seconds=time.monotonic() - start,
                )
            )
        if checkpoint_dir is not None:
            handle.weights_provenance = "fine-tuned"
            handle.history_digest = report.digest()
            save_model(handle, Path(checkpoint_dir) / f"checkpoint-phase{phase_no}.pt")

    if report.records:
        handle.weights_provenance = "fine-tuned"
        handle.history_digest = report.digest()
    net.eval()
    return handle, report
