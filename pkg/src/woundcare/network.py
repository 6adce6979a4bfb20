"""Truncated VGG-16 multi-label classifier with per-variant freeze depths.

The backbone keeps the 13 convolutional and 5 pooling layers of
VGG-16; the original 4096-unit dense layers and 1000-way output are
replaced by two 1024-unit ReLU layers (dropout 0.5 each) and a 9-unit
sigmoid output, one unit per finding.

Layers are indexed with the input as 0 and every conv/pool layer
counted, so the freeze depths 6, 10, and 14 land on the pooling
layers that end blocks 2, 3, and 4. A variant freezes every layer at
or below its freeze index.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import CorruptBundle, ShapeMismatch, WeightsUnavailable
from .imaging import PREPROCESSING_TAG, ModelInput

NUM_LABELS = 9
HEAD_WIDTH = 1024
DROPOUT = 0.5

# (spec layer index, kind, output channels); index 0 is the input.
LAYER_TABLE = (
    (1, "conv", 64),
    (2, "conv", 64),
    (3, "pool", 64),
    (4, "conv", 128),
    (5, "conv", 128),
    (6, "pool", 128),
    (7, "conv", 256),
    (8, "conv", 256),
    (9, "conv", 256),
    (10, "pool", 256),
    (11, "conv", 512),
    (12, "conv", 512),
    (13, "conv", 512),
    (14, "pool", 512),
    (15, "conv", 512),
    (16, "conv", 512),
    (17, "conv", 512),
    (18, "pool", 512),
)

# Indices of the conv layers above, in order, paired with their slot in
# torchvision's vgg16().features sequential (used to import pretrained
# backbone weights).
_CONV_INDICES = tuple(i for i, kind, _ in LAYER_TABLE if kind == "conv")
_TORCHVISION_FEATURE_SLOTS = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28)


@dataclass(frozen=True)
class ModelVariant:
    """One ensemble member: an id plus how deep the backbone is frozen."""

    variant_id: str
    freeze_through_index: int

    def __post_init__(self):
        if not 0 <= self.freeze_through_index <= LAYER_TABLE[-1][0]:
            raise ValueError(
                f"freeze_through_index out of range: {self.freeze_through_index}"
            )


VARIANTS = {
    "A": ModelVariant("A", 6),
    "B": ModelVariant("B", 10),
    "C": ModelVariant("C", 14),
}

# Per-variant seeds so fresh builds are reproducible.
_VARIANT_SEEDS = {"A": 1101, "B": 1102, "C": 1103}


class MultiLabelVgg(nn.Module):
    """The conv stack plus the replacement dense head.

    ``forward`` returns sigmoid probabilities; ``forward_logits``
    exposes the pre-sigmoid scores used for the training loss and for
    saliency analysis.
    """

    def __init__(self, input_size: int = 224):
        super().__init__()
        if input_size < 32 or input_size % 32:
            raise ValueError("input_size must be a positive multiple of 32")
        self.input_size = input_size
        convs = {}
        feature_layers = []
        in_ch = 3
        for index, kind, out_ch in LAYER_TABLE:
            if kind == "pool":
                feature_layers.append(nn.MaxPool2d(2, 2))
            else:
                conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
                convs[str(index)] = conv
                feature_layers.append(conv)
                feature_layers.append(nn.ReLU(inplace=True))
                in_ch = out_ch
        self.features = nn.Sequential(*feature_layers)
        self.conv_by_index = {int(k): v for k, v in convs.items()}

        side = input_size // 32
        flat = 512 * side * side
        self.fc1 = nn.Linear(flat, HEAD_WIDTH)
        self.fc2 = nn.Linear(HEAD_WIDTH, HEAD_WIDTH)
        self.fc3 = nn.Linear(HEAD_WIDTH, NUM_LABELS)
        self.dropout1 = nn.Dropout(DROPOUT)
        self.dropout2 = nn.Dropout(DROPOUT)

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        x = torch.flatten(x, 1)
        x = self.dropout1(torch.relu(self.fc1(x)))
        x = self.dropout2(torch.relu(self.fc2(x)))
        return self.fc3(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(x))

    def init_random(self, seed: int) -> None:
        """Seeded initialization for builds without pretrained weights.

        Convs use ReLU-gain kaiming scaling (plain fan-in scaling lets
        activations decay to nothing over 13 layers); dense layers use
        uniform fan-in scaling.
        """
        gen = torch.Generator().manual_seed(seed)
        for conv in self.conv_by_index.values():
            fan_out = conv.out_channels * conv.kernel_size[0] * conv.kernel_size[1]
            std = math.sqrt(2.0 / fan_out)
            with torch.no_grad():
                conv.weight.normal_(0.0, std, generator=gen)
                conv.bias.zero_()
        self.init_head(seed + 1)

    def init_head(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for lin in (self.fc1, self.fc2, self.fc3):
            bound = math.sqrt(6.0 / lin.in_features)
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.zero_()

    def apply_freeze(self, freeze_through_index: int) -> None:
        for index, conv in self.conv_by_index.items():
            frozen = index <= freeze_through_index
            conv.weight.requires_grad_(not frozen)
            conv.bias.requires_grad_(not frozen)


class FixedOutputNet(nn.Module):
    """Diagnostic stand-in emitting the same 9 probabilities for any input.

    Used to build stub ensembles for service and pipeline tests without
    a trained backbone.
    """

    def __init__(self, probabilities: Sequence[float], input_size: int = 32):
        super().__init__()
        probs = torch.as_tensor(list(probabilities), dtype=torch.float64)
        if probs.shape != (NUM_LABELS,):
            raise ValueError(f"expected {NUM_LABELS} probabilities")
        if not bool(((probs > 0) & (probs < 1)).all()):
            raise ValueError("probabilities must lie strictly inside (0, 1)")
        self.input_size = input_size
        self.register_buffer("logits", torch.logit(probs).to(torch.float32))

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.logits.unsqueeze(0).expand(x.shape[0], NUM_LABELS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(x))


@dataclass
class ModelHandle:
    """A built network plus the metadata that travels with it."""

    net: nn.Module
    variant: ModelVariant
    weights_provenance: str  # pretrained-backbone | fine-tuned | random-init
    preprocessing_tag: str
    input_size: int
    history_digest: str = "untrained"


def _load_pretrained_backbone(net: MultiLabelVgg) -> None:
    try:
        from torchvision.models import VGG16_Weights, vgg16

        reference = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise WeightsUnavailable(
            "pretrained VGG-16 backbone weights could not be loaded; "
            "build with pretrained=False for a seeded random backbone"
        ) from exc
    for spec_idx, tv_slot in zip(_CONV_INDICES, _TORCHVISION_FEATURE_SLOTS):
        src = reference.features[tv_slot]
        dst = net.conv_by_index[spec_idx]
        with torch.no_grad():
            dst.weight.copy_(src.weight)
            dst.bias.copy_(src.bias)


def build_model(
    variant: ModelVariant,
    *,
    input_size: int = 224,
    pretrained: bool = True,
) -> ModelHandle:
    """Construct one classifier with the variant's freeze policy applied.

    With ``pretrained=True`` the backbone convolutions are loaded from
    the standard VGG-16 weights (WeightsUnavailable if they cannot
    be fetched) and only the head is freshly initialized. With
    ``pretrained=False`` the whole network is seeded randomly, which
    keeps desk-scale runs reproducible without a weights download.
    """
    net = MultiLabelVgg(input_size=input_size)
    seed = _VARIANT_SEEDS.get(variant.variant_id, 1100)
    if pretrained:
        net.init_random(seed)
        _load_pretrained_backbone(net)
        net.init_head(seed + 1)
        provenance = "pretrained-backbone"
    else:
        net.init_random(seed)
        provenance = "random-init"
    net.apply_freeze(variant.freeze_through_index)
    net.eval()
    return ModelHandle(
        net=net,
        variant=variant,
        weights_provenance=provenance,
        preprocessing_tag=PREPROCESSING_TAG,
        input_size=input_size,
    )


def trainable_parameter_count(handle: ModelHandle) -> int:
    return sum(p.numel() for p in handle.net.parameters() if p.requires_grad)


def total_parameter_count(handle: ModelHandle) -> int:
    return sum(p.numel() for p in handle.net.parameters())


def backbone_parameter_count(handle: ModelHandle) -> int:
    net = handle.net
    if not isinstance(net, MultiLabelVgg):
        return 0
    return sum(
        c.weight.numel() + c.bias.numel() for c in net.conv_by_index.values()
    )


def inputs_to_tensor(handle: ModelHandle, batch: Sequence[ModelInput]) -> torch.Tensor:
    """Validate and stack normalized inputs into an NCHW float tensor."""
    if not batch:
        raise ValueError("empty batch")
    arrays = []
    for item in batch:
        if item.preprocessing_tag != handle.preprocessing_tag:
            raise ValueError(
                f"input normalized with {item.preprocessing_tag!r}, model "
                f"expects {handle.preprocessing_tag!r}"
            )
        if item.data.shape != (handle.input_size, handle.input_size, 3):
            raise ShapeMismatch(
                f"expected {handle.input_size}x{handle.input_size}x3 input, "
                f"got {item.data.shape}"
            )
        arrays.append(item.data)
    stacked = np.stack(arrays).astype(np.float32)
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


_PROB_EPS = 1e-7


def predict(handle: ModelHandle, batch: Sequence[ModelInput]) -> np.ndarray:
    """Per-image probabilities for the nine findings, shape (n, 9).

    Inference is deterministic (dropout inactive); outputs are clamped
    to lie strictly inside (0, 1).
    """
    x = inputs_to_tensor(handle, batch)
    handle.net.eval()
    with torch.no_grad():
        probs = handle.net(x)
    out = probs.numpy().astype(np.float64)
    return np.clip(out, _PROB_EPS, 1.0 - _PROB_EPS)


def save_model(handle: ModelHandle, path: str | Path) -> None:
    """Write a self-describing single-file bundle (weights + manifest)."""
    net = handle.net
    kind = "vgg-multilabel" if isinstance(net, MultiLabelVgg) else "fixed-output"
    payload = {
        "format": "woundcare-model",
        "format_version": 1,
        "manifest": {
            "kind": kind,
            "variant_id": handle.variant.variant_id,
            "freeze_through_index": handle.variant.freeze_through_index,
            "input_size": handle.input_size,
            "preprocessing_tag": handle.preprocessing_tag,
            "weights_provenance": handle.weights_provenance,
            "history_digest": handle.history_digest,
        },
        "state_dict": net.state_dict(),
    }
    torch.save(payload, Path(path))


def load_model(path: str | Path) -> ModelHandle:
    """Load a bundle written by save_model; weights round-trip bit-exactly."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        if payload.get("format") != "woundcare-model":
            raise ValueError("not a model bundle")
        manifest = payload["manifest"]
        variant = ModelVariant(
            variant_id=manifest["variant_id"],
            freeze_through_index=manifest["freeze_through_index"],
        )
        if manifest["kind"] == "vgg-multilabel":
            net: nn.Module = MultiLabelVgg(input_size=manifest["input_size"])
        elif manifest["kind"] == "fixed-output":
            net = FixedOutputNet([0.5] * NUM_LABELS, input_size=manifest["input_size"])
        else:
            raise ValueError(f"unknown model kind {manifest['kind']!r}")
        net.load_state_dict(payload["state_dict"])
    except CorruptBundle:
        raise
    except Exception as exc:
        raise CorruptBundle(f"cannot load model bundle {path}: {exc}") from exc
    if isinstance(net, MultiLabelVgg):
        net.apply_freeze(variant.freeze_through_index)
    net.eval()
    return ModelHandle(
        net=net,
        variant=variant,
        weights_provenance=manifest["weights_provenance"],
        preprocessing_tag=manifest["preprocessing_tag"],
        input_size=manifest["input_size"],
        history_digest=manifest["history_digest"],
    )


def parameter_checksum(handle: ModelHandle, *, frozen_only: bool = False) -> str:
    """SHA-256 over parameter bytes, optionally restricted to frozen ones."""
    digest = hashlib.sha256()
    for name, param in sorted(handle.net.named_parameters()):
        if frozen_only and param.requires_grad:
            continue
        digest.update(name.encode())
        digest.update(param.detach().numpy().tobytes())
    return digest.hexdigest()
