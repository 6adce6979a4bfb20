"""Three-member voting ensemble over the fine-tuned classifier variants.

Each member scores an image independently; per label, members whose
probability clears the decision threshold cast a positive vote and the
2-of-3 majority decides. Mean probabilities are kept alongside the
binary decisions for ROC analysis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LABELS
from .errors import CorruptBundle, WrongArity
from .imaging import ClaheConfig, RawImage, apply_clahe, resize_image, to_model_input
from .network import ModelHandle, load_model, predict, save_model

REQUIRED_FREEZE_INDICES = frozenset({6, 10, 14})
_MEMBER_COUNT = 3


@dataclass
class EnsembleBundle:
    """Exactly three members (freeze depths 6, 10, 14) plus a threshold."""

    members: tuple[ModelHandle, ModelHandle, ModelHandle]
    decision_threshold: float = 0.5
    version: str = "dev"

    def __post_init__(self):
        if len(self.members) != _MEMBER_COUNT:
            raise ValueError(f"ensemble needs exactly {_MEMBER_COUNT} members")
        freezes = {m.variant.freeze_through_index for m in self.members}
        if freezes != set(REQUIRED_FREEZE_INDICES):
            raise ValueError(
                f"members must carry freeze indices {sorted(REQUIRED_FREEZE_INDICES)},"
                f" got {sorted(freezes)}"
            )
        tags = {m.preprocessing_tag for m in self.members}
        sizes = {m.input_size for m in self.members}
        if len(tags) != 1 or len(sizes) != 1:
            raise ValueError("members must share preprocessing tag and input size")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision_threshold must be in (0, 1)")

    @property
    def input_size(self) -> int:
        return self.members[0].input_size

    @property
    def preprocessing_tag(self) -> str:
        return self.members[0].preprocessing_tag


@dataclass(frozen=True)
class LabelAssessment:
    label: str
    probabilities: tuple[float, float, float]
    votes: tuple[bool, bool, bool]
    decision: bool
    mean_probability: float


@dataclass(frozen=True)
class Assessment:
    """Per-label ensemble outputs for one image, in canonical label order."""

    labels: tuple[LabelAssessment, ...]
    model_version: str
    timestamp: str

    def decisions(self) -> list[bool]:
        return [la.decision for la in self.labels]

    def mean_probabilities(self) -> list[float]:
        return [la.mean_probability for la in self.labels]

    def to_dict(self) -> dict:
        return {
            "model_version": self.model_version,
            "timestamp": self.timestamp,
            "labels": [
                {
                    "label": la.label,
                    "probabilities": list(la.probabilities),
                    "votes": list(la.votes),
                    "decision": la.decision,
                    "mean_probability": la.mean_probability,
                }
                for la in self.labels
            ],
        }


def majority_vote(votes: Sequence[bool]) -> bool:
    """True iff at least 2 of the 3 votes are true."""
    if len(votes) != _MEMBER_COUNT:
        raise WrongArity(f"expected {_MEMBER_COUNT} votes, got {len(votes)}")
    return sum(bool(v) for v in votes) >= 2


def assess(
    bundle: EnsembleBundle,
    img: RawImage,
    clahe: ClaheConfig | None = None,
) -> Assessment:
    """Preprocess an image, score it with all members, and vote per label."""
    prepared = apply_clahe(resize_image(img, bundle.input_size), clahe)
    model_input = to_model_input(prepared, bundle.input_size)
    probs = np.vstack([predict(m, [model_input])[0] for m in bundle.members])

    labels = []
    for j, name in enumerate(LABELS):
        member_probs = tuple(float(p) for p in probs[:, j])
        votes = tuple(p >= bundle.decision_threshold for p in member_probs)
        labels.append(
            LabelAssessment(
                label=name,
                probabilities=member_probs,
                votes=votes,
                decision=majority_vote(votes),
                mean_probability=float(np.mean(member_probs)),
            )
        )
    return Assessment(
        labels=tuple(labels),
        model_version=bundle.version,
        timestamp=datetime.now(timezone.utc).isoformat(),
    )


_MANIFEST_NAME = "ensemble.json"


def save_bundle(bundle: EnsembleBundle, directory: str | Path) -> None:
    """Write the ensemble as a directory of member bundles plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    members = sorted(bundle.members, key=lambda m: m.variant.variant_id)
    filenames = []
    for member in members:
        filename = f"model-{member.variant.variant_id}.pt"
        save_model(member, directory / filename)
        filenames.append(filename)
    manifest = {
        "format": "woundcare-ensemble",
        "version": bundle.version,
        "decision_threshold": bundle.decision_threshold,
        "members": filenames,
    }
    (directory / _MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


def load_bundle(directory: str | Path) -> EnsembleBundle:
    directory = Path(directory)
    manifest_path = directory / _MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format") != "woundcare-ensemble":
            raise ValueError("not an ensemble manifest")
        members = tuple(load_model(directory / name) for name in manifest["members"])
    except CorruptBundle:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptBundle(f"cannot load ensemble from {directory}: {exc}") from exc
    return EnsembleBundle(
        members=members,  # type: ignore[arg-type]
        decision_threshold=manifest["decision_threshold"],
        version=manifest["version"],
    )
