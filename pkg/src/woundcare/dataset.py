"""Labeled-image manifests, canonical label order, and train/validation splits."""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .errors import DuplicatePath, InvalidRatio, ManifestParseError

# Canonical finding order. Every 9-vector in the system uses this order.
LABELS = (
    "wound",
    "infection",
    "granulation_tissue",
    "fibrinous_exudate",
    "open_wound",
    "drainage",
    "steri_strips",
    "staples",
    "sutures",
)

MANIFEST_FIELDS = ("path", *LABELS, "source_tag")


class LabelVector(NamedTuple):
    """Nine boolean findings in the canonical order."""

    wound: bool
    infection: bool
    granulation_tissue: bool
    fibrinous_exudate: bool
    open_wound: bool
    drainage: bool
    steri_strips: bool
    staples: bool
    sutures: bool

    @classmethod
    def from_ints(cls, values: Iterable[int]) -> "LabelVector":
        vals = [bool(v) for v in values]
        if len(vals) != len(LABELS):
            raise ValueError(f"expected {len(LABELS)} labels, got {len(vals)}")
        return cls(*vals)

    def as_floats(self) -> list[float]:
        return [1.0 if v else 0.0 for v in self]


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    labels: LabelVector
    source_tag: str = ""


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint, exhaustive train/validation partition of a manifest."""

    train: tuple[ManifestEntry, ...]
    validation: tuple[ManifestEntry, ...]
    seed: int
    ratio: float


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a manifest CSV, preserving file order.

    Schema: header ``path,<nine labels>,source_tag``; label cells are
    literally ``0`` or ``1``. Raises ManifestParseError with the
    offending line number, or DuplicatePath for repeated image paths.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestParseError("empty manifest file", line=1) from None
        if tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ManifestParseError(
                f"bad header, expected {','.join(MANIFEST_FIELDS)}", line=1
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise ManifestParseError(
                    f"expected {len(MANIFEST_FIELDS)} fields, got {len(row)}",
                    line=lineno,
                )
            image_path = row[0].strip()
            if not image_path:
                raise ManifestParseError("empty image path", line=lineno)
            if image_path in seen:
                raise DuplicatePath(f"duplicate image path: {image_path}")
            seen.add(image_path)
            flags = []
            for name, cell in zip(LABELS, row[1:10]):
                cell = cell.strip()
                if cell not in ("0", "1"):
                    raise ManifestParseError(
                        f"label {name!r} must be 0 or 1, got {cell!r}", line=lineno
                    )
                flags.append(cell == "1")
            entries.append(
                ManifestEntry(
                    image_path=image_path,
                    labels=LabelVector(*flags),
                    source_tag=row[10].strip(),
                )
            )
    return entries


def save_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    """Write entries back out in the manifest CSV schema."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for e in entries:
            writer.writerow(
                [e.image_path, *("1" if v else "0" for v in e.labels), e.source_tag]
            )


def class_counts(entries: Iterable[ManifestEntry]) -> dict[str, tuple[int, int]]:
    """Per-label (positive, negative) counts, in canonical label order."""
    entries = list(entries)
    total = len(entries)
    counts: dict[str, tuple[int, int]] = {}
    for idx, name in enumerate(LABELS):
        pos = sum(1 for e in entries if e.labels[idx])
        counts[name] = (pos, total - pos)
    return counts


def split_dataset(
    entries: list[ManifestEntry], ratio: float, seed: int
) -> DatasetSplit:
    """Shuffled train/validation split; deterministic for a given seed.

    The train partition holds ``round(ratio * total)`` entries.
    """
    if not 0 < ratio < 1:
        raise InvalidRatio(f"ratio must be in (0, 1), got {ratio}")
    if not entries:
        raise ValueError("cannot split an empty manifest")
    shuffled = list(entries)
    random.Random(seed).shuffle(shuffled)
    n_train = round(ratio * len(shuffled))
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train:]),
        seed=seed,
        ratio=ratio,
    )
