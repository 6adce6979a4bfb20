"""Shared fixtures: synthetic images, manifests, and stub ensembles."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from woundcare import dataset
from woundcare.imaging import PREPROCESSING_TAG, RawImage
from woundcare.network import FixedOutputNet, ModelHandle, ModelVariant


def block_pattern(rng: np.random.Generator, size: int = 64, cells: int = 4) -> np.ndarray:
    """High-contrast random block image; distinct images stay separable
    even after heavy pooling."""
    coarse = (rng.integers(0, 2, size=(cells, cells, 3)) * 255).astype(np.uint8)
    return np.kron(coarse, np.ones((size // cells, size // cells, 1), dtype=np.uint8))


def png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def jpeg_bytes(pixels: np.ndarray, **save_kwargs) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="JPEG", **save_kwargs)
    return buf.getvalue()


def write_image_entries(
    directory: Path,
    count: int,
    *,
    size: int = 64,
    seed: int = 11,
    label_seed: int = 3,
) -> list[dataset.ManifestEntry]:
    """Write block-pattern PNGs with random labels; returns their entries."""
    rng = np.random.default_rng(seed)
    label_rng = np.random.default_rng(label_seed)
    entries = []
    for k in range(count):
        pixels = block_pattern(rng, size=size)
        path = directory / f"img{k:03d}.png"
        Image.fromarray(pixels, mode="RGB").save(path)
        labels = dataset.LabelVector.from_ints(
            (label_rng.random(9) > 0.5).astype(int)
        )
        entries.append(dataset.ManifestEntry(str(path), labels, source_tag="synthetic"))
    return entries


def stub_member(
    variant_id: str,
    freeze_index: int,
    probabilities,
    input_size: int = 32,
) -> ModelHandle:
    return ModelHandle(
        net=FixedOutputNet(probabilities, input_size=input_size),
        variant=ModelVariant(variant_id, freeze_index),
        weights_provenance="random-init",
        preprocessing_tag=PREPROCESSING_TAG,
        input_size=input_size,
    )


def stub_bundle(probs_a, probs_b, probs_c, *, input_size: int = 32, version="stub-1"):
    from woundcare.ensemble import EnsembleBundle

    return EnsembleBundle(
        members=(
            stub_member("A", 6, probs_a, input_size),
            stub_member("B", 10, probs_b, input_size),
            stub_member("C", 14, probs_c, input_size),
        ),
        version=version,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240)


@pytest.fixture
def sample_image(rng) -> RawImage:
    return RawImage(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
