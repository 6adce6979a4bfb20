"""Metric formulas, ROC/AUC, saliency maps, and ensemble evaluation."""

import json

import numpy as np
import pytest
import torch

from woundcare.dataset import LABELS, LabelVector, ManifestEntry
from woundcare.errors import (
    DegenerateTruth,
    EmptySample,
    LengthMismatch,
    ShapeMismatch,
)
from woundcare.imaging import PREPROCESSING_TAG, RawImage, to_model_input
from woundcare.metrics import (
    ConfusionCounts,
    blend_saliency,
    confusion,
    evaluate_ensemble,
    f1_sens_spec,
    metric_row,
    roc_curve,
    saliency_map,
    saliency_to_image,
    write_evaluation,
)
from woundcare.network import VARIANTS, ModelHandle, ModelVariant, build_model

from conftest import stub_bundle, write_image_entries

# (sensitivity, specificity, printed F1) rows from the reference report
REPORTED_ROWS = {
    "wound": (0.93, 0.75, 0.83),
    "infection": (0.70, 0.70, 0.70),
    "granulation_tissue": (0.92, 0.73, 0.81),
    "fibrinous_exudate": (0.71, 0.74, 0.72),
    "open_wound": (0.96, 0.75, 0.84),
    "drainage": (0.98, 0.55, 0.70),
    "steri_strips": (0.88, 0.82, 0.85),
    "staples": (0.83, 0.60, 0.70),
    "sutures": (0.91, 0.57, 0.70),
}


def pairwise_auc(scores, truth) -> float:
    """Tie-adjusted Mann-Whitney statistic: fraction of positive/negative
    pairs ranked correctly, ties counted half."""
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestConfusion:
    def test_all_correct(self):
        c = confusion([True, False, True], [True, False, True])
        assert (c.tp, c.tn, c.fp, c.fn) == (2, 1, 0, 0)

    def test_all_false_positive(self):
        c = confusion([True] * 4, [False] * 4)
        assert (c.fp, c.tp, c.tn, c.fn) == (4, 0, 0, 0)

    def test_matches_elementwise_tally(self, rng):
        for _ in range(20):
            d = rng.integers(0, 2, 20).astype(bool)
            t = rng.integers(0, 2, 20).astype(bool)
            c = confusion(d.tolist(), t.tolist())
            assert c.tp == int(np.sum(d & t))
            assert c.fp == int(np.sum(d & ~t))
            assert c.tn == int(np.sum(~d & ~t))
            assert c.fn == int(np.sum(~d & t))
            assert c.total == 20

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            confusion([True], [True, False])


class TestMetricRow:
    def test_prior_work_cross_check(self):
        assert f1_sens_spec(0.8, 0.64) == pytest.approx(0.711, abs=1e-3)

    def test_wound_row(self):
        assert f1_sens_spec(0.93, 0.75) == pytest.approx(0.830, abs=1e-3)

    def test_reported_rows_consistent(self):
        for name, (sens, spec, printed) in REPORTED_ROWS.items():
            assert abs(f1_sens_spec(sens, spec) - printed) <= 0.01, name

    def test_perfect_classifier(self):
        row = metric_row(ConfusionCounts(tp=5, fp=0, tn=5, fn=0), "x")
        assert row.accuracy == 1.0
        assert row.sensitivity == 1.0
        assert row.specificity == 1.0
        assert row.f1 == 1.0

    def test_zero_positives_undefined_sensitivity(self):
        row = metric_row(ConfusionCounts(tp=0, fp=1, tn=3, fn=0), "x")
        assert row.sensitivity is None
        assert row.f1 is None
        assert row.specificity == 0.75

    def test_f1_zero_when_both_rates_zero(self):
        row = metric_row(ConfusionCounts(tp=0, fp=2, tn=0, fn=2), "x")
        assert row.sensitivity == 0.0
        assert row.specificity == 0.0
        assert row.f1 == 0.0

    def test_empty_sample(self):
        with pytest.raises(EmptySample):
            metric_row(ConfusionCounts(0, 0, 0, 0))

    def test_accuracy_formula(self):
        row = metric_row(ConfusionCounts(tp=3, fp=2, tn=4, fn=1), "x")
        assert row.accuracy == pytest.approx(7 / 10)


class TestRocCurve:
    def test_perfect_separation(self):
        curve = roc_curve([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
        assert curve.auc == pytest.approx(1.0)

    def test_example_three_quarters(self):
        curve = roc_curve([0.1, 0.4, 0.35, 0.8], [False, False, True, True])
        assert curve.auc == pytest.approx(0.75)

    def test_endpoints(self, rng):
        scores = rng.random(30)
        truth = rng.integers(0, 2, 30).astype(bool)
        truth[0], truth[1] = True, False
        curve = roc_curve(scores.tolist(), truth.tolist())
        assert tuple(curve.points[0]) == (0.0, 0.0)
        assert tuple(curve.points[-1]) == (1.0, 1.0)
        assert np.all(np.diff(curve.points[:, 0]) >= 0)
        assert np.all(np.diff(curve.points[:, 1]) >= 0)

    def test_matches_pairwise_statistic(self, rng):
        for trial in range(100):
            n = int(rng.integers(4, 51))
            # discretized scores so ties occur regularly
            scores = np.round(rng.random(n), 1).tolist()
            truth = rng.integers(0, 2, n).astype(bool)
            if truth.all() or not truth.any():
                truth[0] = ~truth[0]
            curve = roc_curve(scores, truth.tolist())
            assert curve.auc == pytest.approx(
                pairwise_auc(scores, truth.tolist()), abs=1e-9
            )

    def test_monotone_transform_invariance(self, rng):
        scores = rng.random(40)
        truth = rng.integers(0, 2, 40).astype(bool)
        truth[:2] = [True, False]
        a = roc_curve(scores.tolist(), truth.tolist())
        b = roc_curve(np.exp(3 * scores).tolist(), truth.tolist())
        assert a.auc == pytest.approx(b.auc, abs=1e-12)
        assert np.allclose(a.points, b.points)

    def test_inverted_scores_complement(self, rng):
        scores = rng.permutation(50) / 50.0  # distinct, no ties
        truth = (rng.random(50) > 0.5).astype(bool)
        truth[:2] = [True, False]
        a = roc_curve(scores.tolist(), truth.tolist())
        b = roc_curve((1 - scores).tolist(), truth.tolist())
        assert a.auc == pytest.approx(1 - b.auc, abs=1e-12)

    def test_degenerate_truth(self):
        with pytest.raises(DegenerateTruth):
            roc_curve([0.1, 0.2], [True, True])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            roc_curve([0.1], [True, False])


class _LinearProbe(torch.nn.Module):
    """Single dense layer over flattened pixels, in float64 so the
    finite-difference oracle is not drowned by rounding noise."""

    def __init__(self, size: int):
        super().__init__()
        torch.manual_seed(3)
        self.size = size
        self.linear = torch.nn.Linear(size * size * 3, 9, dtype=torch.float64)

    def forward_logits(self, x):
        return self.linear(torch.flatten(x, 1))

    def forward(self, x):
        return torch.sigmoid(self.forward_logits(x))


def _linear_handle(size=16):
    return ModelHandle(
        net=_LinearProbe(size),
        variant=ModelVariant("A", 6),
        weights_provenance="random-init",
        preprocessing_tag=PREPROCESSING_TAG,
        input_size=size,
    )


class TestSaliency:
    def test_shape_and_range(self, rng):
        handle = build_model(VARIANTS["A"], input_size=32, pretrained=False)
        img = RawImage(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
        smap = saliency_map(handle, to_model_input(img, 32), label_index=2)
        assert smap.shape == (32, 32)
        assert smap.min() >= 0.0 and smap.max() <= 1.0
        assert smap.max() == pytest.approx(1.0)

    def test_constant_model_gives_zero_map(self, rng):
        from conftest import stub_member

        handle = stub_member("A", 6, [0.5] * 9)
        img = RawImage(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
        smap = saliency_map(handle, to_model_input(img, 32), label_index=0)
        assert np.array_equal(smap, np.zeros((32, 32)))

    def test_matches_finite_differences(self, rng):
        handle = _linear_handle(16)
        img = RawImage(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        mi = to_model_input(img, 16)
        label = 4
        smap = saliency_map(handle, mi, label)

        def score(data):
            x = torch.from_numpy(data.astype(np.float64)).permute(2, 0, 1)
            with torch.no_grad():
                return float(handle.net.forward_logits(x.unsqueeze(0))[0, label])

        h = 1e-3
        grad = np.zeros((16, 16, 3))
        for y in range(16):
            for x in range(16):
                for c in range(3):
                    plus = mi.data.copy()
                    minus = mi.data.copy()
                    plus[y, x, c] += h
                    minus[y, x, c] -= h
                    grad[y, x, c] = (score(plus) - score(minus)) / (2 * h)
        fd_map = np.abs(grad).max(axis=2)
        fd_map = (fd_map - fd_map.min()) / (fd_map.max() - fd_map.min())
        mask = fd_map > 1e-3
        rel = np.abs(smap[mask] - fd_map[mask]) / fd_map[mask]
        assert rel.max() < 1e-3

    def test_deterministic(self, rng):
        handle = build_model(VARIANTS["B"], input_size=32, pretrained=False)
        img = RawImage(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
        mi = to_model_input(img, 32)
        assert np.array_equal(
            saliency_map(handle, mi, 1), saliency_map(handle, mi, 1)
        )

    def test_label_index_validation(self, rng):
        handle = _linear_handle(16)
        img = RawImage(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            saliency_map(handle, to_model_input(img, 16), 9)

    def test_shape_mismatch(self, rng):
        handle = _linear_handle(16)
        img = RawImage(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
        with pytest.raises(ShapeMismatch):
            saliency_map(handle, to_model_input(img, 32), 0)

    def test_exports(self, rng, tmp_path):
        smap = rng.random((16, 16))
        gray = saliency_to_image(smap)
        assert gray.size == (16, 16) and gray.mode == "L"
        pixels = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        overlay = blend_saliency(smap, pixels)
        assert overlay.size == (16, 16) and overlay.mode == "RGB"


class TestEvaluateEnsemble:
    def _entries_with_labels(self, tmp_path, labels_per_entry):
        entries = write_image_entries(tmp_path, len(labels_per_entry), size=32)
        return [
            ManifestEntry(e.image_path, LabelVector.from_ints(bits))
            for e, bits in zip(entries, labels_per_entry)
        ]

    def test_hand_tallied_counts(self, tmp_path):
        # fixed stub probabilities: labels 0-4 decided positive, 5-8 negative
        probs = [0.9, 0.8, 0.7, 0.6, 0.55, 0.45, 0.3, 0.2, 0.1]
        bundle = stub_bundle(probs, probs, probs)
        truth_rows = [
            [1, 0, 1, 0, 1, 0, 1, 0, 1],
            [0, 1, 0, 1, 0, 1, 0, 1, 0],
            [1, 1, 0, 0, 1, 1, 0, 0, 1],
            [0, 0, 1, 1, 0, 0, 1, 1, 0],
        ]
        entries = self._entries_with_labels(tmp_path, truth_rows)
        result = evaluate_ensemble(bundle, entries)
        truth = np.array(truth_rows, dtype=bool)
        for j, name in enumerate(LABELS):
            ev = result.labels[name]
            decided_positive = probs[j] >= 0.5
            pos = int(truth[:, j].sum())
            neg = 4 - pos
            if decided_positive:
                assert (ev.counts.tp, ev.counts.fp) == (pos, neg)
                assert ev.counts.fn == ev.counts.tn == 0
            else:
                assert (ev.counts.fn, ev.counts.tn) == (pos, neg)
                assert ev.counts.tp == ev.counts.fp == 0
            # constant scores: every positive/negative pair is tied
            assert ev.roc is not None
            assert ev.roc.auc == pytest.approx(0.5)

    def test_always_correct_ensemble(self, tmp_path):
        """Brightness-keyed members: bright images positive for every
        label, dark images negative; labels assigned the same way."""

        class BrightnessNet(torch.nn.Module):
            def forward_logits(self, x):
                return (x.mean(dim=(1, 2, 3)) * 400).unsqueeze(1).expand(-1, 9)

            def forward(self, x):
                return torch.sigmoid(self.forward_logits(x))

        members = []
        for vid, fz in (("A", 6), ("B", 10), ("C", 14)):
            members.append(
                ModelHandle(
                    net=BrightnessNet(),
                    variant=ModelVariant(vid, fz),
                    weights_provenance="random-init",
                    preprocessing_tag=PREPROCESSING_TAG,
                    input_size=32,
                )
            )
        from woundcare.ensemble import EnsembleBundle
        from PIL import Image

        bundle = EnsembleBundle(members=tuple(members), version="bright")
        entries = []
        for i in range(6):
            bright = i % 2 == 0
            value = 230 if bright else 20
            pixels = np.full((32, 32, 3), value, dtype=np.uint8)
            path = tmp_path / f"b{i}.png"
            Image.fromarray(pixels, mode="RGB").save(path)
            entries.append(
                ManifestEntry(str(path), LabelVector.from_ints([int(bright)] * 9))
            )
        result = evaluate_ensemble(bundle, entries)
        for name in LABELS:
            assert result.labels[name].row.accuracy == 1.0
            assert result.labels[name].roc.auc == pytest.approx(1.0)

    def test_single_class_label_isolated(self, tmp_path):
        probs = [0.9] * 9
        bundle = stub_bundle(probs, probs, probs)
        rows = [[1] + [i % 2] * 8 for i in range(4)]  # first label always 1
        entries = self._entries_with_labels(tmp_path, rows)
        result = evaluate_ensemble(bundle, entries)
        assert result.labels["wound"].roc is None
        assert result.labels["wound"].degenerate_reason
        assert result.labels["infection"].roc is not None

    def test_empty_validation(self):
        bundle = stub_bundle([0.6] * 9, [0.6] * 9, [0.6] * 9)
        with pytest.raises(EmptySample):
            evaluate_ensemble(bundle, [])

    def test_write_evaluation(self, tmp_path):
        probs = [0.9, 0.8, 0.7, 0.6, 0.55, 0.45, 0.3, 0.2, 0.1]
        bundle = stub_bundle(probs, probs, probs)
        rows = [[1, 0, 1, 0, 1, 0, 1, 0, 1], [0, 1, 0, 1, 0, 1, 0, 1, 0]]
        entries = self._entries_with_labels(tmp_path, rows)
        result = evaluate_ensemble(bundle, entries)
        out = tmp_path / "report"
        write_evaluation(result, out)
        summary = json.loads((out / "metrics.json").read_text())
        assert len(summary) == 9
        assert {"label", "tp", "fp", "tn", "fn", "accuracy", "auc"} <= set(summary[0])
        assert (out / "roc_wound.csv").read_text().startswith("fpr,tpr")
