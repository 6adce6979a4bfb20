"""Evaluation: per-label confusion metrics, ROC/AUC, and saliency maps.

The F1 here is the harmonic mean of sensitivity and specificity (not
the precision/recall F1); ``f1_sens_spec`` names it internally to keep
the distinction visible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .dataset import LABELS, ManifestEntry
from .ensemble import EnsembleBundle, assess
from .errors import DegenerateTruth, EmptySample, LengthMismatch, ShapeMismatch
from .imaging import ClaheConfig, ModelInput, decode_image
from .network import ModelHandle


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def all_positive(self) -> int:
        return self.tp + self.fn

    @property
    def all_negative(self) -> int:
        return self.tn + self.fp


@dataclass(frozen=True)
class MetricsRow:
    """Per-label scores; sensitivity/specificity are None when undefined
    (no positives / no negatives in the sample)."""

    label: str
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    f1: float | None


@dataclass(frozen=True)
class RocCurve:
    """Threshold-swept (fpr, tpr) points from (0,0) to (1,1), plus AUC."""

    points: np.ndarray
    auc: float


def confusion(decisions: Sequence[bool], truth: Sequence[bool]) -> ConfusionCounts:
    if len(decisions) != len(truth):
        raise LengthMismatch(
            f"decisions ({len(decisions)}) and truth ({len(truth)}) differ in length"
        )
    tp = fp = tn = fn = 0
    for d, t in zip(decisions, truth):
        if t:
            if d:
                tp += 1
            else:
                fn += 1
        else:
            if d:
                fp += 1
            else:
                tn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def f1_sens_spec(sensitivity: float, specificity: float) -> float:
    """Harmonic mean of sensitivity and specificity; 0 when both are 0."""
    denom = sensitivity + specificity
    if denom == 0:
        return 0.0
    return 2.0 * sensitivity * specificity / denom


def metric_row(counts: ConfusionCounts, label: str = "") -> MetricsRow:
    if counts.total == 0:
        raise EmptySample("metrics require at least one sample")
    accuracy = (counts.tp + counts.tn) / counts.total
    sensitivity = counts.tp / counts.all_positive if counts.all_positive else None
    specificity = counts.tn / counts.all_negative if counts.all_negative else None
    if sensitivity is None or specificity is None:
        f1 = None
    else:
        f1 = f1_sens_spec(sensitivity, specificity)
    return MetricsRow(
        label=label,
        accuracy=accuracy,
        sensitivity=sensitivity,
        specificity=specificity,
        f1=f1,
    )


def roc_curve(scores: Sequence[float], truth: Sequence[bool]) -> RocCurve:
    """Sweep thresholds over the distinct scores; AUC by trapezoidal rule.

    Tied scores collapse into a single threshold, which makes the
    trapezoidal area equal the tie-adjusted pairwise rank statistic.
    """
    if len(scores) != len(truth):
        raise LengthMismatch(
            f"scores ({len(scores)}) and truth ({len(truth)}) differ in length"
        )
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray([bool(v) for v in truth])
    n_pos = int(t.sum())
    n_neg = len(t) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateTruth("ROC needs at least one positive and one negative")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    t_sorted = t[order]
    cum_tp = np.cumsum(t_sorted)
    cum_fp = np.cumsum(~t_sorted)
    # last index of each run of tied scores
    boundary = np.nonzero(np.diff(s_sorted))[0]
    last = np.r_[boundary, len(s_sorted) - 1]
    tpr = np.r_[0.0, cum_tp[last] / n_pos]
    fpr = np.r_[0.0, cum_fp[last] / n_neg]
    points = np.column_stack([fpr, tpr])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(points=points, auc=auc)


def saliency_map(
    handle: ModelHandle, model_input: ModelInput, label_index: int
) -> np.ndarray:
    """Input-gradient magnitude map for one label, min-max scaled to [0, 1].

    Gradients are taken on the pre-sigmoid score (the sigmoid's
    gradient saturates); per pixel the maximum absolute gradient over
    the three channels is kept. An identically-zero gradient yields a
    uniform zero map.
    """
    if not 0 <= label_index < len(LABELS):
        raise ValueError(f"label_index must be in [0, {len(LABELS)}), got {label_index}")
    if model_input.data.shape != (handle.input_size, handle.input_size, 3):
        raise ShapeMismatch(
            f"expected {handle.input_size}x{handle.input_size}x3 input, "
            f"got {model_input.data.shape}"
        )
    net = handle.net
    net.eval()
    params = list(net.parameters())
    dtype = params[0].dtype if params else torch.float32
    x = torch.from_numpy(np.asarray(model_input.data, dtype=np.float64))
    x = x.permute(2, 0, 1).unsqueeze(0).to(dtype).requires_grad_(True)
    score = net.forward_logits(x)[0, label_index]
    side = handle.input_size
    if score.grad_fn is None:
        # output does not depend on the input at all
        return np.zeros((side, side))
    score.backward()
    if x.grad is None:
        return np.zeros((side, side))
    grad = x.grad.detach()[0].abs().amax(dim=0).numpy().astype(np.float64)
    lo, hi = grad.min(), grad.max()
    if hi <= lo:
        return np.zeros_like(grad)
    return (grad - lo) / (hi - lo)


def saliency_to_image(saliency: np.ndarray) -> Image.Image:
    """8-bit grayscale rendering of a [0, 1] saliency map."""
    return Image.fromarray(np.rint(saliency * 255).astype(np.uint8), mode="L")


def blend_saliency(saliency: np.ndarray, pixels: np.ndarray, alpha: float = 0.6) -> Image.Image:
    """Overlay the map as a red heat layer on the source image."""
    base = pixels.astype(np.float64)
    heat = np.zeros_like(base)
    heat[..., 0] = saliency * 255.0
    blended = np.clip((1 - alpha * saliency[..., None]) * base + alpha * saliency[..., None] * heat, 0, 255)
    return Image.fromarray(blended.astype(np.uint8), mode="RGB")


@dataclass
class LabelEvaluation:
    row: MetricsRow
    counts: ConfusionCounts
    roc: RocCurve | None
    degenerate_reason: str | None = None


@dataclass
class EvaluationResult:
    """Per-label metric rows and ROC curves for a validation manifest."""

    labels: dict[str, LabelEvaluation]

    def rows(self) -> list[MetricsRow]:
        return [ev.row for ev in self.labels.values()]


def evaluate_ensemble(
    bundle: EnsembleBundle,
    validation: Sequence[ManifestEntry],
    clahe: ClaheConfig | None = None,
) -> EvaluationResult:
    """Assess every validation image; vote decisions feed the confusion
    metrics and mean probabilities feed the ROC curves."""
    if not validation:
        raise EmptySample("validation set is empty")
    decisions = np.zeros((len(validation), len(LABELS)), dtype=bool)
    scores = np.zeros((len(validation), len(LABELS)), dtype=np.float64)
    truth = np.zeros((len(validation), len(LABELS)), dtype=bool)
    for i, entry in enumerate(validation):
        img = decode_image(Path(entry.image_path).read_bytes())
        assessment = assess(bundle, img, clahe)
        decisions[i] = assessment.decisions()
        scores[i] = assessment.mean_probabilities()
        truth[i] = list(entry.labels)

    labels: dict[str, LabelEvaluation] = {}
    for j, name in enumerate(LABELS):
        counts = confusion(decisions[:, j].tolist(), truth[:, j].tolist())
        row = metric_row(counts, label=name)
        try:
            roc = roc_curve(scores[:, j].tolist(), truth[:, j].tolist())
            reason = None
        except DegenerateTruth as exc:
            roc = None
            reason = str(exc)
        labels[name] = LabelEvaluation(
            row=row, counts=counts, roc=roc, degenerate_reason=reason
        )
    return EvaluationResult(labels=labels)


def write_evaluation(result: EvaluationResult, out_dir: str | Path) -> None:
    """Serialize the report: metrics.json plus one ROC point list per label."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for name, ev in result.labels.items():
        summary.append(
            {
                "label": name,
                "tp": ev.counts.tp,
                "fp": ev.counts.fp,
                "tn": ev.counts.tn,
                "fn": ev.counts.fn,
                "accuracy": ev.row.accuracy,
                "sensitivity": ev.row.sensitivity,
                "specificity": ev.row.specificity,
                "f1": ev.row.f1,
                "auc": None if ev.roc is None else ev.roc.auc,
                "roc_degenerate": ev.degenerate_reason,
            }
        )
        if ev.roc is not None:
            lines = ["fpr,tpr"]
            lines += [f"{fpr:.6f},{tpr:.6f}" for fpr, tpr in ev.roc.points]
            (out_dir / f"roc_{name}.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "metrics.json").write_text(json.dumps(summary, indent=2))
