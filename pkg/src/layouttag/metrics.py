"""Token-classification metrics: per-class precision/recall/F1 with macro and
support-weighted aggregates over the 10-class label set, plus full-corpus
evaluation of a trained model."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ingest import corpus_sequences
from .labels import LABEL_ORDER, N_CLASSES
from .model import make_batches, mask_modality

__all__ = [
    "ClassMetrics",
    "MetricsReport",
    "MetricsError",
    "confusion_counts",
    "metrics_from_counts",
    "evaluate",
]


class MetricsError(ValueError):
    """Metrics cannot be computed from the given inputs."""


@dataclass(frozen=True)
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    """Per-class and aggregate scores for one evaluation pass."""

    per_class: tuple[ClassMetrics, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    total_support: int
    zero_denominator_classes: tuple[str, ...]

    def class_metrics(self, label: str) -> ClassMetrics:
        for cm in self.per_class:
            if cm.label == label:
                return cm
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "per_class": [
                {
                    "label": c.label,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "support": c.support,
                }
                for c in self.per_class
            ],
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "weighted": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1": self.weighted_f1,
            },
            "accuracy": self.accuracy,
            "total_support": self.total_support,
            "zero_denominator_classes": list(self.zero_denominator_classes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        """Aligned text table: Precision, Recall, F1 score, Support."""
        name_w = max(len("Weighted Average"), max(len(c.label) for c in self.per_class))
        header = f"{'':<{name_w}}  {'Precision':>9}  {'Recall':>9}  {'F1 score':>9}  {'Support':>9}"
        lines = [header]
        for c in self.per_class:
            lines.append(
                f"{c.label:<{name_w}}  {c.precision:>9.4f}  {c.recall:>9.4f}"
                f"  {c.f1:>9.4f}  {c.support:>9d}"
            )
        lines.append(
            f"{'Accuracy':<{name_w}}  {'':>9}  {'':>9}  {self.accuracy:>9.4f}"
            f"  {self.total_support:>9d}"
        )
        lines.append(
            f"{'Macro Average':<{name_w}}  {self.macro_precision:>9.4f}"
            f"  {self.macro_recall:>9.4f}  {self.macro_f1:>9.4f}  {self.total_support:>9d}"
        )
        lines.append(
            f"{'Weighted Average':<{name_w}}  {self.weighted_precision:>9.4f}"
            f"  {self.weighted_recall:>9.4f}  {self.weighted_f1:>9.4f}  {self.total_support:>9d}"
        )
        if self.zero_denominator_classes:
            lines.append(
                "zero-denominator convention applied to: "
                + ", ".join(self.zero_denominator_classes)
            )
        return "\n".join(lines)


def confusion_counts(predictions, gold, loss_mask) -> np.ndarray:
    """Count matrix [n_classes, n_classes]: rows gold, columns predicted.

    Only positions with a true loss_mask are counted; inputs may have any
    common shape.
    """
    predictions = np.asarray(predictions)
    gold = np.asarray(gold)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if predictions.shape != gold.shape or predictions.shape != loss_mask.shape:
        raise MetricsError(
            f"shape mismatch: predictions {predictions.shape}, gold {gold.shape}, "
            f"mask {loss_mask.shape}"
        )
    p = predictions[loss_mask].ravel()
    g = gold[loss_mask].ravel()
    if p.size and (p.min() < 0 or p.max() >= N_CLASSES or g.min() < 0 or g.max() >= N_CLASSES):
        raise MetricsError(f"class index outside [0, {N_CLASSES})")
    counts = np.bincount(g * N_CLASSES + p, minlength=N_CLASSES * N_CLASSES)
    return counts.reshape(N_CLASSES, N_CLASSES).astype(np.int64)


def metrics_from_counts(counts) -> MetricsReport:
    """Scores from a confusion matrix; zero-denominator ratios score 0 and
    the affected classes are flagged in the report."""
    counts = np.asarray(counts)
    if counts.shape != (N_CLASSES, N_CLASSES):
        raise MetricsError(f"counts must be [{N_CLASSES}, {N_CLASSES}], got {counts.shape}")
    if np.any(counts < 0):
        raise MetricsError("negative counts")
    total = int(counts.sum())
    if total == 0:
        raise MetricsError("empty confusion matrix: nothing was evaluated")

    supports = counts.sum(axis=1)  # gold totals per class
    predicted = counts.sum(axis=0)
    tp = np.diag(counts)

    per_class = []
    flagged = []
    for c, label in enumerate(LABEL_ORDER):
        denom_p = int(predicted[c])
        denom_r = int(supports[c])
        precision = tp[c] / denom_p if denom_p else 0.0
        recall = tp[c] / denom_r if denom_r else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if denom_p == 0 or denom_r == 0 or precision + recall == 0:
            flagged.append(label.value)
        per_class.append(
            ClassMetrics(
                label=label.value,
                precision=float(precision),
                recall=float(recall),
                f1=float(f1),
                support=int(denom_r),
            )
        )

    precisions = np.array([c.precision for c in per_class])
    recalls = np.array([c.recall for c in per_class])
    f1s = np.array([c.f1 for c in per_class])
    weights = supports / total
    return MetricsReport(
        per_class=tuple(per_class),
        macro_precision=float(precisions.mean()),
        macro_recall=float(recalls.mean()),
        macro_f1=float(f1s.mean()),
        weighted_precision=float((weights * precisions).sum()),
        weighted_recall=float((weights * recalls).sum()),
        weighted_f1=float((weights * f1s).sum()),
        accuracy=float(np.trace(counts) / total),
        total_support=total,
        zero_denominator_classes=tuple(flagged),
    )


def evaluate(model, vocab, corpus, modality_mode: str = "full", batch_size: int = 32) -> MetricsReport:
    """Deterministic full pass over a corpus: argmax decoding (ties -> lowest
    class index), positions aggregated across every window of every page."""
    sequences = corpus_sequences(corpus, vocab, model.config.L)
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for batch in make_batches(sequences, corpus.rasters, model.config, batch_size):
        batch = mask_modality(batch, modality_mode)
        pred = model.predict(batch)
        counts += confusion_counts(pred, batch.labels, batch.loss_mask)
    return metrics_from_counts(counts)
