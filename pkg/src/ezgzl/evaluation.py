"""Generalized zero-shot evaluation: mean class accuracy over seen and
unseen test samples, their harmonic mean, the unseen-restricted ZSL
accuracy, and the confusion matrix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .avla import batch_scores, label_space_mask
from .store import TEST

__all__ = [
    "EvalReport",
    "mean_class_accuracy",
    "harmonic_mean",
    "confusion_matrix",
    "evaluate",
    "report_to_json",
    "render_report",
]


@dataclass
class EvalReport:
    seen_acc: float
    unseen_acc: float
    harmonic_mean: float
    zsl_acc: float
    per_class_acc: dict
    confusion: np.ndarray
    config_digest: str


def harmonic_mean(s, u):
    """2SU/(S+U), defined as 0 when both accuracies vanish."""
    if s < 0 or u < 0:
        raise ValueError("accuracies must be non-negative")
    if s + u == 0:
        return 0.0
    return 2.0 * s * u / (s + u)


def mean_class_accuracy(predictions, truths, class_subset):
    """Unweighted mean over classes (with at least one sample) of per-class
    accuracy, in percent.  Classes without samples are excluded."""
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape:
        raise ValueError("predictions and truths must have equal length")
    subset = sorted(int(c) for c in class_subset)
    if not subset:
        raise ValueError("class subset is empty")
    accs = []
    for c in subset:
        mask = truths == c
        if not mask.any():
            continue
        accs.append(float((predictions[mask] == c).mean()) * 100.0)
    if not accs:
        raise ValueError("no samples for any class in the subset")
    return float(np.mean(accs))


def confusion_matrix(predictions, truths, n_classes):
    """Counts indexed (true class, predicted class)."""
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    for name, arr in (("predictions", predictions), ("truths", truths)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} contain out-of-range labels")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (truths, predictions), 1)
    return out


def evaluate(model, bank, dataset, split, use_initial=False, config_digest=""):
    """Full GZSL/ZSL report on the test partition.

    Seen/unseen accuracies use the full label space; ZSL accuracy restricts
    predictions to unseen classes on unseen-class samples.
    """
    test_mask = dataset.rows(TEST)
    if not np.any(test_mask):
        raise ValueError("test partition is empty")
    visual = dataset.visual[test_mask]
    audio = dataset.audio[test_mask]
    truths = dataset.labels[test_mask]
    n_classes = bank.n_classes

    scores = batch_scores(model, bank, visual, audio, use_initial=use_initial)
    preds_all = np.argmax(scores, axis=1)
    unseen_mask_cls = label_space_mask(n_classes, "unseen_only", split)
    preds_unseen_space = np.argmax(
        np.where(unseen_mask_cls[None, :], scores, -np.inf), axis=1
    )

    sample_seen = np.isin(truths, sorted(split.seen))
    sample_unseen = ~sample_seen
    seen_acc = mean_class_accuracy(preds_all[sample_seen], truths[sample_seen], split.seen)
    unseen_acc = mean_class_accuracy(
        preds_all[sample_unseen], truths[sample_unseen], split.unseen
    )
    zsl_acc = mean_class_accuracy(
        preds_unseen_space[sample_unseen], truths[sample_unseen], split.unseen
    )
    per_class = {}
    for c in range(n_classes):
        mask = truths == c
        if mask.any():
            per_class[bank.class_names[c]] = float(
                (preds_all[mask] == c).mean() * 100.0
            )
    return EvalReport(
        seen_acc=seen_acc,
        unseen_acc=unseen_acc,
        harmonic_mean=harmonic_mean(seen_acc, unseen_acc),
        zsl_acc=zsl_acc,
        per_class_acc=per_class,
        confusion=confusion_matrix(preds_all, truths, n_classes),
        config_digest=config_digest,
    )


def settings_digest(settings):
    """Stable hash of a JSON-serializable settings mapping."""
    blob = json.dumps(settings, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def report_to_json(report):
    """Deterministic JSON rendering (stable key order, exact floats)."""
    payload = {
        "seen_acc": report.seen_acc,
        "unseen_acc": report.unseen_acc,
        "harmonic_mean": report.harmonic_mean,
        "zsl_acc": report.zsl_acc,
        "per_class_acc": {k: report.per_class_acc[k] for k in sorted(report.per_class_acc)},
        "confusion": report.confusion.tolist(),
        "config_digest": report.config_digest,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def render_report(report):
    """Aligned text table: Seen / Unseen / Harmonic Mean / ZSL."""
    headers = ("Seen", "Unseen", "Harmonic Mean", "ZSL")
    values = (
        f"{report.seen_acc:.2f}",
        f"{report.unseen_acc:.2f}",
        f"{report.harmonic_mean:.2f}",
        f"{report.zsl_acc:.2f}",
    )
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    return "\n".join(
        (
            "  ".join(h.rjust(w) for h, w in zip(headers, widths)),
            "  ".join("-" * w for w in widths),
            "  ".join(v.rjust(w) for v, w in zip(values, widths)),
        )
    )


def render_confusion(report, class_names):
    """Confusion counts as an aligned text matrix (rows = true class)."""
    conf = report.confusion
    width = max(
        max((len(n) for n in class_names), default=4),
        len(str(int(conf.max()))) if conf.size else 1,
    )
    width = min(width, 18)
    lines = [
        " ".join(["true\\pred".ljust(width)] + [n[:width].rjust(width) for n in class_names])
    ]
    for i, name in enumerate(class_names):
        row = [name[:width].ljust(width)] + [
            str(int(conf[i, j])).rjust(width) for j in range(len(class_names))
        ]
        lines.append(" ".join(row))
    return "\n".join(lines)
