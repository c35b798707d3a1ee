"""Accuracy and quadratically weighted Cohen's kappa."""

from __future__ import annotations

import numpy as np


def _check_pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=int).ravel()
    ref = np.asarray(ref, dtype=int).ravel()
    if pred.size == 0:
        raise ValueError("metrics require at least one sample")
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {ref.size} references")
    return pred, ref


def accuracy(pred, ref) -> float:
    pred, ref = _check_pair(pred, ref)
    return float(np.mean(pred == ref))


def confusion_matrix(pred, ref, num_classes: int) -> np.ndarray:
    """Rows are reference labels, columns predictions."""
    pred, ref = _check_pair(pred, ref)
    if pred.min() < 0 or ref.min() < 0 or pred.max() >= num_classes or ref.max() >= num_classes:
        raise ValueError(f"label out of range: labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (ref, pred), 1)
    return counts


def quadratic_kappa(pred, ref, num_classes: int) -> float:
    if num_classes < 2:
        raise ValueError("quadratic kappa needs at least 2 classes")
    counts = confusion_matrix(pred, ref, num_classes)
    observed = counts / counts.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    idx = np.arange(num_classes)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (num_classes - 1) ** 2
    num = float((weights * observed).sum())
    den = float((weights * expected).sum())
    if den == 0:
        return 1.0 if num == 0 else 0.0
    return 1.0 - num / den


def per_class_accuracy(pred, ref, num_classes: int) -> list[float | None]:
    """Recall per reference class; None for classes absent from ``ref``."""
    counts = confusion_matrix(pred, ref, num_classes)
    support = counts.sum(axis=1)
    return [float(counts[k, k] / support[k]) if support[k] else None for k in range(num_classes)]


def predict(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    from . import tensor as T
    from .backbone import forward_with_features

    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            rec = forward_with_features(model, images[start:start + batch_size])
            out.append(rec.logits.data.argmax(axis=1))
    return np.concatenate(out)


def evaluate_arrays(model, images: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    pred = predict(model, images)
    return {
        "accuracy": accuracy(pred, labels),
        "kappa": quadratic_kappa(pred, labels, num_classes),
        "per_class": per_class_accuracy(pred, labels, num_classes),
    }


def evaluate_split(model, manifest, split: str, magnification: int = 1) -> tuple[float, float, list]:
    """(accuracy, kappa, per-class accuracy) on a split, inputs degraded, no augmentation."""
    from .data import degrade

    images, labels = manifest.arrays(split)
    res = evaluate_arrays(model, degrade(images, magnification), labels, manifest.num_classes)
    return res["accuracy"], res["kappa"], res["per_class"]
