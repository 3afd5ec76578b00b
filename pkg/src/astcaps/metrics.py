"""Evaluation: per-head and fused accuracy, confusion matrix, one-vs-rest ROC."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SampleWindow
from .decision import head_votes
from .model import ASTCapsNet

HEAD_NAMES = ("softmax1_temporal", "softmax2_spatiotemporal", "softmax3_relationship", "softmax4_digit")
FEATURE_LAYERS = ("low_level", "high_level", "relationship", "digit")


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray]:
    """ROC points for a score threshold sweep, tied scores forming one step.

    Starts at (0, 0) and ends at (1, 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(p)[cut]
    fps = (cut + 1) - tps
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


def auc(fpr, tpr) -> float:
    """Trapezoid-rule area under a ROC curve."""
    fpr, tpr = np.asarray(fpr), np.asarray(tpr)
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def confusion_matrix(y_true, y_pred, n: int) -> np.ndarray:
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


@dataclass
class MetricsReport:
    accuracy: dict[str, float]
    confusion: np.ndarray
    auc_per_class: list[float | None]
    auc_micro: float
    loss_parts: dict[str, float]
    n_test: int
    roc: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "n_test": self.n_test,
            "accuracy": self.accuracy,
            "auc_per_class": self.auc_per_class,
            "auc_micro": self.auc_micro,
            "loss_parts": self.loss_parts,
            "confusion": self.confusion.tolist(),
        }


def _batches(model: ASTCapsNet, X, y, batch_size):
    for i in range(0, len(X), batch_size):
        fwd = model.forward(X[i:i + batch_size])
        yield fwd, model.loss(fwd, y[i:i + batch_size]), len(fwd.O_T.data)


def evaluate(model: ASTCapsNet, windows: Sequence[SampleWindow], batch_size: int = 256) -> MetricsReport:
    if not windows:
        raise ValueError("cannot evaluate on an empty test set")
    n = model.config.n_classes
    X = np.stack([w.features for w in windows])
    y = np.array([w.label for w in windows], dtype=np.int64)
    votes, parts = [], dict.fromkeys(("l_tp", "l_st", "l_pc", "l_dc", "total"), 0.0)
    for fwd, loss, size in _batches(model, X, y, batch_size):
        votes.append(head_votes(fwd.heads))
        for k, v in loss.parts().items():
            parts[k] += v * size / len(X)
    votes = np.concatenate(votes)
    fused, posterior = model.fused(votes)
    accuracy = {name: float((votes[:, k] == y).mean()) for k, name in enumerate(HEAD_NAMES)}
    accuracy["bayes_fused"] = float((fused == y).mean())
    roc, per_class = {}, []
    for c in range(n):
        positive = y == c
        if positive.all() or not positive.any():
            per_class.append(None)
            continue
        fpr, tpr = roc_curve(posterior[:, c], positive)
        roc[str(c)] = (fpr, tpr)
        per_class.append(auc(fpr, tpr))
    onehot = np.eye(n, dtype=bool)[y]
    fpr, tpr = roc_curve(posterior.ravel(), onehot.ravel())
    roc["micro"] = (fpr, tpr)
    return MetricsReport(accuracy, confusion_matrix(y, fused, n), per_class, auc(fpr, tpr),
                         parts, len(windows), roc)


def write_metrics(report: MetricsReport, out_dir: str | Path, class_names: Sequence[str] | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    n = len(report.confusion)
    names = list(class_names) if class_names else [str(i) for i in range(n)]
    with open(out_dir / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + names)
        for name, row in zip(names, report.confusion):
            w.writerow([name] + row.tolist())
    for key, (fpr, tpr) in report.roc.items():
        with open(out_dir / f"roc_{key}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr"])
            w.writerows(zip(map(repr, fpr.tolist()), map(repr, tpr.tolist())))


def layer_features(model: ASTCapsNet, X: np.ndarray, tag: str) -> np.ndarray:
    if tag not in FEATURE_LAYERS:
        raise ValueError(f"unknown feature layer {tag!r}; choose from {', '.join(FEATURE_LAYERS)}")
    fwd = model.forward(X)
    t = {"low_level": fwd.g, "high_level": fwd.primary,
         "relationship": fwd.relationships, "digit": fwd.heads.v_digit}[tag]
    return t.data.reshape(len(X), -1)


def export_features(model: ASTCapsNet, windows: Sequence[SampleWindow], tag: str,
                    path: str | Path, batch_size: int = 256) -> Path:
    """CSV with one row per window: label, then the flattened layer activations."""
    if tag not in FEATURE_LAYERS:
        raise ValueError(f"unknown feature layer {tag!r}; choose from {', '.join(FEATURE_LAYERS)}")
    X = np.stack([w.features for w in windows])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        first = True
        for i in range(0, len(X), batch_size):
            feats = layer_features(model, X[i:i + batch_size], tag)
            if first:
                w.writerow(["label"] + [f"f{j}" for j in range(feats.shape[1])])
                first = False
            for win, row in zip(windows[i:i + batch_size], feats):
                w.writerow([win.label] + [repr(float(v)) for v in row])
    return path
