"""Mini-batch training of the joint loss, followed by fitting the Bayes layer."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import SampleWindow
from .decision import bayes_fit, digit_class, head_votes
from .model import ASTCapsNet
from .optim import Adam
from .tensor import Rng

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "l_tp", "l_st", "l_pc", "l_dc", "total", "acc")


@dataclass
class TrainResult:
    model: ASTCapsNet
    curve: list[dict[str, float]] = field(default_factory=list)
    optimizer: Adam | None = None


def stack(windows: Sequence[SampleWindow]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([w.features for w in windows]),
            np.array([w.label for w in windows], dtype=np.int64))


def collect_votes(model: ASTCapsNet, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([model.votes(X[i:i + batch_size]) for i in range(0, len(X), batch_size)])


def train(model: ASTCapsNet, windows: Sequence[SampleWindow], epochs: int, batch_size: int,
          rng: Rng, lr: float = 0.001, bayes_alpha: float = 1.0,
          on_epoch: Callable[[dict[str, float]], None] | None = None) -> TrainResult:
    """Train on ``windows`` and fit the Bayes layer on the resulting head votes.

    ``rng`` drives shuffling and dropout only; initialisation happened when the
    model was built. Each curve row holds the epoch means of the four loss
    parts, the total, and the digit-capsule accuracy seen during the epoch.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    if not windows:
        raise ValueError("no training windows")
    if batch_size < 1 or batch_size > len(windows):
        raise ValueError(f"batch_size {batch_size} must be between 1 and the training size {len(windows)}")
    X, y = stack(windows)
    params = model.parameters()
    opt = Adam(params, lr=lr)
    curve = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(X))
        sums = dict.fromkeys(CURVE_COLUMNS[1:], 0.0)
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            fwd = model.forward(X[idx], training=True, rng=rng)
            loss = model.loss(fwd, y[idx])
            opt.step(T.backward(loss.total, params))
            w = len(idx) / len(X)
            for k, v in loss.parts().items():
                sums[k] += w * v
            sums["acc"] += w * float((digit_class(fwd.heads.v_digit) == y[idx]).mean())
        row = {"epoch": epoch, **sums}
        curve.append(row)
        if on_epoch is not None:
            on_epoch(row)
    if epochs > 0:
        model.bayes = bayes_fit(collect_votes(model, X), y, model.config.n_classes, bayes_alpha)
    return TrainResult(model, curve, opt)


def write_curve(path: str | Path, curve: Sequence[dict[str, float]]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in CURVE_COLUMNS[1:]])

