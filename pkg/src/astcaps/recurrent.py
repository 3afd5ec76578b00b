"""Gated recurrent cells: the temporary-state memory cell and a plain GRU.

All step functions are batch-first: states are (B, hidden) and inputs are
(B, input). The concatenation fed to every gate is ``[O_prev, x]``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Rng, ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class GruBaselineParams:
    W_z: Tensor
    W_r: Tensor
    W: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, hidden: int, input_size: int, rng: Rng, prefix: str = "cell"):
        return cls(**_init_gates(hidden, input_size, rng, prefix, with_ctemp=False))

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (getattr(self, f.name) for f in fields(self))}

    @property
    def hidden(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1] - self.hidden


@dataclass
class MemoryCellParams(GruBaselineParams):
    W_ctemp: Tensor = None
    b_ctemp: Tensor = None

    @classmethod
    def init(cls, hidden: int, input_size: int, rng: Rng, prefix: str = "cell"):
        return cls(**_init_gates(hidden, input_size, rng, prefix, with_ctemp=True))


def _init_gates(hidden, input_size, rng, prefix, with_ctemp):
    # Shared gates are drawn first so a GRU and a memory cell built from the
    # same seed agree on every weight they have in common.
    s = 1.0 / math.sqrt(hidden + input_size)
    shape = (hidden, hidden + input_size)
    out = {}
    names = ["W_z", "W_r", "W"] + (["W_ctemp"] if with_ctemp else [])
    for n in names:
        out[n] = T.parameter(rng.uniform(-s, s, shape), f"{prefix}.{n}")
    for n in ["b_z", "b_r", "b_h"] + (["b_ctemp"] if with_ctemp else []):
        out[n] = T.parameter(np.zeros(hidden), f"{prefix}.{n}")
    return out


@dataclass
class MemoryState:
    """One step of the cell. For the baseline GRU ``ctemp`` is None and O == c."""

    O: Tensor
    c: Tensor
    z: Tensor
    r: Tensor
    h_tilde: Tensor
    ctemp: Tensor | None = None


def _gate(W: Tensor, b: Tensor, inp: Tensor, kind: str) -> Tensor:
    pre = T.matmul(inp, T.transpose(W))
    return T.activation(T.add(pre, T.expand(b, pre.shape)), kind)


def _check_dims(p: GruBaselineParams, O_prev: Tensor, x: Tensor):
    if O_prev.ndim != 2 or x.ndim != 2 or O_prev.shape[0] != x.shape[0]:
        raise ShapeError(f"cell step: expected batch-first 2-D state and input, got {O_prev.shape} and {x.shape}")
    if O_prev.shape[1] != p.hidden or x.shape[1] != p.input_size:
        raise ShapeError(
            f"cell step: params are hidden={p.hidden}, input={p.input_size}; "
            f"got state {O_prev.shape} and input {x.shape}")


def _gru_core(p: GruBaselineParams, O_prev: Tensor, x: Tensor):
    joint = T.concat([O_prev, x], axis=1)
    z = _gate(p.W_z, p.b_z, joint, "sigmoid")
    r = _gate(p.W_r, p.b_r, joint, "sigmoid")
    h_tilde = _gate(p.W, p.b_h, T.concat([T.mul(r, O_prev), x], axis=1), "tanh")
    c = T.add(T.mul(T.affine(z, -1.0, 1.0), h_tilde), T.mul(z, O_prev))
    return joint, z, r, h_tilde, c


def memory_cell_step(p: MemoryCellParams, O_prev: Tensor, x: Tensor) -> MemoryState:
    """Advance the memory cell one step.

    The GRU state ``c`` is gated by ``sigmoid(ctemp)``, where ``ctemp`` is a
    tanh projection of the same ``[O_prev, x]`` input.
    """
    O_prev, x = T.constant(O_prev), T.constant(x)
    _check_dims(p, O_prev, x)
    joint, z, r, h_tilde, c = _gru_core(p, O_prev, x)
    ctemp = _gate(p.W_ctemp, p.b_ctemp, joint, "tanh")
    O = T.mul(c, T.sigmoid(ctemp))
    return MemoryState(O=O, c=c, z=z, r=r, h_tilde=h_tilde, ctemp=ctemp)


def gru_cell_step(p: GruBaselineParams, O_prev: Tensor, x: Tensor) -> Tensor:
    return _gru_state(p, O_prev, x).O


def _gru_state(p, O_prev, x) -> MemoryState:
    O_prev, x = T.constant(O_prev), T.constant(x)
    _check_dims(p, O_prev, x)
    _, z, r, h_tilde, c = _gru_core(p, O_prev, x)
    return MemoryState(O=c, c=c, z=z, r=r, h_tilde=h_tilde)


def unroll(p: GruBaselineParams, x_seq: Tensor, O_0: Tensor | None = None,
           dropout_rate: float = 0.0, rng: Rng | None = None,
           training: bool = False) -> tuple[Tensor, list[MemoryState]]:
    """Run a cell over ``x_seq`` of shape (B, T, input).

    The cell kind follows the params type. In training mode an inverted-dropout
    mask is applied to the hidden output handed from one step to the next; the
    returned final output is never masked.
    """
    x_seq = T.constant(x_seq)
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    if x_seq.ndim != 3 or x_seq.shape[1] == 0:
        raise ShapeError(f"unroll: expected non-empty (B, T, input) sequence, got {x_seq.shape}")
    batch, steps, _ = x_seq.shape
    step = memory_cell_step if isinstance(p, MemoryCellParams) else _gru_state
    O = T.constant(np.zeros((batch, p.hidden))) if O_0 is None else T.constant(O_0)
    use_mask = training and dropout_rate > 0.0
    if use_mask and rng is None:
        raise ValueError("training with dropout needs an rng")
    states = []
    for t in range(steps):
        state = step(p, O, T.index(x_seq, (slice(None), t)))
        states.append(state)
        O = state.O
        if use_mask and t < steps - 1:
            keep = rng.bernoulli(1.0 - dropout_rate, O.shape) / (1.0 - dropout_rate)
            O = T.mul(O, T.constant(keep))
    return states[-1].O, states


# --------------------------------------------------------------------------
# convergence comparison against the plain GRU


@dataclass
class RaceResult:
    seed: int
    curves: dict[str, list[tuple[int, float, float]]]  # kind -> (epoch, loss, acc)
    epochs_to_threshold: dict[str, int | None]


def _race_loss(params, head_W, head_b, x_seq, labels):
    O_T, _ = unroll(params, x_seq)
    logits = T.matmul(O_T, head_W)
    probs = T.softmax(T.add(logits, T.expand(head_b, logits.shape)))
    picked = T.index(probs, (np.arange(len(labels)), labels))
    return T.mean(T.affine(T.log(picked), -1.0)), probs


def _run_one_cell(kind, x_seq, labels, n_classes, hidden, seed, epochs, batch_size, lr):
    from .optim import Adam

    rng = Rng(seed)
    cls = MemoryCellParams if kind == "memory" else GruBaselineParams
    params = cls.init(hidden, x_seq.shape[2], rng, prefix="cell")
    # head is drawn from its own stream so both cells share it exactly
    head_rng = Rng(seed + 1)
    s = 1.0 / math.sqrt(hidden)
    head_W = T.parameter(head_rng.uniform(-s, s, (hidden, n_classes)), "head.W")
    head_b = T.parameter(np.zeros(n_classes), "head.b")
    named = {**params.parameters(), "head.W": head_W, "head.b": head_b}
    opt = Adam(named, lr=lr)
    shuffle = Rng(seed + 2)

    def measure():
        loss, probs = _race_loss(params, head_W, head_b, T.constant(x_seq), labels)
        acc = float((probs.data.argmax(axis=1) == labels).mean())
        return loss.item(), acc

    curve = [(0, *measure())]
    n = len(labels)
    for epoch in range(1, epochs + 1):
        order = shuffle.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, _ = _race_loss(params, head_W, head_b, T.constant(x_seq[idx]), labels[idx])
            opt.step(T.backward(loss, named))
        curve.append((epoch, *measure()))
    return curve


def epochs_to_threshold(curve: Sequence[tuple[int, float, float]], threshold: float) -> int | None:
    for epoch, loss, _ in curve:
        if loss <= threshold:
            return epoch
    return None


def convergence_race(x_seq: np.ndarray, labels: np.ndarray, n_classes: int, seeds: Sequence[int],
                     epochs: int = 60, hidden: int = 16, batch_size: int = 32, lr: float = 0.001,
                     threshold: float = 0.1, kinds: Sequence[str] = ("memory", "gru"),
                     out_dir: str | Path | None = None) -> list[RaceResult]:
    """Train a memory cell and a plain GRU on the same sequences, per seed.

    ``x_seq`` is (M, T, input). Each cell feeds its last output into a
    softmax head trained with cross-entropy and Adam. Epoch 0 is measured
    before any update. When ``out_dir`` is set a ``race_<seed>.csv`` is
    written per seed. Passing ``kinds=("memory", "memory")`` runs the control.
    """
    labels = np.asarray(labels, dtype=np.int64)
    results = []
    for seed in seeds:
        curves = {}
        for i, kind in enumerate(kinds):
            if kind not in ("memory", "gru"):
                raise ValueError(f"unknown cell kind {kind!r}")
            key = kind if kind not in curves else f"{kind}_{i}"
            curves[key] = _run_one_cell(kind, x_seq, labels, n_classes, hidden, seed,
                                        epochs, batch_size, lr)
        reached = {k: epochs_to_threshold(c, threshold) for k, c in curves.items()}
        log.info("race seed %d: epochs to loss %.3g %s", seed, threshold, reached)
        results.append(RaceResult(seed, curves, reached))
        if out_dir is not None:
            write_race_csv(Path(out_dir) / f"race_{seed}.csv", curves)
    return results


def write_race_csv(path: Path, curves: dict[str, list[tuple[int, float, float]]]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "cell_kind", "train_loss", "train_acc"])
        for kind, curve in curves.items():
            for epoch, loss, acc in curve:
                w.writerow([epoch, kind, repr(loss), repr(acc)])
