"""Classifier heads, the joint loss, and naive-Bayes fusion of head votes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Rng, ShapeError, Tensor

N_HEADS = 4
CE_FLOOR = 1e-12


@dataclass(frozen=True)
class MarginParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.m_minus < self.m_plus < 1.0:
            raise ValueError("margins must satisfy 0 < m_minus < m_plus < 1")
        if self.lam <= 0.0:
            raise ValueError("lambda must be positive")


@dataclass
class Dense:
    W: Tensor  # (in, out)
    b: Tensor  # (out,)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: Rng, prefix: str):
        s = 1.0 / math.sqrt(n_in)
        return cls(T.parameter(rng.uniform(-s, s, (n_in, n_out)), f"{prefix}.W"),
                   T.parameter(np.zeros(n_out), f"{prefix}.b"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.W.shape[0]:
            raise ShapeError(f"dense layer {self.W.name}: expects (B, {self.W.shape[0]}), got {x.shape}")
        y = T.matmul(x, self.W)
        return T.add(y, T.expand(self.b, y.shape))

    def parameters(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}


def softmax_head(features, layers: list[Dense]) -> Tensor:
    """Dense layers with tanh between them, then a softmax over classes."""
    x = T.constant(features)
    for layer in layers[:-1]:
        x = T.tanh(layer(x))
    return T.softmax(layers[-1](x))


@dataclass
class HeadOutputs:
    p_tp: Tensor  # temporal head
    p_st: Tensor  # spatio-temporal head
    p_pc: Tensor  # relationship head
    v_digit: Tensor  # (B, n, 16) digit capsules


def cross_entropy(probs, labels) -> Tensor:
    """Per-sample ``-log p[label]`` with the probability clamped at 1e-12."""
    probs = T.constant(probs)
    labels = np.asarray(labels, dtype=np.int64)
    picked = T.index(probs, (np.arange(len(labels)), labels))
    return T.affine(T.log(picked, CE_FLOOR), -1.0)


def _targets(labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    onehot = np.zeros((len(labels), n))
    onehot[np.arange(len(labels)), labels] = 1.0
    return onehot


def margin_loss(v, labels, mp: MarginParams = MarginParams()) -> Tensor:
    """Per-sample two-sided hinge on capsule lengths; v is (B, n, d)."""
    v = T.constant(v)
    onehot = _targets(labels, v.shape[1])
    lengths = T.norm(v, axis=-1)
    present = T.square(T.hinge(T.affine(lengths, -1.0, mp.m_plus)))
    absent = T.square(T.hinge(T.affine(lengths, 1.0, -mp.m_minus)))
    terms = T.add(T.mul(T.constant(onehot), present),
                  T.affine(T.mul(T.constant(1.0 - onehot), absent), mp.lam))
    return T.sum(terms, axis=1)


@dataclass
class JointLoss:
    total: Tensor  # scalar, batch mean
    l_tp: Tensor
    l_st: Tensor
    l_pc: Tensor
    l_dc: Tensor

    def parts(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_tp", "l_st", "l_pc", "l_dc", "total")}


def joint_loss(heads: HeadOutputs, labels, mp: MarginParams = MarginParams()) -> JointLoss:
    """Three cross-entropies plus the margin loss, each averaged over the batch."""
    l_tp = T.mean(cross_entropy(heads.p_tp, labels))
    l_st = T.mean(cross_entropy(heads.p_st, labels))
    l_pc = T.mean(cross_entropy(heads.p_pc, labels))
    l_dc = T.mean(margin_loss(heads.v_digit, labels, mp))
    total = T.add(T.add(l_tp, l_st), T.add(l_pc, l_dc))
    return JointLoss(total, l_tp, l_st, l_pc, l_dc)


def digit_class(v) -> np.ndarray:
    """Index of the longest capsule per sample (first on ties)."""
    vd = v.data if isinstance(v, Tensor) else np.asarray(v)
    return np.argmax(np.sqrt((vd * vd).sum(axis=-1)), axis=-1)


def head_votes(heads: HeadOutputs) -> np.ndarray:
    """(B, 4) hard labels: temporal, spatio-temporal, relationship, digit."""
    return np.stack([heads.p_tp.data.argmax(axis=1), heads.p_st.data.argmax(axis=1),
                     heads.p_pc.data.argmax(axis=1), digit_class(heads.v_digit)], axis=1)


# --------------------------------------------------------------------------
# naive Bayes over head votes


@dataclass
class BayesModel:
    prior: np.ndarray  # (n,)
    conditionals: np.ndarray  # (heads, n_classes, n_labels): P(x_k = l | c)
    alpha: float

    @property
    def n_classes(self) -> int:
        return len(self.prior)


def bayes_fit(votes, labels, n_classes: int, alpha: float = 1.0) -> BayesModel:
    """Smoothed class prior and per-head vote tables, heads assumed independent."""
    votes = np.asarray(votes, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if votes.size == 0:
        raise ValueError("bayes_fit needs at least one vote")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if votes.ndim != 2 or len(votes) != len(labels):
        raise ShapeError(f"votes {votes.shape} and labels {labels.shape} disagree")
    if votes.min() < 0 or votes.max() >= n_classes or labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"votes and labels must lie in [0, {n_classes})")
    n_heads = votes.shape[1]
    class_counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    prior = (class_counts + alpha) / (len(labels) + n_classes * alpha)
    counts = np.zeros((n_heads, n_classes, n_classes))
    for k in range(n_heads):
        np.add.at(counts[k], (labels, votes[:, k]), 1.0)
    cond = (counts + alpha) / (class_counts[None, :, None] + n_classes * alpha)
    return BayesModel(prior, cond, float(alpha))


def bayes_posterior(m: BayesModel, votes) -> np.ndarray:
    """Posterior over classes for each row of ``votes`` (M, heads)."""
    votes = np.atleast_2d(np.asarray(votes, dtype=np.int64))
    if votes.min() < 0 or votes.max() >= m.conditionals.shape[2]:
        raise ValueError("vote label out of range")
    scores = np.repeat(m.prior[None, :], len(votes), axis=0)
    for k in range(votes.shape[1]):
        scores = scores * m.conditionals[k][:, votes[:, k]].T
    return scores / scores.sum(axis=1, keepdims=True)


def bayes_predict(m: BayesModel, x) -> tuple[int, np.ndarray]:
    post = bayes_posterior(m, x)[0]
    return int(np.argmax(post)), post
