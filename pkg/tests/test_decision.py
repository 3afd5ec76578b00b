import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astcaps import tensor as T
from astcaps.decision import (BayesModel, Dense, HeadOutputs, MarginParams, bayes_fit, bayes_posterior,
                              bayes_predict, cross_entropy, digit_class, head_votes, joint_loss, margin_loss,
                              softmax_head)
from astcaps.tensor import Rng, ShapeError


def caps_with_norms(norms, d=16, rng=None):
    rng = rng or Rng(0)
    dirs = rng.normal(1, (len(norms), d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return (dirs * np.asarray(norms)[:, None])[None]


def margin_ref(norms, label, mp):
    total = 0.0
    for c, n in enumerate(norms):
        if c == label:
            total += max(0.0, mp.m_plus - n) ** 2
        else:
            total += mp.lam * max(0.0, n - mp.m_minus) ** 2
    return total


# -- heads ----------------------------------------------------------------

def test_zero_weight_head_is_uniform():
    layer = Dense(T.tensor(np.zeros((5, 4))), T.tensor(np.zeros(4)))
    assert np.allclose(softmax_head(Rng(0).normal(1, (3, 5)), [layer]).data, 0.25, rtol=0, atol=1e-16)


def test_head_argmax():
    layer = Dense(T.tensor(np.eye(3)), T.tensor(np.zeros(3)))
    assert softmax_head(np.array([[10.0, 0.0, 0.0]]), [layer]).data.argmax() == 0


def test_head_matmul_softmax_oracle():
    rng = Rng(1)
    layers = [Dense.init(6, 5, rng, "a"), Dense.init(5, 3, rng, "b")]
    for layer in layers:
        layer.b.data += rng.normal(0.5, layer.b.shape)
    x = rng.normal(1, (4, 6))
    h = np.tanh(x @ layers[0].W.data + layers[0].b.data)
    z = h @ layers[1].W.data + layers[1].b.data
    ref = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    out = softmax_head(x, layers).data
    assert np.allclose(out, ref, rtol=0, atol=1e-15)
    assert np.abs(out.sum(axis=1) - 1).max() <= 1e-12


def test_head_shape_error():
    with pytest.raises(ShapeError):
        softmax_head(np.zeros((2, 4)), [Dense.init(5, 3, Rng(0), "h")])


# -- margin loss ----------------------------------------------------------

def test_margin_params_validation():
    with pytest.raises(ValueError):
        MarginParams(0.1, 0.9, 0.5)
    with pytest.raises(ValueError):
        MarginParams(lam=0.0)


def test_margin_inactive():
    v = caps_with_norms([0.95, 0.05, 0.05])
    assert margin_loss(v, [0], MarginParams(0.9, 0.1, 0.5)).data.tolist() == [0.0]


def test_margin_single_hinge():
    v = np.zeros((1, 3, 16))
    assert margin_loss(v, [1]).data[0] == pytest.approx(0.81, abs=1e-15)


def test_margin_scalar_oracle():
    mp = MarginParams()
    for seed in range(100):
        rng = Rng(seed)
        norms = rng.uniform(0, 1, 4)
        label = int(rng.choice(4, 1)[0])
        v = caps_with_norms(norms, rng=rng)
        got = margin_loss(v, [label], mp).data[0]
        assert abs(got - margin_ref(np.linalg.norm(v[0], axis=1), label, mp)) <= 1e-10


@settings(max_examples=100)
@given(st.lists(st.floats(0, 0.999), min_size=3, max_size=3), st.floats(0, 0.5), st.integers(0, 2))
def test_margin_monotone(norms, bump, label):
    base = margin_loss(caps_with_norms(norms), [label]).data[0]
    up_label = list(norms)
    up_label[label] = min(norms[label] + bump, 0.999)
    assert margin_loss(caps_with_norms(up_label), [label]).data[0] <= base + 1e-15
    other = (label + 1) % 3
    up_other = list(norms)
    up_other[other] = norms[other] + bump
    assert margin_loss(caps_with_norms(up_other), [label]).data[0] >= base - 1e-15


# -- joint loss -----------------------------------------------------------

def _heads(p, norms, n):
    P = T.tensor(np.atleast_2d(p))
    return HeadOutputs(P, P, P, T.tensor(caps_with_norms(norms, d=4)))


def test_joint_loss_zero_when_perfect():
    loss = joint_loss(_heads(np.eye(3)[1], [0.05, 0.95, 0.0], 3), [1])
    assert loss.total.item() == 0.0


def test_joint_loss_uniform_heads():
    loss = joint_loss(_heads(np.full(4, 0.25), [0.0, 0.95, 0.0, 0.0], 4), [1])
    for part in (loss.l_tp, loss.l_st, loss.l_pc):
        assert part.item() == pytest.approx(math.log(4), abs=1e-15)
    assert loss.l_dc.item() == 0.0


def test_joint_loss_sum_of_parts():
    rng = Rng(2)
    probs = [T.softmax(T.tensor(rng.normal(1, (5, 3)))) for _ in range(3)]
    v = T.tensor(rng.uniform(-0.4, 0.4, (5, 3, 4)))
    y = np.array([0, 1, 2, 1, 0])
    loss = joint_loss(HeadOutputs(*probs, v), y)
    ref = sum(float(np.mean(-np.log(p.data[np.arange(5), y]))) for p in probs)
    norms = np.linalg.norm(v.data, axis=-1)
    ref += np.mean([margin_ref(norms[i], y[i], MarginParams()) for i in range(5)])
    assert abs(loss.total.item() - ref) <= 1e-12
    assert set(loss.parts()) == {"l_tp", "l_st", "l_pc", "l_dc", "total"}


def test_cross_entropy_clamped():
    ce = cross_entropy(T.tensor([[1.0, 0.0]]), [1]).data[0]
    assert ce == pytest.approx(-math.log(1e-12))


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_joint_loss_nonnegative(seed):
    rng = Rng(seed)
    probs = [T.softmax(T.tensor(rng.normal(3, (2, 3)))) for _ in range(3)]
    v = T.tensor(rng.uniform(-0.5, 0.5, (2, 3, 4)))
    assert joint_loss(HeadOutputs(*probs, v), [0, 2]).total.item() >= 0


# -- digit class ----------------------------------------------------------

def test_digit_class_examples():
    assert digit_class(caps_with_norms([0.1, 0.9])).tolist() == [1]
    assert digit_class(np.ones((1, 3, 4))).tolist() == [0]


def test_digit_class_norm_scan():
    for seed in range(100):
        v = Rng(seed).normal(1, (1, 5, 16))
        norms = [math.sqrt(sum(x * x for x in row)) for row in v[0].tolist()]
        best = max(range(5), key=lambda c: (norms[c], -c))
        assert digit_class(v)[0] == best


def test_head_votes_columns():
    p = T.tensor(np.array([[0.1, 0.9], [0.8, 0.2]]))
    v = T.tensor(caps_with_norms([0.9, 0.1], d=4)[0][None].repeat(2, axis=0))
    assert head_votes(HeadOutputs(p, p, p, v)).tolist() == [[1, 1, 1, 0], [0, 0, 0, 0]]


# -- naive Bayes ----------------------------------------------------------

def bayes_counts_ref(votes, labels, n, alpha):
    prior = [(sum(1 for y in labels if y == c) + alpha) / (len(labels) + n * alpha) for c in range(n)]
    cond = np.zeros((len(votes[0]), n, n))
    for k in range(len(votes[0])):
        for c in range(n):
            rows = [v for v, y in zip(votes, labels) if y == c]
            for ell in range(n):
                cond[k, c, ell] = (sum(1 for v in rows if v[k] == ell) + alpha) / (len(rows) + n * alpha)
    return np.array(prior), cond


def test_bayes_fit_matches_counting():
    for seed in range(100):
        rng = Rng(seed)
        votes = np.floor(rng.uniform(0, 3, (20, 4))).astype(int)
        labels = np.floor(rng.uniform(0, 3, 20)).astype(int)
        m = bayes_fit(votes, labels, 3, 1.0)
        prior, cond = bayes_counts_ref(votes.tolist(), labels.tolist(), 3, 1.0)
        assert np.abs(m.prior - prior).max() <= 1e-15
        assert np.abs(m.conditionals - cond).max() <= 1e-15
        assert np.allclose(m.conditionals.sum(axis=2), 1.0, rtol=0, atol=1e-12)
        assert (m.conditionals > 0).all()


def test_bayes_predict_hand_product():
    for seed in range(100):
        rng = Rng(1000 + seed)
        votes = np.floor(rng.uniform(0, 3, (20, 4))).astype(int)
        labels = np.floor(rng.uniform(0, 3, 20)).astype(int)
        m = bayes_fit(votes, labels, 3)
        x = np.floor(rng.uniform(0, 3, 4)).astype(int)
        scores = [m.prior[c] * math.prod(m.conditionals[k, c, x[k]] for k in range(4)) for c in range(3)]
        z = sum(scores)
        cls, post = bayes_predict(m, x)
        assert np.abs(post - np.array(scores) / z).max() <= 1e-15
        assert cls == max(range(3), key=lambda c: (scores[c], -c))
        assert abs(post.sum() - 1) <= 1e-12


def test_bayes_perfect_heads():
    labels = np.array([0, 1, 2, 0, 1, 2, 2])
    votes = np.repeat(labels[:, None], 4, axis=1)
    m = bayes_fit(votes, labels, 3)
    assert all(bayes_predict(m, v)[0] == y for v, y in zip(votes, labels))
    assert (bayes_posterior(m, votes).argmax(axis=1) == labels).mean() == 1.0


def test_bayes_single_class():
    m = bayes_fit(np.zeros((5, 4), dtype=int), np.zeros(5, dtype=int), 1)
    assert bayes_predict(m, [0, 0, 0, 0])[1].tolist() == [1.0]


def test_bayes_uniform_model():
    m = BayesModel(np.full(3, 1 / 3), np.full((4, 3, 3), 1 / 3), 1.0)
    assert np.allclose(bayes_predict(m, [0, 1, 2, 0])[1], 1 / 3)
    assert bayes_predict(m, [0, 1, 2, 0])[0] == 0  # tie -> lowest index


def test_bayes_scale_invariance():
    rng = Rng(5)
    votes = np.floor(rng.uniform(0, 3, (30, 4))).astype(int)
    m = bayes_fit(votes, votes[:, 0], 3)
    scaled = BayesModel(m.prior * 7.0, m.conditionals * 3.0, m.alpha)
    for x in itertools.product(range(3), repeat=4):
        assert bayes_predict(m, x)[0] == bayes_predict(scaled, x)[0]


def test_bayes_errors():
    with pytest.raises(ValueError):
        bayes_fit(np.zeros((0, 4), dtype=int), np.zeros(0, dtype=int), 3)
    with pytest.raises(ValueError):
        bayes_fit(np.zeros((2, 4), dtype=int), np.zeros(2, dtype=int), 3, alpha=0)
