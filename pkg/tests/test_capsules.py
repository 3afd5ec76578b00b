import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astcaps import tensor as T
from astcaps.capsules import (CapsWeights, lift_capsules, predict_vectors, relationship_matrices, route,
                              squash)
from astcaps.tensor import Rng, ShapeError, grad_check


def squash_ref(s):
    n2 = sum(v * v for v in s)
    if n2 == 0:
        return [0.0] * len(s)
    n = math.sqrt(n2)
    return [n2 / (1 + n2) * (v / n) for v in s]


def routing_ref(u, iterations):
    """Hand-scripted schedule for one sample: u is (P, J, d) nested lists."""
    P, J, d = len(u), len(u[0]), len(u[0][0])
    b = [[0.0] * J for _ in range(P)]
    for it in range(iterations):
        c = []
        for i in range(P):
            m = max(b[i])
            e = [math.exp(x - m) for x in b[i]]
            z = sum(e)
            c.append([x / z for x in e])
        v = []
        for j in range(J):
            s = [sum(c[i][j] * u[i][j][k] for i in range(P)) for k in range(d)]
            v.append(squash_ref(s))
        if it < iterations - 1:
            for i in range(P):
                for j in range(J):
                    b[i][j] += sum(u[i][j][k] * v[j][k] for k in range(d))
    return v, c


def caps_weights(W):
    return CapsWeights(T.tensor(W))


# -- predict_vectors ------------------------------------------------------

def test_predict_identity_weights():
    g = Rng(0).normal(1, (2, 3, 4))
    W = np.broadcast_to(np.eye(4), (3, 2, 4, 4)).copy()
    pred = predict_vectors(g, caps_weights(W)).data
    for j in range(2):
        assert np.array_equal(pred[:, :, j], g)


def test_predict_zero_input():
    W = CapsWeights.init(3, 2, 5, 4, Rng(0))
    assert np.all(predict_vectors(np.zeros((1, 3, 4)), W).data == 0)


def test_predict_matmul_oracle():
    for seed in range(100):
        rng = Rng(seed)
        g, W = rng.normal(1, (1, 2, 2)), rng.normal(1, (2, 2, 2, 2))
        pred = predict_vectors(g, caps_weights(W)).data
        for i in range(2):
            for j in range(2):
                assert np.allclose(pred[0, i, j], W[i, j] @ g[0, i], rtol=0, atol=1e-15)


def test_predict_linear():
    rng = Rng(1)
    W = CapsWeights.init(3, 2, 4, 5, rng)
    a, b = rng.normal(1, (1, 3, 5)), rng.normal(1, (1, 3, 5))
    lhs = predict_vectors(2 * a - 3 * b, W).data
    rhs = 2 * predict_vectors(a, W).data - 3 * predict_vectors(b, W).data
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-14)


def test_predict_shape_error():
    with pytest.raises(ShapeError):
        predict_vectors(np.zeros((1, 4, 4)), CapsWeights.init(3, 2, 5, 4, Rng(0)))


def test_caps_weight_init_range():
    W = CapsWeights.init(32, 4, 16, 8, Rng(0)).W.data
    assert W.shape == (32, 4, 16, 8) and np.abs(W).max() <= 0.05


# -- squash ---------------------------------------------------------------

def test_squash_examples():
    assert squash(T.tensor(np.zeros(4))).data.tolist() == [0.0] * 4
    v = squash(T.tensor([0.6, 0.8])).data
    assert np.linalg.norm(v) == pytest.approx(0.5, abs=1e-16)
    assert np.allclose(squash(T.tensor([3.0, 4.0])).data, [25 / 26 * 0.6, 25 / 26 * 0.8], rtol=0, atol=1e-15)
    assert np.allclose(squash(T.tensor([3.0, 4.0])).data, [0.576923076923, 0.769230769231], atol=1e-12)


@settings(max_examples=200)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=16))
def test_squash_properties(s):
    s = np.array(s)
    v = squash(T.tensor(s)).data
    assert np.linalg.norm(v) < 1
    # collinear: every 2x2 minor of [v; s] vanishes
    ns = np.linalg.norm(s)
    cross = np.abs(np.outer(v, s) - np.outer(s, v)).max()
    assert cross <= 1e-10 * max(ns, 1e-300)
    assert np.allclose(v, squash_ref(s.tolist()), rtol=1e-12, atol=1e-300)


def test_squash_length_monotone():
    d = Rng(2).normal(1, 5)
    d /= np.linalg.norm(d)
    lengths = [np.linalg.norm(squash(T.tensor(r * d)).data) for r in np.linspace(0, 50, 200)]
    assert all(b > a for a, b in zip(lengths, lengths[1:]))


# -- routing --------------------------------------------------------------

def test_route_first_iteration_uniform():
    u = Rng(3).normal(1, (2, 5, 3, 4))
    _, state = route(u, 1)
    assert np.allclose(state.c, 1 / 3, rtol=0, atol=1e-16)


def test_route_single_capsule():
    u = Rng(4).normal(1, (1, 1, 1, 4))
    for it in (1, 2, 5):
        v, state = route(u, it)
        assert np.array_equal(state.c, np.ones((1, 1, 1)))
        assert np.allclose(v.data[0, 0], squash_ref(u[0, 0, 0].tolist()), rtol=0, atol=1e-15)


def test_route_matches_scripted_schedule():
    for seed in range(100):
        u = Rng(seed).normal(1, (1, 2, 2, 2))
        v, state = route(u, 3)
        v_ref, c_ref = routing_ref(u[0].tolist(), 3)
        assert np.abs(v.data[0] - np.array(v_ref)).max() <= 1e-10
        assert np.abs(state.c[0] - np.array(c_ref)).max() <= 1e-10


def test_route_rejects_zero_iterations():
    with pytest.raises(ValueError):
        route(np.zeros((1, 2, 2, 2)), 0)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_route_rows_are_distributions_and_equivariant(seed, iterations):
    rng = Rng(seed)
    u = rng.normal(1, (1, 4, 3, 5))
    v, state = route(u, iterations)
    assert np.all(state.c >= 0) and np.abs(state.c.sum(axis=-1) - 1).max() <= 1e-12
    perm_i, perm_j = rng.permutation(4), rng.permutation(3)
    v_i, _ = route(u[:, perm_i], iterations)
    assert np.allclose(v_i.data, v.data, rtol=0, atol=1e-12)
    v_j, _ = route(u[:, :, perm_j], iterations)
    assert np.allclose(v_j.data, v.data[:, perm_j], rtol=0, atol=1e-12)


def test_route_gradient_stops_at_couplings():
    rng = Rng(5)
    pred = T.parameter(rng.normal(1, (1, 3, 2, 4)), "pred")
    v, state = route(pred, 3)
    g = T.backward(T.sum(v))["pred"]
    # with constant couplings: d sum(v_j) / d pred[i, j] = c_ij * J_squash(s_j)^T 1
    s = np.einsum("bij,bijd->bjd", state.c, pred.data)
    sj = T.parameter(s, "s")
    gs = T.backward(T.sum(T.squash(sj)))["s"]
    assert np.allclose(g, state.c[..., None] * gs[:, None], rtol=0, atol=1e-15)


def test_digit_path_gradient_toy():
    rng = Rng(6)
    g = T.parameter(np.tanh(rng.normal(1, (2, 4, 8))), "g")
    W = CapsWeights(T.parameter(rng.normal(0.5, (4, 3, 4, 8)), "W"))
    R = T.constant(rng.normal(1, (2, 3, 4)))
    _, state = route(predict_vectors(g, W), 2)
    err = grad_check(lambda: T.sum(T.mul(route(predict_vectors(g, W), 2, couplings=state.c)[0], R)),
                     {"g": g, "W": W.W})
    assert err < 1e-4


# -- relationship layer ---------------------------------------------------

def well_conditioned(rng, n=3):
    """Random n x n matrix with singular values in [1, 3]."""
    q1, _ = np.linalg.qr(rng.normal(1, (n, n)))
    q2, _ = np.linalg.qr(rng.normal(1, (n, n)))
    return q1 @ np.diag(rng.uniform(1, 3, n)) @ q2


def test_relationship_identity_right_factor():
    rng = Rng(7)
    Gi = rng.normal(1, (3, 3))
    G = np.stack([Gi, np.eye(3)])[None]
    R = relationship_matrices(G).data[0, 0]
    assert np.abs(R - Gi).max() < 1e-5


def test_relationship_self():
    Gi = well_conditioned(Rng(8))
    R = relationship_matrices(np.stack([Gi, Gi])[None]).data[0, 0]
    assert np.abs(R - np.eye(3)).max() < 1e-5


def test_relationship_residual_against_lstsq():
    for seed in range(100):
        rng = Rng(seed)
        A = well_conditioned(rng)
        B = rng.normal(1, (3, 3))
        R = relationship_matrices(np.stack([B, A])[None]).data[0, 0]
        # dense oracle: R A = B  <=>  A^T R^T = B^T
        R_ls = np.linalg.lstsq(A.T, B.T, rcond=None)[0].T
        res = np.linalg.norm(R @ A - B)
        # the ridge term leaves |B| * ridge / sigma_min(A)^2 behind
        assert res / np.linalg.norm(B) < 1e-6
        assert res <= np.linalg.norm(R_ls @ A - B) + 1e-4


def test_relationship_shapes_and_lift():
    u = Rng(9).normal(1, (2, 5, 8))
    G = lift_capsules(u, 1.0).data
    assert np.allclose(G[1, 2], np.outer(u[1, 2], u[1, 2]) + np.eye(8))
    assert relationship_matrices(G).shape == (2, 4, 8, 8)
    with pytest.raises(ShapeError):
        relationship_matrices(G[:, :1])


def test_relationship_gradient():
    u = T.parameter(Rng(10).normal(0.5, (1, 3, 4)), "u")
    R = T.constant(Rng(11).normal(1, (1, 2, 4, 4)))
    assert grad_check(lambda: T.sum(T.mul(relationship_matrices(lift_capsules(u)), R)), {"u": u}) < 1e-5
