"""Layer-by-layer finite-difference checks on a toy configuration.

Every check reduces a layer output to a scalar with a fixed random weighting
``sum(out * R)`` so all coordinates carry a gradient of order one.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .capsules import CapsWeights, lift_capsules, predict_vectors, relationship_matrices, route
from .decision import Dense, HeadOutputs, MarginParams, joint_loss, margin_loss, softmax_head
from .model import ASTCapsNet, ModelConfig
from .recurrent import GruBaselineParams, MemoryCellParams, gru_cell_step, memory_cell_step, unroll
from .spatiotemporal import ConvParams, FusionParams, conv_feature_map, fuse_spatiotemporal, primary_capsule_projection
from .tensor import Rng, grad_check

TOY = dict(K=6, T=5, n_classes=3, hidden=4, conv_filters=3, conv_kernel=(3, 3), caps_kernel=(2, 2),
           primary_caps=4, digit_dim=4, routing_iterations=2, head2_width=5)


def _weighted(out: T.Tensor, R: np.ndarray) -> T.Tensor:
    return T.sum(T.mul(out, T.constant(R)))


def _leaf(rng: Rng, shape, name: str, scale: float = 1.0) -> T.Tensor:
    return T.parameter(rng.normal(scale, shape), name)


def check_conv(rng, h):
    x = _leaf(rng, (2, 1, 6, 5), "x")
    p = ConvParams(_leaf(rng, (3, 1, 3, 3), "k"), _leaf(rng, (3,), "b"))
    R = rng.normal(1.0, (2, 3, 4, 3))
    return grad_check(lambda: _weighted(conv_feature_map(x, p), R),
                      {"x": x, "k": p.kernels, "b": p.bias}, h)


def _cell_params(cls, rng):
    p = cls.init(3, 2, rng)
    for t in p.parameters().values():
        t.data += rng.normal(0.3, t.shape)
    return p


def check_memory_cell(rng, h):
    p = _cell_params(MemoryCellParams, rng)
    O, x = _leaf(rng, (2, 3), "O_prev"), _leaf(rng, (2, 2), "x")
    R = rng.normal(1.0, (2, 3))
    return grad_check(lambda: _weighted(memory_cell_step(p, O, x).O, R),
                      {**p.parameters(), "O_prev": O, "x": x}, h)


def check_gru_cell(rng, h):
    p = _cell_params(GruBaselineParams, rng)
    O, x = _leaf(rng, (2, 3), "O_prev"), _leaf(rng, (2, 2), "x")
    R = rng.normal(1.0, (2, 3))
    return grad_check(lambda: _weighted(gru_cell_step(p, O, x), R),
                      {**p.parameters(), "O_prev": O, "x": x}, h)


def check_unroll(rng, h):
    p = _cell_params(MemoryCellParams, rng)
    seq = _leaf(rng, (2, 5, 2), "x_seq")
    R = rng.normal(1.0, (2, 3))
    return grad_check(lambda: _weighted(unroll(p, seq)[0], R), {**p.parameters(), "x_seq": seq}, h)


def check_fusion(rng, h):
    O = _leaf(rng, (2, 4), "O_t")
    h_map = _leaf(rng, (2, 3, 4, 3), "h_map")
    proj = _leaf(rng, (4, 3), "projection")
    R = rng.normal(1.0, (2, 3, 4, 3))
    return grad_check(lambda: _weighted(fuse_spatiotemporal(O, h_map, proj), R),
                      {"O_t": O, "h_map": h_map, "projection": proj}, h)


def check_primary_caps(rng, h):
    g = _leaf(rng, (2, 3, 4, 3), "g")
    p = FusionParams.init(4, 3, (2, 2), rng)
    p.kernels.data *= 4.0
    p.bias.data += rng.normal(0.2, p.bias.shape)
    R = rng.normal(1.0, (2, 4, 8))
    return grad_check(lambda: _weighted(primary_capsule_projection(g, p).capsules, R),
                      {"g": g, **p.parameters()}, h)


def check_squash(rng, h):
    s = _leaf(rng, (5, 4), "s")
    R = rng.normal(1.0, (5, 4))
    return grad_check(lambda: _weighted(T.squash(s), R), {"s": s}, h)


def check_routing(rng, h):
    g = T.parameter(np.tanh(rng.normal(1.0, (2, 4, 8))), "capsules")
    W = CapsWeights(_leaf(rng, (4, 3, 4, 8), "W", 0.5))
    R = rng.normal(1.0, (2, 3, 4))
    # couplings come from the unperturbed forward schedule and stay fixed
    _, state = route(predict_vectors(g, W), 3)
    return grad_check(lambda: _weighted(route(predict_vectors(g, W), 3, couplings=state.c)[0], R),
                      {"capsules": g, "W": W.W}, h)


def check_relationship(rng, h):
    u = _leaf(rng, (2, 4, 8), "u", 0.5)
    R = rng.normal(1.0, (2, 3, 8, 8))
    return grad_check(lambda: _weighted(relationship_matrices(lift_capsules(u)), R), {"u": u}, h)


def check_heads(rng, h):
    feats = _leaf(rng, (3, 6), "features")
    layers = [Dense.init(6, 5, rng, "fc1"), Dense.init(5, 5, rng, "fc2"), Dense.init(5, 3, rng, "out")]
    params = {"features": feats}
    for layer in layers:
        layer.b.data += rng.normal(0.3, layer.b.shape)
        params.update(layer.parameters())
    R = rng.normal(1.0, (3, 3))
    return grad_check(lambda: _weighted(softmax_head(feats, layers), R), params, h)


def check_margin_loss(rng, h):
    v = T.parameter(rng.uniform(-0.4, 0.4, (4, 3, 4)), "v")
    labels = np.array([0, 2, 1, 2])
    return grad_check(lambda: T.sum(margin_loss(v, labels, MarginParams())), {"v": v}, h)


def check_joint_loss(rng, h):
    logits = [_leaf(rng, (4, 3), f"logits{k}") for k in range(3)]
    v = T.parameter(rng.uniform(-0.4, 0.4, (4, 3, 4)), "v")
    labels = np.array([0, 2, 1, 2])

    def f():
        heads = HeadOutputs(*(T.softmax(z) for z in logits), v)
        return joint_loss(heads, labels).total

    return grad_check(f, {**{t.name: t for t in logits}, "v": v}, h)


def check_full_model(rng, h):
    model = ASTCapsNet(ModelConfig(**TOY), rng)
    for p in model.parameters().values():
        p.data += rng.normal(0.1, p.shape)
    x = rng.normal(1.0, (2, 30))
    labels = np.array([1, 2])
    couplings = model.forward(x).routing.c
    return grad_check(lambda: model.loss(model.forward(x, couplings=couplings), labels).total,
                      model.parameters(), h, max_coords=6, rng=rng)


CHECKS = {
    "conv": check_conv,
    "memory_cell": check_memory_cell,
    "gru_cell": check_gru_cell,
    "unroll": check_unroll,
    "fusion": check_fusion,
    "squash": check_squash,
    "primary_caps": check_primary_caps,
    "routing": check_routing,
    "relationship": check_relationship,
    "heads": check_heads,
    "margin_loss": check_margin_loss,
    "joint_loss": check_joint_loss,
    "full_model": check_full_model,
}


# The end-to-end loss is O(1) while some recurrent-weight gradients are ~1e-6,
# so a 1e-6 step is dominated by roundoff there.
STEPS = {"full_model": 1e-4}
DEFAULT_STEP = 1e-6


def run_all(seed: int = 0, h: float | None = None) -> dict[str, float]:
    """Max relative error per layer, each check on its own seeded stream."""
    return {name: fn(Rng(seed + i), h or STEPS.get(name, DEFAULT_STEP))
            for i, (name, fn) in enumerate(CHECKS.items())}
