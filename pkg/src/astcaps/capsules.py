"""Digit capsules via routing-by-agreement, plus the capsule relationship layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Rng, ShapeError, Tensor, squash

__all__ = [
    "CapsWeights", "RoutingState", "predict_vectors", "squash", "route",
    "lift_capsules", "relationship_matrices",
]

RIDGE = 1e-6


@dataclass
class CapsWeights:
    W: Tensor  # (P, J, d_out, d_in)

    @classmethod
    def init(cls, n_in: int, n_out: int, d_out: int, d_in: int, rng: Rng, name: str = "digit.W"):
        return cls(T.parameter(rng.uniform(-0.05, 0.05, (n_in, n_out, d_out, d_in)), name))

    def parameters(self) -> dict[str, Tensor]:
        return {self.W.name: self.W}


@dataclass
class RoutingState:
    b: np.ndarray  # (B, P, J) logits after the last agreement update
    c: np.ndarray  # (B, P, J) couplings used in the final pass
    iterations: int


def predict_vectors(g, W: CapsWeights) -> Tensor:
    """(B, P, d_in) capsules -> (B, P, J, d_out) with pred[b,i,j] = W[i,j] @ g[b,i]."""
    g = T.constant(g)
    P, _, _, d_in = W.W.shape
    if g.ndim != 3 or g.shape[1:] != (P, d_in):
        raise ShapeError(f"predict_vectors: capsules {g.shape} do not match weights {W.W.shape}")
    return T.einsum("ijod,bid->bijo", W.W, g)


def _softmax_rows(b: np.ndarray) -> np.ndarray:
    e = np.exp(b - b.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _squash_np(s: np.ndarray) -> np.ndarray:
    n = np.sqrt((s * s).sum(axis=-1, keepdims=True))
    return s * (n / (1.0 + n * n))


def route(predictions, iterations: int = 3,
          couplings: np.ndarray | None = None) -> tuple[Tensor, RoutingState]:
    """Dynamic routing over predictions of shape (B, P, J, d).

    Logits start at zero for every call. The agreement schedule runs on plain
    arrays; only the final weighted sum and squash are recorded for backprop,
    with that pass's couplings held constant. Passing ``couplings`` skips the
    schedule and uses them directly (useful for finite-difference checks).
    """
    pred = T.constant(predictions)
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    if pred.ndim != 4:
        raise ShapeError(f"route: expected (B, P, J, d) predictions, got {pred.shape}")
    u = pred.data
    b = np.zeros(u.shape[:3])
    if couplings is None:
        for it in range(iterations):
            c = _softmax_rows(b)
            if it == iterations - 1:
                break
            v = _squash_np(np.einsum("bij,bijd->bjd", c, u))
            b = b + np.einsum("bijd,bjd->bij", u, v)
    else:
        c = np.asarray(couplings, dtype=np.float64)
    weighted = T.mul(T.expand(T.constant(c[..., None]), u.shape), pred)
    v = T.squash(T.sum(weighted, axis=1))
    return v, RoutingState(b=b, c=c, iterations=iterations)


def lift_capsules(u, eps: float = 1.0) -> Tensor:
    """Lift capsule vectors (B, P, d) to square matrices ``u u^T + eps I``."""
    u = T.constant(u)
    d = u.shape[-1]
    outer = T.einsum("bpi,bpj->bpij", u, u)
    return T.add(outer, T.constant(np.broadcast_to(eps * np.eye(d), outer.shape)))


def relationship_matrices(G, ridge: float = RIDGE) -> Tensor:
    """Transfer matrices between neighbouring capsules.

    ``G`` is (B, P, d, d). Returns (B, P-1, d, d) where ``R[i]`` minimises
    ``|R[i] G[i+1] - G[i]|`` with a small ridge term, i.e.
    ``R = G[i] A^T (A A^T + ridge I)^-1`` for ``A = G[i+1]``.
    """
    G = T.constant(G)
    if G.ndim != 4 or G.shape[1] < 2 or G.shape[2] != G.shape[3]:
        raise ShapeError(f"relationship_matrices: need (B, P>=2, d, d), got {G.shape}")
    d = G.shape[-1]
    lead = T.index(G, (slice(None), slice(0, -1)))
    follow = T.index(G, (slice(None), slice(1, None)))
    gram = T.einsum("bpij,bpkj->bpik", follow, follow)
    gram = T.add(gram, T.constant(np.broadcast_to(ridge * np.eye(d), gram.shape)))
    rhs = T.einsum("bpij,bpkj->bpik", follow, lead)  # A B^T
    X = T.solve(gram, rhs)  # (A A^T + ridge)^-1 A B^T = R^T
    return T.transpose(X, (0, 1, 3, 2))
