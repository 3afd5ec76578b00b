"""The full spatio-temporal capsule network: memory cell and conv maps fused
into primary capsules, routed to digit capsules, with four classifier heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .capsules import CapsWeights, RoutingState, lift_capsules, predict_vectors, relationship_matrices, route
from .decision import (BayesModel, Dense, HeadOutputs, JointLoss, MarginParams, bayes_posterior,
                       head_votes, joint_loss, softmax_head)
from .recurrent import MemoryCellParams, unroll
from .spatiotemporal import (CAPSULE_STACKS, ConvParams, FusionParams, WindowLayout, conv_feature_map,
                             flatten_window, fuse_spatiotemporal, primary_capsule_projection,
                             reshape_window)
from .tensor import Rng, Tensor


@dataclass
class ModelConfig:
    K: int
    T: int
    n_classes: int
    hidden: int = 128
    conv_filters: int = 16
    conv_kernel: tuple[int, int] = (5, 5)
    caps_kernel: tuple[int, int] = (3, 3)
    primary_caps: int = 32
    digit_dim: int = 16
    routing_iterations: int = 3
    head2_width: int = 128
    dropout: float = 0.0
    lift_eps: float = 1.0
    ridge: float = 1e-6
    margin: MarginParams = field(default_factory=MarginParams)

    def __post_init__(self):
        self.conv_kernel = tuple(self.conv_kernel)
        self.caps_kernel = tuple(self.caps_kernel)
        if isinstance(self.margin, dict):
            self.margin = MarginParams(**self.margin)
        self.validate()

    @property
    def layout(self) -> WindowLayout:
        return WindowLayout(self.K, self.T)

    @property
    def map_shape(self) -> tuple[int, int, int]:
        """Shape of the conv / fused feature cube for one sample."""
        kh, kw = self.conv_kernel
        return self.conv_filters, self.K - kh + 1, self.T - kw + 1

    @property
    def n_relationship_features(self) -> int:
        return (self.primary_caps - 1) * CAPSULE_STACKS * CAPSULE_STACKS

    def validate(self):
        for name in ("K", "T", "n_classes", "hidden", "conv_filters", "primary_caps", "digit_dim",
                     "routing_iterations", "head2_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.primary_caps < 2:
            raise ValueError("primary_caps must be at least 2 for the relationship layer")
        kh, kw = self.conv_kernel
        if not (1 <= kh <= self.K and 1 <= kw <= self.T):
            raise ValueError(f"conv kernel {kh}x{kw} does not fit a {self.K}x{self.T} window")
        _, mh, mw = self.map_shape
        ch, cw = self.caps_kernel
        if not (1 <= ch <= mh and 1 <= cw <= mw):
            raise ValueError(f"capsule kernel {ch}x{cw} does not fit the {mh}x{mw} feature map")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.lift_eps <= 0 or self.ridge <= 0:
            raise ValueError("lift_eps and ridge must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_kernel"] = list(self.conv_kernel)
        d["caps_kernel"] = list(self.caps_kernel)
        return d


@dataclass
class Forward:
    O_T: Tensor
    h_map: Tensor
    g: Tensor
    primary: Tensor
    primary_raw: Tensor
    predictions: Tensor
    routing: RoutingState
    relationships: Tensor
    heads: HeadOutputs


class ASTCapsNet:
    """Parameters plus forward pass. ``bayes`` is set once training has finished."""

    def __init__(self, config: ModelConfig, rng: Rng):
        c = config
        self.config = c
        F = c.conv_filters
        self.cell = MemoryCellParams.init(c.hidden, c.K, rng, prefix="cell")
        self.projection = (T.parameter(rng.uniform(-1.0, 1.0, (c.hidden, F)) / np.sqrt(c.hidden), "fuse.projection")
                           if c.hidden != F else None)
        self.conv = ConvParams.init(F, c.conv_kernel, rng, prefix="conv")
        self.primary = FusionParams.init(c.primary_caps, F, c.caps_kernel, rng, prefix="primary")
        self.digit = CapsWeights.init(c.primary_caps, c.n_classes, c.digit_dim, CAPSULE_STACKS, rng)
        self.head_tp = [Dense.init(c.hidden, c.n_classes, rng, "head_tp")]
        flat = int(np.prod(c.map_shape))
        self.head_st = [Dense.init(flat, c.head2_width, rng, "head_st.fc1"),
                        Dense.init(c.head2_width, c.head2_width, rng, "head_st.fc2"),
                        Dense.init(c.head2_width, c.n_classes, rng, "head_st.out")]
        self.head_pc = [Dense.init(c.n_relationship_features, c.n_classes, rng, "head_pc")]
        self.bayes: BayesModel | None = None

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.cell.parameters())
        if self.projection is not None:
            params[self.projection.name] = self.projection
        params.update(self.conv.parameters())
        params.update(self.primary.parameters())
        params.update(self.digit.parameters())
        for layer in self.head_tp + self.head_st + self.head_pc:
            params.update(layer.parameters())
        return params

    def forward(self, x: np.ndarray, training: bool = False, rng: Rng | None = None,
                couplings: np.ndarray | None = None) -> Forward:
        """Run a batch of flat windows (B, N) through every layer."""
        c = self.config
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        xn = T.l2_normalize(T.constant(x))
        grid = reshape_window(xn, c.layout)  # (B, 1, K, T)
        seq = T.transpose(T.reshape(xn, (len(x), c.K, c.T)), (0, 2, 1))  # (B, T, K)
        O_T, _ = unroll(self.cell, seq, dropout_rate=c.dropout if training else 0.0,
                        rng=rng, training=training)
        h_map = conv_feature_map(grid, self.conv)
        g = fuse_spatiotemporal(O_T, h_map, self.projection)
        prim = primary_capsule_projection(g, self.primary)
        pred = predict_vectors(prim.capsules, self.digit)
        v, state = route(pred, c.routing_iterations, couplings=couplings)
        R = relationship_matrices(lift_capsules(prim.raw, c.lift_eps), c.ridge)
        heads = HeadOutputs(
            p_tp=softmax_head(O_T, self.head_tp),
            p_st=softmax_head(flatten_window(g), self.head_st),
            p_pc=softmax_head(T.reshape(R, (len(x), -1)), self.head_pc),
            v_digit=v,
        )
        return Forward(O_T, h_map, g, prim.capsules, prim.raw, pred, state, R, heads)

    def loss(self, fwd: Forward, labels) -> JointLoss:
        return joint_loss(fwd.heads, labels, self.config.margin)

    def votes(self, x: np.ndarray) -> np.ndarray:
        return head_votes(self.forward(x).heads)

    def fused(self, votes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bayes-fused class and posterior for (M, 4) head votes."""
        if self.bayes is None:
            raise RuntimeError("model has no fitted Bayes layer; train it first")
        post = bayes_posterior(self.bayes, votes)
        return post.argmax(axis=1), post
