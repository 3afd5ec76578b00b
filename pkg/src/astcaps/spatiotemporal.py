"""Low-level feature extraction: window reshape, sigmoid conv maps, temporal
tiling, and the projection onto primary capsules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Rng, ShapeError, Tensor

CAPSULE_STACKS = 8


@dataclass(frozen=True)
class WindowLayout:
    """Rows ``K`` by columns ``T`` of one sample; ``K * T`` is the flat length."""

    K: int
    T: int

    def __post_init__(self):
        if self.K < 1 or self.T < 1:
            raise ValueError(f"layout dimensions must be positive, got {self.K}x{self.T}")

    @property
    def N(self) -> int:
        return self.K * self.T


def reshape_window(x, layout: WindowLayout) -> Tensor:
    """(N,) -> (1, K, T) or (B, N) -> (B, 1, K, T), row-major."""
    x = T.constant(x)
    if x.shape[-1] != layout.N:
        raise ShapeError(f"window of length {x.shape[-1]} does not fit layout {layout.K}x{layout.T}")
    return T.reshape(x, x.shape[:-1] + (1, layout.K, layout.T))


def flatten_window(grid) -> Tensor:
    grid = T.constant(grid)
    lead = grid.shape[:-3]
    return T.reshape(grid, lead + (int(np.prod(grid.shape[-3:])),))


@dataclass
class ConvParams:
    kernels: Tensor  # (F, 1, kh, kw)
    bias: Tensor  # (F,)

    @classmethod
    def init(cls, filters: int, kernel: tuple[int, int], rng: Rng, prefix: str = "conv"):
        kh, kw = kernel
        s = 1.0 / math.sqrt(kh * kw)
        return cls(T.parameter(rng.uniform(-s, s, (filters, 1, kh, kw)), f"{prefix}.kernels"),
                   T.parameter(np.zeros(filters), f"{prefix}.bias"))

    def parameters(self) -> dict[str, Tensor]:
        return {self.kernels.name: self.kernels, self.bias.name: self.bias}


def conv_feature_map(x, p: ConvParams) -> Tensor:
    return T.sigmoid(T.conv2d(x, p.kernels, p.bias))


def fuse_spatiotemporal(O_t, h_map, projection: Tensor | None = None) -> Tensor:
    """Add the temporal vector to every spatial position of its channel.

    ``O_t`` is (B, hidden) and ``h_map`` is (B, F, K', T'). When hidden != F a
    (hidden, F) ``projection`` maps the temporal vector to one value per
    channel first.
    """
    O_t, h_map = T.constant(O_t), T.constant(h_map)
    per_channel = O_t if projection is None else T.matmul(O_t, projection)
    if per_channel.shape != h_map.shape[:2]:
        raise ShapeError(f"fuse: temporal vector {per_channel.shape} does not match map channels {h_map.shape[:2]}")
    tiled = T.expand(T.reshape(per_channel, per_channel.shape + (1, 1)), h_map.shape)
    return T.add(tiled, h_map)


@dataclass
class FusionParams:
    """Primary-capsule convolution: ``CAPSULE_STACKS`` stacks of ``capsules``
    output channels each, stored as one (stacks * capsules, F, kh, kw) bank."""

    kernels: Tensor
    bias: Tensor
    capsules: int

    @classmethod
    def init(cls, capsules: int, channels: int, kernel: tuple[int, int], rng: Rng,
             prefix: str = "primary"):
        kh, kw = kernel
        s = 1.0 / math.sqrt(channels * kh * kw)
        out = CAPSULE_STACKS * capsules
        return cls(T.parameter(rng.uniform(-s, s, (out, channels, kh, kw)), f"{prefix}.kernels"),
                   T.parameter(np.zeros(out), f"{prefix}.bias"), capsules)

    def parameters(self) -> dict[str, Tensor]:
        return {self.kernels.name: self.kernels, self.bias.name: self.bias}


@dataclass
class PrimaryCapsules:
    capsules: Tensor  # (B, P, 8), squashed
    raw: Tensor  # (B, P, 8), before squashing


def primary_capsule_projection(g, p: FusionParams) -> PrimaryCapsules:
    """Project the fused cube (B, F, K', T') onto P capsules of dimension 8.

    Stack ``s`` convolves the whole cube into P channel maps; the spatial mean
    of channel ``i`` becomes component ``s`` of capsule ``i``.
    """
    g = T.constant(g)
    maps = T.conv2d(g, p.kernels, p.bias)
    batch = maps.shape[0]
    pooled = T.mean(maps, axis=(2, 3))
    raw = T.transpose(T.reshape(pooled, (batch, CAPSULE_STACKS, p.capsules)), (0, 2, 1))
    return PrimaryCapsules(T.squash(raw), raw)
