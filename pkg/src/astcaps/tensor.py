"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its inputs and a small
context object. :func:`backward` walks the ancestors of a scalar loss in
reverse creation order, which is a valid reverse topological order because an
op output is always created after its inputs.

Backward rules live in :data:`BACKWARD`, keyed by op name, so a single rule can
be swapped out (the gradient-check CLI relies on this for mutation testing).

Ops accept leading batch axes where noted; elementwise ops never broadcast.
Use :func:`expand` to broadcast explicitly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "Rng", "ShapeError", "BACKWARD",
    "tensor", "parameter", "constant",
    "matmul", "einsum", "conv2d", "activation", "sigmoid", "tanh", "softmax",
    "elementwise", "add", "sub", "mul", "affine", "expand", "reshape",
    "transpose", "concat", "index", "sum", "mean", "square", "hinge", "log",
    "norm", "squash", "l2_normalize", "solve", "stop_gradient",
    "trace", "backward", "grad_check",
]

L2_EPS = 1e-12

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """An immutable float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "name", "op", "parents", "ctx", "id", "grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx = None
        self.id = next(_ids)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return affine(self, -1.0, 0.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, op: str, parents: Sequence[Tensor], ctx=None) -> Tensor:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = any(p.requires_grad for p in parents)
    t.name = None
    t.op = op
    t.parents = tuple(parents) if t.requires_grad else ()
    t.ctx = ctx if t.requires_grad else None
    t.id = next(_ids)
    t.grad = None
    return t


BACKWARD: dict[str, Callable] = {}


def _rule(name: str):
    def register(fn):
        BACKWARD[name] = fn
        return fn
    return register


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b))


@_rule("matmul")
def _matmul_bw(node, g):
    a, b = node.parents
    return g @ b.data.T, a.data.T @ g


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand Einstein sum, e.g. ``einsum("ijod,bid->bijo", W, x)``.

    Every index of an operand must also appear in the other operand or in the
    output, so that each gradient is itself an einsum.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(ch not in other and ch not in out for ch in s):
            raise ValueError(f"einsum: unsupported reduction pattern {spec!r}")
    try:
        res = np.einsum(f"{sa},{sb}->{out}", a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec!r}: {a.shape} and {b.shape}: {exc}") from None
    return _make(np.asarray(res, dtype=np.float64), "einsum", (a, b), (sa, sb, out))


@_rule("einsum")
def _einsum_bw(node, g):
    a, b = node.parents
    sa, sb, out = node.ctx
    ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
    gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
    return ga, gb


def solve(m: Tensor, y: Tensor) -> Tensor:
    """Batched linear solve ``m @ x = y`` over leading axes; m is (..., n, n)."""
    m, y = _as_tensor(m), _as_tensor(y)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2] or m.shape[:-1] != y.shape[:-1]:
        raise ShapeError(f"solve: incompatible shapes {m.shape} and {y.shape}")
    x = np.linalg.solve(m.data, y.data)
    return _make(x, "solve", (m, y))


@_rule("solve")
def _solve_bw(node, g):
    m, _ = node.parents
    gy = np.linalg.solve(np.swapaxes(m.data, -1, -2), g)
    gm = -gy @ np.swapaxes(node.data, -1, -2)
    return gm, gy


# --------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation.

    ``x`` is (C, H, W) or (B, C, H, W); ``kernels`` is (F, C, kh, kw) and
    ``bias`` is (F,). Each output element is accumulated over (c, u, v) in
    lexicographic order and the bias is added last.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    xd = x.data
    single = xd.ndim == 3
    if single:
        xd = xd[None]
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: expected (B,)C,H,W input and F,C,kh,kw kernels, got {x.shape} and {kernels.shape}")
    _, c_in, h, w = xd.shape
    n_f, c_k, kh, kw = kernels.shape
    if c_k != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernels expect {c_k}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.shape != (n_f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {n_f} filters")
    ho, wo = h - kh + 1, w - kw + 1
    k = kernels.data
    # channels-last accumulation: same per-element order, contiguous filter axis
    x_last = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))  # (B, H, W, C)
    k_last = np.ascontiguousarray(k.transpose(1, 2, 3, 0))  # (C, kh, kw, F)
    acc = np.zeros((xd.shape[0], ho, wo, n_f))
    tmp = np.empty_like(acc)
    for c in range(c_in):
        for u in range(kh):
            for v in range(kw):
                np.multiply(x_last[:, u:u + ho, v:v + wo, c, None], k_last[c, u, v], out=tmp)
                acc += tmp
    acc += bias.data
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if single:
        out = out[0]
    return _make(out, "conv2d", (x, kernels, bias), single)


@_rule("conv2d")
def _conv2d_bw(node, g):
    x, kernels, bias = node.parents
    single = node.ctx
    xd = x.data[None] if single else x.data
    g = g[None] if single else g
    _, _, kh, kw = kernels.shape
    ho, wo = g.shape[2], g.shape[3]
    gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
    gk = None
    if kernels.requires_grad:
        win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    gx = None
    if x.requires_grad:
        gx = np.zeros_like(xd)
        k = kernels.data
        for u in range(kh):
            for v in range(kw):
                part = np.tensordot(g, k[:, :, u, v], axes=([1], [0]))
                gx[:, :, u:u + ho, v:v + wo] += part.transpose(0, 3, 1, 2)
        if single:
            gx = gx[0]
    return gx, gk, gb


# --------------------------------------------------------------------------
# elementwise


def activation(x: Tensor, kind: str) -> Tensor:
    x = _as_tensor(x)
    if kind == "sigmoid":
        # split by sign so exp never overflows
        d = x.data
        e = np.exp(-np.abs(d))
        out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    elif kind == "tanh":
        out = np.tanh(x.data)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _make(out, kind, (x,))


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


@_rule("sigmoid")
def _sigmoid_bw(node, g):
    s = node.data
    return (g * s * (1.0 - s),)


@_rule("tanh")
def _tanh_bw(node, g):
    t = node.data
    return (g * (1.0 - t * t),)


def _check_same(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "sub":
        return sub(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _make(a.data + b.data, "add", (a, b))


@_rule("add")
def _add_bw(node, g):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b))


@_rule("sub")
def _sub_bw(node, g):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b))


@_rule("mul")
def _mul_bw(node, g):
    a, b = node.parents
    return g * b.data, g * a.data


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with python-float coefficients."""
    x = _as_tensor(x)
    return _make(scale * x.data + shift, "affine", (x,), scale)


@_rule("affine")
def _affine_bw(node, g):
    return (node.ctx * g,)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data * x.data, "square", (x,))


@_rule("square")
def _square_bw(node, g):
    return (2.0 * node.parents[0].data * g,)


def hinge(x: Tensor) -> Tensor:
    """``max(0, x)``; subgradient 0 at 0."""
    x = _as_tensor(x)
    return _make(np.maximum(x.data, 0.0), "hinge", (x,))


@_rule("hinge")
def _hinge_bw(node, g):
    return (g * (node.parents[0].data > 0.0),)


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log of ``max(x, floor)``."""
    x = _as_tensor(x)
    return _make(np.log(np.maximum(x.data, floor)), "log", (x,), floor)


@_rule("log")
def _log_bw(node, g):
    xd = node.parents[0].data
    live = xd > node.ctx
    return (np.where(live, g / np.where(live, xd, 1.0), 0.0),)


# --------------------------------------------------------------------------
# shape plumbing


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    return _make(out, "expand", (x,))


@_rule("expand")
def _expand_bw(node, g):
    shape = node.parents[0].shape
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return (g,)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, "reshape", (x,))


@_rule("reshape")
def _reshape_bw(node, g):
    return (g.reshape(node.parents[0].shape),)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    return _make(np.transpose(x.data, axes), "transpose", (x,), axes)


@_rule("transpose")
def _transpose_bw(node, g):
    return (np.transpose(g, np.argsort(node.ctx)),)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[x.shape for x in xs]}: {exc}") from None
    sizes = [x.shape[axis] for x in xs]
    return _make(out, "concat", xs, (axis, sizes))


@_rule("concat")
def _concat_bw(node, g):
    axis, sizes = node.ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def index(x: Tensor, key) -> Tensor:
    """``x[key]`` for any numpy index expression."""
    x = _as_tensor(x)
    return _make(np.array(x.data[key], dtype=np.float64), "index", (x,), key)


@_rule("index")
def _index_bw(node, g):
    gx = np.zeros_like(node.parents[0].data)
    np.add.at(gx, node.ctx, g)
    return (gx,)


def stop_gradient(x: Tensor) -> Tensor:
    """A constant copy of ``x``: gradients do not flow through it."""
    return Tensor(_as_tensor(x).data)


# --------------------------------------------------------------------------
# reductions and normalizers


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    return _make(np.asarray(x.data.sum(axis=axis), dtype=np.float64), "sum", (x,), axis)


@_rule("sum")
def _sum_bw(node, g):
    shape = node.parents[0].shape
    axis = node.ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return affine(sum(x, axis), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _make(e / e.sum(axis=axis, keepdims=True), "softmax", (x,), axis)


@_rule("softmax")
def _softmax_bw(node, g):
    s = node.data
    axis = node.ctx
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean length along ``axis``; gradient taken as 0 at the origin."""
    x = _as_tensor(x)
    return _make(np.sqrt((x.data * x.data).sum(axis=axis)), "norm", (x,), axis)


@_rule("norm")
def _norm_bw(node, g):
    xd = node.parents[0].data
    axis = node.ctx
    n = np.expand_dims(node.data, axis)
    safe = np.where(n > 0.0, n, 1.0)
    return (np.expand_dims(g, axis) * xd / safe,)


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Capsule nonlinearity ``|s|^2 / (1 + |s|^2) * s / |s|``; maps 0 to 0."""
    s = _as_tensor(s)
    n = np.sqrt((s.data * s.data).sum(axis=axis, keepdims=True))
    out = s.data * (n / (1.0 + n * n))
    return _make(out, "squash", (s,), (axis, n))


@_rule("squash")
def _squash_bw(node, g):
    sd = node.parents[0].data
    axis, n = node.ctx
    n2 = n * n
    phi = n / (1.0 + n2)
    # d phi / dn divided by n; finite as n -> 0 once multiplied by s s^T
    dphi_over_n = np.where(n > 0.0, (1.0 - n2) / ((1.0 + n2) ** 2 * np.where(n > 0.0, n, 1.0)), 0.0)
    proj = (sd * g).sum(axis=axis, keepdims=True)
    return (phi * g + sd * dphi_over_n * proj,)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """``x / max(|x|, eps)`` along ``axis``; the zero vector stays zero."""
    x = _as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    d = np.maximum(n, eps)
    return _make(x.data / d, "l2_normalize", (x,), (axis, n, d, eps))


@_rule("l2_normalize")
def _l2_normalize_bw(node, g):
    axis, n, d, eps = node.ctx
    y = node.data
    live = n > eps
    proj = (g * y).sum(axis=axis, keepdims=True)
    return (np.where(live, (g - y * proj) / d, g / d),)


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Topologically ordered view of everything a loss depends on."""

    nodes: list[Tensor]
    parameters: dict[str, Tensor] = field(default_factory=dict)


def trace(loss: Tensor) -> Graph:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen.add(t.id)
        nodes.append(t)
        stack.extend(t.parents)
    nodes.sort(key=lambda t: t.id)
    params = {t.name: t for t in nodes if t.op is None and t.name is not None}
    return Graph(nodes, params)


def backward(loss: Tensor | Graph, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss.

    Returns a map from parameter name to gradient. When ``params`` is given,
    every listed parameter gets an entry, with zeros for ones the loss does
    not depend on. Leaf tensors also get their ``.grad`` set.
    """
    if isinstance(loss, Graph):
        graph = loss
        loss = graph.nodes[-1]
    else:
        graph = trace(loss)
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g
            continue
        for parent, gp in zip(node.parents, BACKWARD[node.op](node, g)):
            if gp is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = gp if prev is None else prev + gp
    out = {name: t.grad for name, t in graph.parameters.items()}
    if params is not None:
        out = {name: out[name] if name in out else np.zeros_like(t.data)
               for name, t in params.items()}
    return out


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-6,
               max_coords: int | None = None, rng: "Rng | None" = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current parameter values; the
    parameters are perturbed in place and restored. With ``max_coords`` only a
    seeded subset of coordinates per parameter is probed.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    analytic = backward(fn(), params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            picker = rng or Rng(0)
            coords = sorted(picker.choice(flat.size, max_coords))
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# randomness


class Rng:
    """Seeded PCG64 stream (numpy ``Generator``); equal seeds give equal draws."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, scale: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return (self._gen.random(size=shape) < p).astype(np.float64)

