"""Dense and graph-attention layers built on :mod:`posegraph.diffcore.tensor`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DiffError, ShapeMismatch, Tensor

LEAKY_SLOPE = 0.01
ATTENTION_SLOPE = 0.2
ACTIVATIONS = ("leaky_relu", "sigmoid", "linear")


class MissingSelfLoop(DiffError, ValueError):
    pass


def activate(x: Tensor, activation: str, slope: float = LEAKY_SLOPE) -> Tensor:
    if activation == "leaky_relu":
        return T.leaky_relu(x, slope)
    if activation == "sigmoid":
        return T.sigmoid(x)
    if activation == "linear":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Symmetric uniform init with variance ``2 * gain**2 / fan_in``."""
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer:
    def __init__(
        self,
        n_in: int,
        n_out: int,
        activation: str = "leaky_relu",
        slope: float = LEAKY_SLOPE,
        rng: np.random.Generator | None = None,
        gain: float = 1.0,
    ):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not 0 < slope < 1:
            raise ValueError("leaky slope must lie in (0, 1)")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.slope = slope
        self.weight = Tensor(fan_in_uniform(rng, (n_out, n_in), n_in, gain), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x) -> Tensor:
        return forward_dense(self, x)


def forward_dense(layer: DenseLayer, x) -> Tensor:
    x = T.as_tensor(x)
    if x.value.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeMismatch(f"dense layer expects (batch, {layer.n_in}), got {x.shape}")
    return activate(T.linear(x, layer.weight, layer.bias), layer.activation, layer.slope)


@dataclass(frozen=True)
class Adjacency:
    """Directed message edges ``src -> dst`` over ``n`` nodes.

    Attention at node ``i`` is normalised over all edges with ``dst == i``.
    """

    src: np.ndarray
    dst: np.ndarray
    n: int

    @classmethod
    def from_neighbors(cls, neighbors) -> "Adjacency":
        """``neighbors[i]`` lists the nodes that send messages to ``i``."""
        src, dst = [], []
        for i, nbrs in enumerate(neighbors):
            for j in nbrs:
                src.append(j)
                dst.append(i)
        return cls(np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64), len(neighbors))

    def validate(self) -> None:
        if self.src.shape != self.dst.shape:
            raise ShapeMismatch("src/dst length differ")
        if self.src.size and (self.src.min() < 0 or self.dst.min() < 0 or max(self.src.max(), self.dst.max()) >= self.n):
            raise ShapeMismatch("adjacency index out of range")
        loops = np.zeros(self.n, dtype=bool)
        loops[self.src[self.src == self.dst]] = True
        if not loops.all():
            raise MissingSelfLoop(f"node {int(np.argmin(loops))} has no self-loop")


class GraphAttentionLayer:
    """Multi-head graph attention.

    Scores ``leaky_relu(a . [W h_i || W h_j])`` are softmax-normalised over the
    senders ``j`` of each receiver ``i``; heads are concatenated or averaged.
    """

    def __init__(
        self,
        n_in: int,
        out_per_head: int,
        heads: int = 1,
        combine: str = "concat",
        activation: str = "leaky_relu",
        slope: float = LEAKY_SLOPE,
        attention_slope: float = ATTENTION_SLOPE,
        rng: np.random.Generator | None = None,
        gain: float = 1.0,
    ):
        if heads < 1:
            raise ValueError("need at least one head")
        if combine not in ("concat", "mean"):
            raise ValueError(f"unknown head combination {combine!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.out_per_head, self.heads = n_in, out_per_head, heads
        self.combine = combine
        self.activation = activation
        self.slope = slope
        self.attention_slope = attention_slope
        self.weight = Tensor(fan_in_uniform(rng, (heads * out_per_head, n_in), n_in, gain), requires_grad=True)
        self.attention = Tensor(
            fan_in_uniform(rng, (heads, 2 * out_per_head), 2 * out_per_head, 0.5), requires_grad=True
        )
        width = heads * out_per_head if combine == "concat" else out_per_head
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    @property
    def n_out(self) -> int:
        return self.heads * self.out_per_head if self.combine == "concat" else self.out_per_head

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "attention": self.attention, "bias": self.bias}

    def __call__(self, x, adjacency: Adjacency) -> Tensor:
        return forward_gat(self, x, adjacency)


def attention_weights(layer: GraphAttentionLayer, x, adjacency: Adjacency) -> tuple[Tensor, Tensor]:
    """Projected features (N, H, F) and attention (E, H) per message edge."""
    x = T.as_tensor(x)
    if x.value.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeMismatch(f"GAT layer expects (nodes, {layer.n_in}), got {x.shape}")
    if x.shape[0] != adjacency.n:
        raise ShapeMismatch(f"{x.shape[0]} node rows but adjacency over {adjacency.n} nodes")
    adjacency.validate()
    H, F = layer.heads, layer.out_per_head
    n = adjacency.n
    wh = T.reshape(T.linear(x, layer.weight), (n, H, F))
    # a . [Wh_i || Wh_j] splits into a receiver half and a sender half
    a_dst = T.reshape(T.take(layer.attention, (slice(None), slice(0, F))), (1, H, F))
    a_src = T.reshape(T.take(layer.attention, (slice(None), slice(F, 2 * F))), (1, H, F))
    s_dst = T.sum(T.mul(wh, a_dst), axis=2)
    s_src = T.sum(T.mul(wh, a_src), axis=2)
    scores = T.leaky_relu(T.add(T.gather(s_dst, adjacency.dst), T.gather(s_src, adjacency.src)), layer.attention_slope)
    alpha = T.segment_softmax(scores, adjacency.dst, n)
    return wh, alpha


def forward_gat(layer: GraphAttentionLayer, x, adjacency: Adjacency) -> Tensor:
    H, F = layer.heads, layer.out_per_head
    n = adjacency.n
    wh, alpha = attention_weights(layer, x, adjacency)
    agg = T.attend(wh, alpha, adjacency.src, adjacency.dst, n)
    if layer.combine == "concat":
        out = T.reshape(agg, (n, H * F))
    else:
        out = T.mean(agg, axis=1)
    return activate(T.add(out, layer.bias), layer.activation, layer.slope)
