"""Masked multi-head graph attention over hierarchical graphs.

Each layer scores neighbor pairs with ``LeakyReLU([h_i W ‖ h_j W] a)``,
normalizes over ``N(i) ∪ {i}``, aggregates ``h_j W`` per head, averages the
heads and applies relu.  Scores use the previous layer's states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import HierarchicalGraph, NodeBatch


@dataclass
class HganLayer:
    """Per-head projections ``W`` (K, d_in, d_out) and score vectors ``a`` (K, 2 d_out, 1)."""

    W: Tensor
    a: Tensor
    merge: str = "mean"

    @property
    def n_heads(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[2] * (self.n_heads if self.merge == "concat" else 1)

    @classmethod
    def init(cls, d_in: int, d_head: int, n_heads: int, rng: np.random.Generator, merge: str = "mean") -> "HganLayer":
        # He-style scale; averaging K independent heads divides the variance by K
        gain = 2.0 * (n_heads if merge == "mean" else 1)
        bw = np.sqrt(3.0 * gain / d_in)
        ba = np.sqrt(6.0 / (2 * d_head + 1))
        W = Tensor(rng.uniform(-bw, bw, (n_heads, d_in, d_head)), requires_grad=True)
        a = Tensor(rng.uniform(-ba, ba, (n_heads, 2 * d_head, 1)), requires_grad=True)
        return cls(W, a, merge)


class HganStack:
    """``n_layers`` attention layers with relu between them.

    ``merge="concat"`` gives intermediate layers ``d / K``-wide heads whose
    outputs are concatenated; the last layer always averages.
    """

    def __init__(
        self,
        dim: int,
        n_layers: int = 3,
        n_heads: int = 8,
        rng: np.random.Generator | None = None,
        slope: float = 0.01,
        merge: str = "mean",
    ):
        if merge not in ("mean", "concat"):
            raise ValueError(f"unknown head merge {merge!r}")
        if merge == "concat" and dim % n_heads:
            raise ValueError("concat merge needs dim divisible by n_heads")
        rng = rng or np.random.default_rng(0)
        self.dim, self.slope, self.merge = dim, slope, merge
        self.layers: list[HganLayer] = []
        for i in range(n_layers):
            last = i == n_layers - 1
            if merge == "concat" and not last:
                self.layers.append(HganLayer.init(dim, dim // n_heads, n_heads, rng, "concat"))
            else:
                self.layers.append(HganLayer.init(dim, dim, n_heads, rng, "mean"))

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.W"] = layer.W
            out[f"layer{i}.a"] = layer.a
        return out


def _check(H: Tensor, adjacency: np.ndarray, layer: HganLayer) -> None:
    if H.shape[-1] != layer.W.shape[1]:
        raise ShapeError(f"hgan: node states have width {H.shape[-1]}, layer expects {layer.W.shape[1]}")
    if adjacency.shape[-1] != H.shape[-2] or adjacency.shape[-2] != H.shape[-2]:
        raise ShapeError(f"hgan: adjacency {adjacency.shape} does not match {H.shape[-2]} nodes")


def _scores(H: Tensor, adjacency: np.ndarray, layer: HganLayer, slope: float) -> tuple[Tensor, Tensor]:
    """Return (HW, alpha) with HW (B, K, N, d_out) and alpha (B, K, N, N)."""
    d_out = layer.W.shape[2]
    HW = ad.matmul(ad.reshape(H, (H.shape[0], 1, *H.shape[1:])), layer.W)
    src = ad.matmul(HW, layer.a[:, :d_out, :])
    dst = ad.matmul(HW, layer.a[:, d_out:, :])
    e = ad.leaky_relu(src + ad.swapaxes(dst, -1, -2), slope)
    alpha = ad.softmax(e, axis=-1, mask=adjacency[:, None, :, :])
    return HW, alpha


def layer_forward_batch(
    H: Tensor, adjacency: np.ndarray, layer: HganLayer, slope: float = 0.01
) -> tuple[Tensor, Tensor]:
    """One layer over padded batches: H (B, N, d), adjacency (B, N, N) with self loops."""
    _check(H, adjacency, layer)
    HW, alpha = _scores(H, adjacency, layer, slope)
    agg = ad.matmul(alpha, HW)
    if layer.merge == "concat":
        B, K, N, dh = agg.shape
        merged = ad.reshape(ad.swapaxes(agg, 1, 2), (B, N, K * dh))
    else:
        merged = ad.mean(agg, axis=1)
    return ad.relu(merged), alpha


def stack_forward_batch(nodes: NodeBatch, stack: HganStack) -> tuple[Tensor, list[Tensor]]:
    H = nodes.H
    alphas = []
    for layer in stack.layers:
        H, alpha = layer_forward_batch(H, nodes.adjacency, layer, stack.slope)
        alphas.append(alpha)
    return H, alphas


# ---------------------------------------------------------------- single-graph API


def _single(H: Tensor, g: HierarchicalGraph) -> tuple[Tensor, np.ndarray]:
    if H.ndim != 2 or H.shape[0] != g.n_nodes:
        raise ShapeError(f"hgan: {H.shape} node states for a graph of {g.n_nodes} nodes")
    return ad.reshape(H, (1, *H.shape)), g.adjacency()[None]


def attention_scores(H: Tensor, g: HierarchicalGraph, layer: HganLayer, head: int, slope: float = 0.01) -> Tensor:
    """Attention matrix alpha (N, N) of one head; non-edges are exactly 0."""
    Hb, adj = _single(H, g)
    _check(Hb, adj, layer)
    _, alpha = _scores(Hb, adj, layer, slope)
    return alpha[0, head]


def layer_forward(H: Tensor, g: HierarchicalGraph, layer: HganLayer, slope: float = 0.01) -> Tensor:
    Hb, adj = _single(H, g)
    out, _ = layer_forward_batch(Hb, adj, layer, slope)
    return out[0]


def stack_forward(H0: Tensor, g: HierarchicalGraph, stack: HganStack) -> Tensor:
    """Node states after every layer; row 0 is the central node."""
    Hb, adj = _single(H0, g)
    H = Hb
    for layer in stack.layers:
        H, _ = layer_forward_batch(H, adj, layer, stack.slope)
    return H[0]


def extract_attention(H0: Tensor, g: HierarchicalGraph, stack: HganStack) -> list[dict]:
    """Head-averaged attention for every (node, neighbor-or-self) pair at every layer."""
    Hb, adj = _single(H0, g)
    H = Hb
    records = []
    for li, layer in enumerate(stack.layers):
        H, alpha = layer_forward_batch(H, adj, layer, stack.slope)
        avg = alpha.data[0].mean(axis=0)
        for i in range(g.n_nodes):
            for j in np.flatnonzero(adj[0, i]):
                records.append({"layer": li, "node_i": i, "node_j": int(j), "weight": float(avg[i, j])})
    return records


def central_states(H: Tensor) -> Tensor:
    return H[:, 0, :]


def attention_rows(records: Sequence[dict]) -> dict[tuple[int, int], float]:
    """Sum of dumped weights per (layer, node_i)."""
    out: dict[tuple[int, int], float] = {}
    for r in records:
        key = (r["layer"], r["node_i"])
        out[key] = out.get(key, 0.0) + r["weight"]
    return out
