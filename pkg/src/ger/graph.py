"""Mention/entity-centered graphs over knowledge units and their node states.

Node order is fixed: the central node first, then per triplet either
``hub, S, P, O`` (hierarchical) or ``S, P, O`` (flat ablation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .units import KnowledgeUnit, Span, UnitSet

CENTRAL, HUB, SUBJ, PRED, OBJ = "central", "hub", "S", "P", "O"


@dataclass(frozen=True)
class HierarchicalGraph:
    roles: tuple[str, ...]
    triplet_of: tuple[int, ...]
    spans: tuple[Span | None, ...]
    edges: tuple[tuple[int, int], ...]
    hierarchical: bool = True

    @property
    def n_nodes(self) -> int:
        return len(self.roles)

    @property
    def n_triplets(self) -> int:
        return sum(r == SUBJ for r in self.roles)

    def neighbors(self, i: int) -> list[int]:
        out = [b for a, b in self.edges if a == i] + [a for a, b in self.edges if b == i]
        return sorted(out)

    def degree(self, i: int) -> int:
        return sum(i in e for e in self.edges)

    def adjacency(self, self_loops: bool = True) -> np.ndarray:
        n = self.n_nodes
        adj = np.zeros((n, n), dtype=bool)
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = True
        if self_loops:
            adj[np.arange(n), np.arange(n)] = True
        return adj

    def to_records(self) -> list[dict]:
        nodes = [
            {"node": i, "role": r, "triplet": t, "span": list(s) if s else None}
            for i, (r, t, s) in enumerate(zip(self.roles, self.triplet_of, self.spans))
        ]
        return nodes + [{"edge": [a, b]} for a, b in self.edges]


def _units(units: UnitSet | Iterable[KnowledgeUnit]) -> list[KnowledgeUnit]:
    return list(units.units if isinstance(units, UnitSet) else units)


def build_hierarchical(units: UnitSet | Iterable[KnowledgeUnit]) -> HierarchicalGraph:
    """Central node joined to one hub per triplet; each hub joined to its S/P/O clique."""
    roles, trip, spans, edges = [CENTRAL], [-1], [None], []
    for t, u in enumerate(_units(units)):
        hub = len(roles)
        roles += [HUB, SUBJ, PRED, OBJ]
        trip += [t] * 4
        spans += [None, u.subject, u.predicate, u.object]
        s, p, o = hub + 1, hub + 2, hub + 3
        edges += [(0, hub), (hub, s), (hub, p), (hub, o), (s, p), (s, o), (p, o)]
    return HierarchicalGraph(tuple(roles), tuple(trip), tuple(spans), tuple(edges), hierarchical=True)


def build_flat(units: UnitSet | Iterable[KnowledgeUnit]) -> HierarchicalGraph:
    """Central node joined directly to every S/P/O node; cliques kept per triplet."""
    roles, trip, spans, edges = [CENTRAL], [-1], [None], []
    for t, u in enumerate(_units(units)):
        s = len(roles)
        roles += [SUBJ, PRED, OBJ]
        trip += [t] * 3
        spans += [u.subject, u.predicate, u.object]
        p, o = s + 1, s + 2
        edges += [(0, s), (0, p), (0, o), (s, p), (s, o), (p, o)]
    return HierarchicalGraph(tuple(roles), tuple(trip), tuple(spans), tuple(edges), hierarchical=False)


def write_graph(path: str | Path, g: HierarchicalGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in g.to_records():
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- node states


class GraphInit:
    """Holds the triplet-hub projection (3d x d)."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / (4 * dim))
        self.dim = dim
        self.params = {"w_triple": Tensor(rng.uniform(-bound, bound, (3 * dim, dim)), requires_grad=True)}

    @property
    def w_triple(self) -> Tensor:
        return self.params["w_triple"]


@dataclass
class NodeBatch:
    """Padded node states for a batch of graphs.

    ``H`` is (B, N, d); ``adjacency`` is (B, N, N) with self loops, and padded
    rows carry only their self loop so every softmax row is defined.
    """

    H: Tensor
    adjacency: np.ndarray
    node_mask: np.ndarray


def batch_adjacency(graphs: Sequence[HierarchicalGraph], width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    width = width or max(g.n_nodes for g in graphs)
    adj = np.zeros((len(graphs), width, width), dtype=bool)
    mask = np.zeros((len(graphs), width), dtype=bool)
    idx = np.arange(width)
    adj[:, idx, idx] = True
    for b, g in enumerate(graphs):
        adj[b, : g.n_nodes, : g.n_nodes] = g.adjacency()
        mask[b, : g.n_nodes] = True
    return adj, mask


def init_nodes_batch(
    graphs: Sequence[HierarchicalGraph],
    Y: Tensor,
    central_spans: Sequence[Span],
    w_triple: Tensor | None,
) -> NodeBatch:
    """Initial node states for a batch.

    Central and leaf nodes average their token rows of ``Y`` (B, L, d); each
    hub projects the concatenated S, P, O states through ``w_triple``.
    """
    B, L, d = Y.shape
    T = max(g.n_triplets for g in graphs)
    M = 1 + 3 * T
    pool = np.zeros((B, M, L))
    for b, (g, cspan) in enumerate(zip(graphs, central_spans)):
        leaf_spans = [cspan] + [s for s, r in zip(g.spans, g.roles) if r in (SUBJ, PRED, OBJ)]
        for m, span in enumerate(leaf_spans):
            if span is None:
                raise ValueError("node without a span")
            s, e = span
            if not (0 <= s < e <= L):
                raise ValueError(f"empty or out-of-range span [{s}, {e}) over {L} rows")
            pool[b, m, s:e] = 1.0 / (e - s)
    pooled = ad.matmul(Tensor(pool), Y)
    parts = [pooled]
    hierarchical = any(g.hierarchical and g.n_triplets for g in graphs)
    if hierarchical:
        if w_triple is None:
            raise ValueError("hierarchical graphs need w_triple")
        leaves = ad.reshape(pooled[:, 1:, :], (B, T, 3 * d))
        parts.append(ad.matmul(leaves, w_triple))
    parts.append(Tensor(np.zeros((B, 1, d))))
    source = ad.concat(parts, axis=1)
    S = source.shape[1]
    zero_row = S - 1

    N = max(g.n_nodes for g in graphs)
    index = np.full((B, N), zero_row, dtype=np.intp)
    for b, g in enumerate(graphs):
        leaf = 0
        for i, (role, t) in enumerate(zip(g.roles, g.triplet_of)):
            if role == HUB:
                index[b, i] = M + t
            else:
                index[b, i] = leaf
                leaf += 1
    flat_index = index + (np.arange(B) * S)[:, None]
    H = ad.reshape(ad.take(ad.reshape(source, (B * S, d)), flat_index.reshape(-1)), (B, N, d))
    adj, mask = batch_adjacency(graphs, N)
    return NodeBatch(H=H, adjacency=adj, node_mask=mask)


def init_nodes(g: HierarchicalGraph, Y: Tensor, central_span: Span, params: GraphInit | Tensor) -> Tensor:
    """Initial states (n_nodes, d) for one graph over one encoder output (L, d)."""
    w = params.w_triple if isinstance(params, GraphInit) else params
    if Y.ndim != 2:
        raise ValueError(f"expected a single (L, d) encoder output, got {Y.shape}")
    nb = init_nodes_batch([g], ad.reshape(Y, (1, *Y.shape)), [central_span], w)
    return ad.reshape(nb.H, (g.n_nodes, Y.shape[1]))
