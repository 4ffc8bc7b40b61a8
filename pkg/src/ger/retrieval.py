"""Cached entity index, exact top-k search and recall evaluation."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import Example
from .model import BiEncoder, represent_all


class IndexBuildError(RuntimeError):
    pass


class ZeroShotViolation(ValueError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EntityIndex:
    """Immutable (|E|, d) matrix of entity vectors; row i belongs to ``ids[i]``."""

    ids: tuple[str, ...]
    vectors: np.ndarray
    fingerprint: str = ""

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("entity ids are not unique")
        if self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids for {self.vectors.shape[0]} rows")
        vecs = np.array(self.vectors, dtype=np.float64)
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)
        # position of each row in ascending-id order, used for tie breaks
        order = np.argsort(np.array(self.ids, dtype=object), kind="stable")
        rank = np.empty(len(self.ids), dtype=np.intp)
        rank[order] = np.arange(len(self.ids))
        rank.setflags(write=False)
        object.__setattr__(self, "_id_rank", rank)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        """Exact top-k by inner product; ties go to the smaller entity id."""
        n = len(self.ids)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside [1, {n}]")
        scores = self.vectors @ np.asarray(query, dtype=np.float64)
        if k < n:
            kth = np.partition(scores, n - k)[n - k]
            cand = np.flatnonzero(scores >= kth)
        else:
            cand = np.arange(n)
        order = np.lexsort((self._id_rank[cand], -scores[cand]))[:k]
        top = cand[order]
        return [(self.ids[i], float(scores[i])) for i in top]


@dataclass(frozen=True)
class RetrievalResult:
    mention_id: str
    entity_ids: tuple[str, ...]
    scores: tuple[float, ...]


def build_index(model: BiEncoder, entities: Sequence[Example], fingerprint: str = "", batch_size: int = 64) -> EntityIndex:
    """Encode every entity with the entity tower."""
    if not entities:
        raise IndexBuildError("no entities to index")
    try:
        V = represent_all(model.entity, entities, batch_size)
    except Exception:
        failed = []
        for ex in entities:
            try:
                represent_all(model.entity, [ex], 1)
            except Exception as exc:  # noqa: BLE001 - report every failing id
                failed.append(f"{ex.id}: {exc}")
        raise IndexBuildError("entity encoding failed for " + "; ".join(failed or ["<batch>"])) from None
    if not np.all(np.isfinite(V)):
        bad = [entities[i].id for i in np.flatnonzero(~np.isfinite(V).all(axis=1))]
        raise IndexBuildError(f"non-finite vectors for entities {bad[:10]}")
    return EntityIndex(tuple(ex.id for ex in entities), V, fingerprint)


def retrieve(model: BiEncoder, mentions: Sequence[Example], index: EntityIndex, k: int, batch_size: int = 64) -> list[RetrievalResult]:
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} outside [1, {len(index)}]")
    Q = represent_all(model.mention, mentions, batch_size)
    out = []
    for ex, q in zip(mentions, Q):
        hits = index.search(q, k)
        out.append(RetrievalResult(ex.id, tuple(h[0] for h in hits), tuple(h[1] for h in hits)))
    return out


def recall_at(
    results: Sequence[RetrievalResult],
    gold: Mapping[str, str],
    ks: Sequence[int],
    entity_ids: Iterable[str] | None = None,
) -> dict[int, float]:
    """Fraction of mentions whose gold entity is among the first k results."""
    if not results:
        raise EvaluationError("no mentions to evaluate")
    known = set(entity_ids) if entity_ids is not None else None
    for r in results:
        g = gold.get(r.mention_id)
        if g is None:
            raise EvaluationError(f"mention {r.mention_id!r} has no gold entity")
        if known is not None and g not in known:
            raise EvaluationError(f"gold entity {g!r} of mention {r.mention_id!r} is not in the index")
    depth = min(len(r.entity_ids) for r in results)
    complete = known is not None and depth >= len(known)
    if max(ks) > depth and not complete:
        raise EvaluationError(f"results hold {depth} candidates, recall@{max(ks)} requested")
    out = {}
    for k in ks:
        hit = sum(gold[r.mention_id] in r.entity_ids[:k] for r in results)
        out[k] = hit / len(results)
    return out


def zero_shot_guard(train_entities: Iterable[str], eval_entities: Iterable[str]) -> None:
    """Raise unless the training and evaluation entity sets are disjoint."""
    eval_set = set(eval_entities)
    if not eval_set:
        raise ZeroShotViolation("evaluation entity set is empty")
    shared = sorted(set(train_entities) & eval_set)
    if shared:
        raise ZeroShotViolation(f"{len(shared)} entities appear in both training and evaluation: {shared[:20]}")


# ---------------------------------------------------------------- attention-rank analysis

DEFAULT_BOUNDARIES = (0, 32, 64, 96, 128)


def mention_attention_rank(attention: np.ndarray, span: tuple[int, int]) -> int:
    """Best (smallest) rank among mention tokens when tokens are sorted by attention, highest first."""
    order = np.lexsort((np.arange(len(attention)), -attention))
    rank = np.empty(len(attention), dtype=np.intp)
    rank[order] = np.arange(len(attention))
    return int(rank[span[0] : span[1]].min())


def attention_rank_analysis(
    model: BiEncoder,
    mentions: Sequence[Example],
    results: Sequence[RetrievalResult],
    gold: Mapping[str, str],
    boundaries: Sequence[int] = DEFAULT_BOUNDARIES,
    k: int = 64,
    batch_size: int = 64,
) -> list[dict]:
    """Group mentions by the attention rank of their best mention token.

    Attention is the final encoder block's head-averaged row for position 0.
    Returns one row per bucket with its count, share and recall@k.
    """
    b = list(boundaries)
    max_len = model.cfg.max_len
    if len(b) < 2 or b[0] != 0 or b[-1] < max_len or any(x >= y for x, y in zip(b, b[1:])):
        raise EvaluationError(f"boundaries {b} do not partition [0, {max_len})")
    ranks = []
    with ad.no_grad():
        for i in range(0, len(mentions), batch_size):
            chunk = mentions[i : i + batch_size]
            for ex, att in zip(chunk, model.mention.text.cls_attention([ex.tc for ex in chunk])):
                ranks.append(mention_attention_rank(att, ex.tc.span))
    by_id = {r.mention_id: r for r in results}
    k_eff = min(k, min(len(r.entity_ids) for r in results))
    rows = []
    for lo, hi in zip(b, b[1:]):
        members = [ex for ex, r in zip(mentions, ranks) if lo <= r < hi]
        hits = [gold[ex.id] in by_id[ex.id].entity_ids[:k_eff] for ex in members]
        rows.append(
            {
                "bucket": [lo, hi],
                "count": len(members),
                "share": len(members) / len(mentions) if mentions else 0.0,
                f"recall@{k_eff}": (sum(hits) / len(hits)) if hits else None,
            }
        )
    return rows


# ---------------------------------------------------------------- files

_INDEX_MAGIC = b"GERINDX1"


def save_index(path: str | Path, index: EntityIndex) -> None:
    """Header (magic, uint64 |E|, uint64 d, 64-char sha256 hex), JSON id list, then float64 LE rows."""
    ids_blob = json.dumps(list(index.ids)).encode("utf-8")
    fp = index.fingerprint.encode("ascii").ljust(64, b"\0")[:64]
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        fh.write(struct.pack("<QQ", len(index), index.dim))
        fh.write(fp)
        fh.write(struct.pack("<Q", len(ids_blob)))
        fh.write(ids_blob)
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f8").tobytes())


def load_index(path: str | Path) -> EntityIndex:
    data = Path(path).read_bytes()
    if data[:8] != _INDEX_MAGIC:
        raise ValueError(f"{path}: not an index file")
    n, d = struct.unpack_from("<QQ", data, 8)
    fp = data[24:88].rstrip(b"\0").decode("ascii")
    (id_len,) = struct.unpack_from("<Q", data, 88)
    ids = tuple(json.loads(data[96 : 96 + id_len].decode("utf-8")))
    V = np.frombuffer(data, dtype="<f8", count=n * d, offset=96 + id_len).reshape(n, d).astype(np.float64)
    return EntityIndex(ids, V, fp)


def write_results(path: str | Path, results: Iterable[RetrievalResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            for rank, (eid, s) in enumerate(zip(r.entity_ids, r.scores)):
                fh.write(json.dumps({"mention_id": r.mention_id, "rank": rank, "entity_id": eid, "score": s}) + "\n")


def read_results(path: str | Path) -> list[RetrievalResult]:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                rows.setdefault(r["mention_id"], []).append((r["rank"], r["entity_id"], r["score"]))
    out = []
    for mid, hits in rows.items():
        hits.sort()
        out.append(RetrievalResult(mid, tuple(h[1] for h in hits), tuple(h[2] for h in hits)))
    return out
