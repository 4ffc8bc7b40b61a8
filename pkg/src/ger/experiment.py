"""End-to-end runs: train, index, retrieve, score and analyse attention."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import EntityRecord, Example, MentionRecord, check_gold, prepare, vocabulary_from
from .model import BiEncoder, EncoderMode, ModelConfig
from .retrieval import (
    EntityIndex,
    RetrievalResult,
    attention_rank_analysis,
    build_index,
    recall_at,
    retrieve,
    zero_shot_guard,
)
from .text import Vocabulary
from .training import Pair, TrainConfig, TrainResult, train
from .units import RuleConfig, UnitSet

SYMMETRIC_MODES = tuple(m.value for m in EncoderMode)
SIDE_GRID = (
    (EncoderMode.SENTENCE_ONLY.value, EncoderMode.SENTENCE_ONLY.value),
    (EncoderMode.SENTENCE_ONLY.value, EncoderMode.FUSED.value),
    (EncoderMode.FUSED.value, EncoderMode.SENTENCE_ONLY.value),
    (EncoderMode.FUSED.value, EncoderMode.FUSED.value),
)


@dataclass
class Dataset:
    """Prepared train/eval splits over one shared vocabulary."""

    vocab: Vocabulary
    max_len: int
    train_pairs: list[Pair]
    eval_mentions: list[Example]
    eval_entities: list[Example]
    gold: dict[str, str]

    @classmethod
    def build(
        cls,
        train_mentions: Sequence[MentionRecord],
        train_entities: Sequence[EntityRecord],
        eval_mentions: Sequence[MentionRecord],
        eval_entities: Sequence[EntityRecord],
        max_len: int = 128,
        vocab: Vocabulary | None = None,
        units: Mapping[str, UnitSet] | None = None,
        rules: RuleConfig | None = None,
    ) -> "Dataset":
        zero_shot_guard((e.id for e in train_entities), (e.id for e in eval_entities))
        check_gold(train_mentions, (e.id for e in train_entities))
        check_gold(eval_mentions, (e.id for e in eval_entities))
        if vocab is None:
            vocab = vocabulary_from(list(train_mentions) + list(eval_mentions), list(train_entities) + list(eval_entities))
        tm = prepare(train_mentions, vocab, max_len, units, rules)
        te = dict(zip((e.id for e in train_entities), prepare(train_entities, vocab, max_len, units, rules)))
        pairs = [Pair(ex, te[r.gold_entity_id], r.gold_entity_id) for ex, r in zip(tm, train_mentions)]
        return cls(
            vocab,
            max_len,
            pairs,
            prepare(eval_mentions, vocab, max_len, units, rules),
            prepare(eval_entities, vocab, max_len, units, rules),
            {m.id: m.gold_entity_id for m in eval_mentions},
        )


@dataclass
class RunOutcome:
    model: BiEncoder
    training: TrainResult
    index: EntityIndex
    results: list[RetrievalResult]
    recall: dict[int, float]
    buckets: list[dict] = field(default_factory=list)

    def metrics(self) -> dict:
        return {
            "modes": [self.model.cfg.mode_mention, self.model.cfg.mode_entity],
            "recall": {str(k): v for k, v in self.recall.items()},
            "attention_buckets": self.buckets,
            "final_loss": self.training.epochs[-1]["mean_loss"],
        }


def quartile_boundaries(max_len: int) -> tuple[int, ...]:
    return tuple(round(max_len * q / 4) for q in range(5))


def lower_rank_share(buckets: Sequence[dict]) -> float:
    """Share of mentions outside the last (highest-rank) bucket."""
    return float(sum(b["share"] for b in buckets[:-1]))


def run(
    data: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    ks: Sequence[int] = (1, 8, 32, 64),
    boundaries: Sequence[int] | None = None,
    log: Callable[[dict], None] | None = None,
) -> RunOutcome:
    """Train a fresh model (initialised from ``train_cfg.seed``) and evaluate it."""
    if model_cfg.max_len != data.max_len:
        raise ValueError(f"model max_len {model_cfg.max_len} != dataset max_len {data.max_len}")
    model = BiEncoder(data.vocab, replace(model_cfg), seed=train_cfg.seed)
    result = train(model, data.train_pairs, train_cfg, log=log)
    index = build_index(model, data.eval_entities)
    depth = min(max(ks), len(index))
    results = retrieve(model, data.eval_mentions, index, depth)
    ks_eff = [k for k in ks if k <= depth]
    recall = recall_at(results, data.gold, ks_eff, index.ids)
    buckets = attention_rank_analysis(
        model, data.eval_mentions, results, data.gold, boundaries or quartile_boundaries(data.max_len), k=1
    )
    return RunOutcome(model, result, index, results, recall, buckets)


def ablation_grid() -> list[tuple[str, str]]:
    """The five symmetric modes followed by the mixed mention/entity pairs."""
    runs = [(m, m) for m in SYMMETRIC_MODES]
    runs += [pair for pair in SIDE_GRID if pair not in runs]
    return runs


def ablate(
    data: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    ks: Sequence[int] = (1, 8, 32, 64),
    seeds: Sequence[int] = (0,),
) -> dict[str, list[dict]]:
    """Recall tables for the symmetric modes and the side grid, averaged over ``seeds``."""
    scores: dict[tuple[str, str], dict[int, float]] = {}
    for mm, me in ablation_grid():
        per_seed = []
        for seed in seeds:
            cfg = replace(model_cfg, mode_mention=mm, mode_entity=me)
            out = run(data, cfg, replace(train_cfg, seed=seed), ks)
            per_seed.append(out.recall)
        scores[(mm, me)] = {k: float(np.mean([r[k] for r in per_seed])) for k in per_seed[0]}

    def row(pair, **label):
        return {**label, **{f"R@{k}": v for k, v in scores[pair].items()}}

    return {
        "modes": [row((m, m), mode=m) for m in SYMMETRIC_MODES],
        "sides": [row(p, mention=p[0], entity=p[1]) for p in SIDE_GRID],
    }


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(x[i]) for x in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(x.ljust(w) for x, w in zip(cell, widths)) for cell in cells]
    return "\n".join(lines)


def _cell(v) -> str:
    return f"{100 * v:.2f}" if isinstance(v, float) else str(v)


def dumps_metrics(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True)
