"""Mention/entity records, line-delimited JSON files and encoder-ready examples."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .text import TokenizedContext, Vocabulary, split_words, tokenize_entity, tokenize_mention
from .units import RuleConfig, UnitSet, align_units, extract_triplets


@dataclass(frozen=True)
class MentionRecord:
    id: str
    context_left: str
    mention: str
    context_right: str
    gold_entity_id: str = ""

    def raw_tokens(self) -> list[str]:
        return split_words(self.context_left) + split_words(self.mention) + split_words(self.context_right)

    def mention_bounds(self) -> tuple[int, int]:
        start = len(split_words(self.context_left))
        return start, start + len(split_words(self.mention))


@dataclass(frozen=True)
class EntityRecord:
    id: str
    title: str
    description: str

    def raw_tokens(self) -> list[str]:
        return split_words(self.description)


class RecordError(ValueError):
    pass


def _iter_json(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: malformed record ({exc.msg})") from None


def read_mentions(path: str | Path) -> list[MentionRecord]:
    out = []
    for lineno, rec in _iter_json(path):
        try:
            m = MentionRecord(
                id=str(rec["id"]),
                context_left=rec.get("context_left", ""),
                mention=rec["mention"],
                context_right=rec.get("context_right", ""),
                gold_entity_id=str(rec.get("gold_entity_id", "")),
            )
        except (KeyError, TypeError) as exc:
            raise RecordError(f"{path}:{lineno}: missing field {exc}") from None
        if not split_words(m.mention):
            raise RecordError(f"{path}:{lineno}: empty mention")
        out.append(m)
    return out


def read_entities(path: str | Path) -> list[EntityRecord]:
    out, seen = [], set()
    for lineno, rec in _iter_json(path):
        try:
            e = EntityRecord(id=str(rec["id"]), title=rec["title"], description=rec.get("description", ""))
        except (KeyError, TypeError) as exc:
            raise RecordError(f"{path}:{lineno}: missing field {exc}") from None
        if not split_words(e.title):
            raise RecordError(f"{path}:{lineno}: empty title")
        if e.id in seen:
            raise RecordError(f"{path}:{lineno}: duplicate entity id {e.id!r}")
        seen.add(e.id)
        out.append(e)
    return out


def write_records(path: str | Path, records: Iterable[MentionRecord | EntityRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


# ---------------------------------------------------------------- examples


@dataclass(frozen=True)
class Example:
    """Tokenized input with knowledge units already aligned to it."""

    id: str
    tc: TokenizedContext
    units: UnitSet


def raw_units(
    record: MentionRecord | EntityRecord,
    rules: RuleConfig | None = None,
) -> UnitSet:
    """Rule-extracted units over a record's raw context."""
    if isinstance(record, MentionRecord):
        s, e = record.mention_bounds()
        return extract_triplets(record.raw_tokens(), rules, record.id, breaks=(s, e))
    return extract_triplets(record.raw_tokens(), rules, record.id)


def prepare(
    records: Sequence[MentionRecord | EntityRecord],
    vocab: Vocabulary,
    max_len: int = 128,
    units: Mapping[str, UnitSet] | None = None,
    rules: RuleConfig | None = None,
) -> list[Example]:
    """Tokenize records and align their units.

    Units come from ``units`` when given (ids missing there get none) and from
    the rule extractor otherwise.
    """
    rules = rules or RuleConfig()
    out = []
    for r in records:
        if isinstance(r, MentionRecord):
            tc = tokenize_mention(r.context_left, r.mention, r.context_right, vocab, max_len)
        else:
            tc = tokenize_entity(r.title, r.description, vocab, max_len)
        us = units.get(r.id, UnitSet(r.id)) if units is not None else raw_units(r, rules)
        out.append(Example(r.id, tc, align_units(us, tc)))
    return out


def raw_lengths(records: Iterable[MentionRecord | EntityRecord]) -> dict[str, int]:
    return {r.id: len(r.raw_tokens()) for r in records}


def vocabulary_from(mentions: Iterable[MentionRecord], entities: Iterable[EntityRecord]) -> Vocabulary:
    texts = []
    for m in mentions:
        texts += [m.context_left, m.mention, m.context_right]
    for e in entities:
        texts += [e.title, e.description]
    return Vocabulary.build(texts)


def check_gold(mentions: Sequence[MentionRecord], entity_ids: Iterable[str]) -> None:
    ids = set(entity_ids)
    missing = sorted({m.gold_entity_id for m in mentions if m.gold_entity_id not in ids})
    if missing:
        raise RecordError(f"gold entities missing from the entity file: {missing[:10]}")


def warn_empty(path: str | Path, n: int) -> None:
    if n == 0:
        warnings.warn(f"{path}: no records", stacklevel=2)
