"""Subject-predicate-object knowledge units.

Units come either from :func:`extract_triplets`, a deterministic rule
grammar, or from a triplet file produced by an external extractor
(:func:`load_triplets`).  Spans are ``[start, end)`` token intervals over the
raw context; :func:`align_spans` moves them into encoder-input coordinates.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .text import TokenizedContext

Span = tuple[int, int]

SENTENCE_PUNCT = frozenset(". ! ? ; :".split())
CONJUNCTIONS = frozenset("and but or nor yet so".split())
PREPOSITIONS = frozenset(
    "of in on at to from with by for into onto near over under about across through toward towards "
    "after before during without within between among against around behind beyond upon as than off "
    "inside outside past".split()
)
SUBORDINATORS = frozenset("who whom whose which that where when while because although though if since until".split())
DETERMINERS = frozenset(
    "the a an this these those her his its their our my your some every each no any all many several".split()
)
ADVERBS = frozenset("not never also then soon once still often always very just only too again now".split())
AUXILIARIES = frozenset(
    "am is are was were be been being has have had do does did will would can could may might must shall should".split()
)


def default_lexicon() -> frozenset[str]:
    text = resources.files("ger").joinpath("resources/verbs.txt").read_text(encoding="utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))


@dataclass(frozen=True)
class RuleConfig:
    lexicon: frozenset[str] = field(default_factory=default_lexicon)
    max_triplets: int = 16

    @classmethod
    def from_file(cls, path: str | Path, max_triplets: int = 16) -> "RuleConfig":
        words = Path(path).read_text(encoding="utf-8").split()
        return cls(lexicon=frozenset(w.lower() for w in words if not w.startswith("#")), max_triplets=max_triplets)


@dataclass(frozen=True, order=True)
class KnowledgeUnit:
    subject: Span
    predicate: Span
    object: Span

    def __post_init__(self):
        spans = (self.subject, self.predicate, self.object)
        for s, e in spans:
            if not (0 <= s < e):
                raise ValueError(f"invalid span [{s}, {e})")
        ordered = sorted(spans)
        for (_, e1), (s2, _) in zip(ordered, ordered[1:]):
            if s2 < e1:
                raise ValueError(f"overlapping spans in unit {spans}")

    @property
    def spans(self) -> tuple[Span, Span, Span]:
        return self.subject, self.predicate, self.object

    def within(self, n_tokens: int) -> bool:
        return all(e <= n_tokens for _, e in self.spans)

    def surface(self, tokens: Sequence[str]) -> tuple[str, str, str]:
        return tuple(" ".join(tokens[s:e]) for s, e in self.spans)


@dataclass(frozen=True)
class UnitSet:
    context_id: str
    units: tuple[KnowledgeUnit, ...] = ()

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self):
        return iter(self.units)


def _canonical(units: Iterable[KnowledgeUnit], max_triplets: int) -> tuple[KnowledgeUnit, ...]:
    uniq = sorted(set(units), key=lambda u: (u.subject[0], u.predicate[0], u.object[0], u.subject, u.predicate, u.object))
    return tuple(uniq[:max_triplets])


# ---------------------------------------------------------------- rule extractor


def _is_lexical_verb(word: str, lexicon: frozenset[str]) -> bool:
    if word in lexicon:
        return True
    if word.endswith("s") and not word.endswith("ss"):
        if word[:-1] in lexicon or (word.endswith("es") and word[:-2] in lexicon):
            return True
        if word.endswith("ies") and word[:-3] + "y" in lexicon:
            return True
    for suffix in ("ed", "ing"):
        if word.endswith(suffix):
            stem = word[: -len(suffix)]
            candidates = {stem, stem + "e"}
            if len(stem) > 2 and stem[-1] == stem[-2]:
                candidates.add(stem[:-1])
            if suffix == "ed" and stem.endswith("i"):
                candidates.add(stem[:-1] + "y")
            if candidates & lexicon:
                return True
            if len(word) >= 6:
                return True
    return False


def tag_verbs(tokens: Sequence[str], rules: RuleConfig) -> list[bool]:
    """Mark tokens acting as verbs.

    A lexicon hit directly after a determiner reads as a noun ("the ship"),
    and a bare lexicon form sitting between a noun and another verb reads as
    the head of a compound noun ("colony ship arrived").
    """
    n = len(tokens)
    tags = [False] * n
    for i, w in enumerate(tokens):
        if w in SENTENCE_PUNCT or w in CONJUNCTIONS or w in PREPOSITIONS or w in SUBORDINATORS:
            continue
        if w in DETERMINERS or w in ADVERBS or not w[0].isalnum():
            continue
        if i > 0 and tokens[i - 1] in DETERMINERS:
            continue
        tags[i] = w in AUXILIARIES or _is_lexical_verb(w, rules.lexicon)
    for i in range(n - 1):
        if (
            tags[i]
            and tags[i + 1]
            and tokens[i] not in AUXILIARIES
            and tokens[i] in rules.lexicon
            and i > 0
            and _nominal(tokens[i - 1])
            and not tags[i - 1]
        ):
            tags[i] = False
    return tags


def _nominal(word: str) -> bool:
    return word[0].isalnum() and word not in (
        CONJUNCTIONS | PREPOSITIONS | SUBORDINATORS | ADVERBS | AUXILIARIES | DETERMINERS
    )


def _runs(flags: Sequence[bool], lo: int, hi: int, breaks: frozenset[int]) -> list[Span]:
    out: list[Span] = []
    start = None
    for i in range(lo, hi):
        if start is not None and (not flags[i] or i in breaks):
            out.append((start, i))
            start = None
        if flags[i] and start is None:
            start = i
    if start is not None:
        out.append((start, hi))
    return out


def _clauses(tokens: Sequence[str], verbs: Sequence[bool]) -> list[Span]:
    """Split on sentence punctuation, then on conjunctions joining two verbal parts."""
    sentences: list[Span] = []
    start = 0
    for i, w in enumerate(tokens):
        if w in SENTENCE_PUNCT:
            if i > start:
                sentences.append((start, i))
            start = i + 1
    if start < len(tokens):
        sentences.append((start, len(tokens)))

    clauses: list[Span] = []
    for s, e in sentences:
        cur = s
        for i in range(s, e):
            if tokens[i] in CONJUNCTIONS and any(verbs[cur:i]) and any(verbs[i + 1 : e]):
                # the right part must hold its own verb before any later conjunction
                nxt = next((j for j in range(i + 1, e) if tokens[j] in CONJUNCTIONS), e)
                if any(verbs[i + 1 : nxt]):
                    clauses.append((cur, i))
                    cur = i + 1
        clauses.append((cur, e))
    return clauses


def extract_triplets(
    tokens: Sequence[str],
    rules: RuleConfig | None = None,
    context_id: str = "",
    breaks: Iterable[int] = (),
) -> UnitSet:
    """Rule-based SPO extraction over one tokenized context.

    The predicate is a maximal run of verbs, the subject is the first noun
    chunk of its clause before the predicate (the head conjunct of a
    coordinated subject), and the object is the nearest noun chunk after it.
    ``breaks`` lists token indices before which no chunk may continue, which
    keeps spans from straddling a mention boundary.
    """
    rules = rules or RuleConfig()
    tokens = [t.lower() for t in tokens]
    if len(tokens) < 2:
        return UnitSet(context_id)
    brk = frozenset(breaks)
    verbs = tag_verbs(tokens, rules)
    nominal = [(not v) and (_nominal(w) or w in DETERMINERS) for w, v in zip(tokens, verbs)]
    found: list[KnowledgeUnit] = []
    for lo, hi in _clauses(tokens, verbs):
        groups = _runs(verbs, lo, hi, brk)
        chunks = _runs(nominal, lo, hi, brk)
        for g_idx, (ps, pe) in enumerate(groups):
            left = [c for c in chunks if c[1] <= ps]
            limit = groups[g_idx + 1][0] if g_idx + 1 < len(groups) else hi
            right = [c for c in chunks if c[0] >= pe and c[1] <= limit]
            if left and right:
                found.append(KnowledgeUnit(left[0], (ps, pe), right[0]))
    return UnitSet(context_id, _canonical(found, rules.max_triplets))


# ---------------------------------------------------------------- triplet files


class TripletFileError(ValueError):
    """One or more rows of a triplet file failed validation."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


_FIELDS = ("s_start", "s_end", "p_start", "p_end", "o_start", "o_end")


def load_triplets(
    path: str | Path,
    contexts: Mapping[str, int],
    max_triplets: int = 16,
) -> dict[str, UnitSet]:
    """Read a triplet file and validate every row.

    ``contexts`` maps context id to its raw token count.  Rows referencing an
    unknown id, spans outside the context, and overlapping spans are all
    reported by row number in a single :class:`TripletFileError`.
    """
    problems: list[str] = []
    rows: dict[str, list[KnowledgeUnit]] = {cid: [] for cid in contexts}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cid = str(rec["context_id"])
                vals = [rec[k] for k in _FIELDS]
                if not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
                    raise TypeError("span bounds must be integers")
            except (ValueError, KeyError, TypeError) as exc:
                problems.append(f"row {lineno}: parse error ({exc})")
                continue
            if cid not in contexts:
                problems.append(f"row {lineno}: unknown context id {cid!r}")
                continue
            s, p, o = (vals[0], vals[1]), (vals[2], vals[3]), (vals[4], vals[5])
            n = contexts[cid]
            if any(a < 0 or b > n or a >= b for a, b in (s, p, o)):
                problems.append(f"row {lineno}: span out of bounds for context {cid!r} of {n} tokens")
                continue
            try:
                unit = KnowledgeUnit(s, p, o)
            except ValueError:
                problems.append(f"row {lineno}: overlapping spans {s}, {p}, {o}")
                continue
            rows[cid].append(unit)
    if problems:
        raise TripletFileError(problems)
    out: dict[str, UnitSet] = {}
    for cid, units in rows.items():
        if len(set(units)) < len(units):
            warnings.warn(f"context {cid!r}: {len(units) - len(set(units))} duplicate unit rows dropped", stacklevel=2)
        if len(set(units)) > max_triplets:
            warnings.warn(f"context {cid!r}: keeping the first {max_triplets} units", stacklevel=2)
        out[cid] = UnitSet(cid, _canonical(units, max_triplets))
    return out


def write_triplets(path: str | Path, unitsets: Iterable[UnitSet]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for us in unitsets:
            for u in us.units:
                rec = {"context_id": us.context_id}
                rec.update(zip(_FIELDS, (*u.subject, *u.predicate, *u.object)))
                fh.write(json.dumps(rec) + "\n")
                n += 1
    return n


# ---------------------------------------------------------------- alignment


def align_spans(unit: KnowledgeUnit, tc: TokenizedContext) -> KnowledgeUnit | None:
    """Re-index a raw-context unit into ``tc`` positions.

    Spans are clipped to the truncation window; the unit is dropped (None)
    when a span empties or straddles an inserted marker.
    """
    n_raw = len(tc.raw_positions)
    mapped = []
    for s, e in unit.spans:
        if e > n_raw:
            return None
        kept = [tc.raw_positions[i] for i in range(s, e) if tc.raw_positions[i] >= 0]
        if not kept or kept[-1] - kept[0] + 1 != len(kept):
            return None
        mapped.append((kept[0], kept[-1] + 1))
    return KnowledgeUnit(*mapped)


def align_units(units: UnitSet, tc: TokenizedContext) -> UnitSet:
    aligned = [a for u in units for a in [align_spans(u, tc)] if a is not None]
    return UnitSet(units.context_id, tuple(aligned))
