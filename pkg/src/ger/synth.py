"""Seeded synthetic corpora with distractor-heavy mention contexts.

Entities are ``<descriptor> <kind>`` pairs with a home port and a duty.  A
mention context names its entity once, between markers, and surrounds it
with repeated references to other entities built from the same word pools,
so a whole-context summary is easily pulled toward a distractor.  Training
and evaluation entities are disjoint pairs over a shared vocabulary.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EntityRecord, MentionRecord, write_records

DESCRIPTORS = (
    "crimson azure golden silver amber emerald obsidian ivory scarlet cobalt violet copper "
    "jade onyx coral indigo bronze pearl ruby slate ashen frost ember dusk"
).split()
KINDS = (
    "freighter station guild robot colony fortress beacon engine archive citadel drone outpost "
    "vessel council temple foundry harbor relay shrine tower market academy garrison reactor"
).split()
PLACES = "mars titan europa vega ceres io rhea lyra orion draco kepler sirius".split()
PEOPLE = "creators pilots miners traders settlers scholars smugglers engineers".split()
NAMES = "yonda kiro maren tobin sela arvo nyla pell".split()
OBJECTS = "cargo relic signal gate vault crystal orbit convoy".split()
# (base, third person, past) forms; the bases are in the extractor lexicon
VERBS = [
    ("guard", "guards", "guarded"),
    ("patrol", "patrols", "patrolled"),
    ("defend", "defends", "defended"),
    ("visit", "visits", "visited"),
    ("repair", "repairs", "repaired"),
    ("attack", "attacks", "attacked"),
    ("board", "boards", "boarded"),
    ("protect", "protects", "protected"),
    ("transport", "transports", "transported"),
    ("explore", "explores", "explored"),
    ("rescue", "rescues", "rescued"),
    ("serve", "serves", "served"),
    ("watch", "watches", "watched"),
    ("follow", "follows", "followed"),
    ("command", "commands", "commanded"),
]
FILLERS = "yesterday later meanwhile today afterwards".split()


@dataclass
class Corpus:
    train_mentions: list[MentionRecord]
    train_entities: list[EntityRecord]
    eval_mentions: list[MentionRecord]
    eval_entities: list[EntityRecord]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "train_mentions": out / "train_mentions.jsonl",
            "train_entities": out / "train_entities.jsonl",
            "eval_mentions": out / "eval_mentions.jsonl",
            "eval_entities": out / "eval_entities.jsonl",
        }
        for key, path in paths.items():
            write_records(path, getattr(self, key))
        return paths


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _entity_text(rng, desc: str, kind: str, place: str, duty: tuple[str, str]) -> str:
    verb, obj = duty
    people = _pick(rng, PEOPLE)
    return (
        f"the {desc} {kind} is a {kind} from {place} . "
        f"it {verb} the {obj} of {place} . "
        f"many {people} {_pick(rng, VERBS)[2]} the {desc} {kind} ."
    )


def _distractor_sentence(rng, name: str) -> str:
    base, verb_s, verb_d = _pick(rng, VERBS)
    form = int(rng.integers(4))
    if form == 0:
        return f"the {name} {verb_s} the {_pick(rng, OBJECTS)} near {_pick(rng, PLACES)} ."
    if form == 1:
        return f"many {_pick(rng, PEOPLE)} {verb_d} the {name} ."
    if form == 2:
        return f"{_pick(rng, NAMES)} and her {_pick(rng, PEOPLE)} {base} the {name} ."
    return f"the {name} was {verb_d} by the {_pick(rng, PEOPLE)} of {_pick(rng, PLACES)} ."


def _mention(rng, mid: str, entity: dict, pool: list[tuple[str, str]]) -> MentionRecord:
    d1 = " ".join(_pick(rng, pool))
    d2 = " ".join(_pick(rng, pool))
    _, verb_s, _ = _pick(rng, VERBS)
    left = [_pick(rng, FILLERS)]
    left += [_distractor_sentence(rng, d1), _distractor_sentence(rng, d2), _distractor_sentence(rng, d1)]
    left.append(f"then the {d1} {verb_s}")
    right = [f"near {entity['place']} ."]
    right += [_distractor_sentence(rng, d2), _distractor_sentence(rng, d1)]
    return MentionRecord(
        id=mid,
        context_left=" ".join(left),
        mention=f"{entity['desc']} {entity['kind']}",
        context_right=" ".join(right),
        gold_entity_id=entity["id"],
    )


def generate(
    seed: int = 0,
    n_train_entities: int = 300,
    n_eval_entities: int = 200,
    mentions_per_train_entity: int = 2,
    mentions_per_eval_entity: int = 1,
) -> Corpus:
    """Build a corpus; the same seed always yields the same records."""
    rng = np.random.default_rng(seed)
    combos = list(itertools.product(DESCRIPTORS, KINDS))
    need = n_train_entities + n_eval_entities
    if need > len(combos):
        raise ValueError(f"at most {len(combos)} distinct entities available, {need} requested")
    order = rng.permutation(len(combos))[:need]
    entities = []
    for i, ci in enumerate(order):
        desc, kind = combos[ci]
        split = "train" if i < n_train_entities else "eval"
        entities.append(
            {
                "id": f"{split}-e{i:04d}",
                "desc": desc,
                "kind": kind,
                "place": _pick(rng, PLACES),
                "duty": (_pick(rng, VERBS)[1], _pick(rng, OBJECTS)),
                "split": split,
            }
        )
    pool = [combos[i] for i in order]

    def records(split: str, per_entity: int):
        ents, mentions = [], []
        for e in (x for x in entities if x["split"] == split):
            ents.append(EntityRecord(e["id"], f"{e['desc']} {e['kind']}", _entity_text(rng, e["desc"], e["kind"], e["place"], e["duty"])))
            for j in range(per_entity):
                mentions.append(_mention(rng, f"{split}-m{len(mentions):05d}", e, pool))
        return mentions, ents

    tm, te = records("train", mentions_per_train_entity)
    em, ee = records("eval", mentions_per_eval_entity)
    return Corpus(tm, te, em, ee)
