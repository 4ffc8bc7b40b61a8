"""Command-line entry point: ``ger <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import autodiff as ad
from . import checkpoint
from .data import (
    EntityRecord,
    MentionRecord,
    RecordError,
    check_gold,
    prepare,
    raw_lengths,
    raw_units,
    read_entities,
    read_mentions,
    vocabulary_from,
    warn_empty,
)
from .experiment import Dataset, ablate, format_table, quartile_boundaries
from .graph import build_flat, build_hierarchical, init_nodes, write_graph
from .hgan import extract_attention
from .model import BiEncoder, EncoderMode, ModelConfig
from .retrieval import (
    EvaluationError,
    IndexBuildError,
    ZeroShotViolation,
    attention_rank_analysis,
    build_index,
    load_index,
    read_results,
    recall_at,
    retrieve,
    save_index,
    write_results,
    zero_shot_guard,
)
from .synth import generate
from .training import Pair, TrainConfig, TrainingError, load_model, save_model, train
from .units import RuleConfig, TripletFileError, UnitSet, load_triplets, write_triplets

log = logging.getLogger("ger")

MODES = [m.value for m in EncoderMode]


def _ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _read_any(path: str) -> list[MentionRecord | EntityRecord]:
    """Read a record file holding either mentions or entities."""
    with open(path, encoding="utf-8") as fh:
        first = next((line for line in fh if line.strip()), None)
    if first is None:
        return []
    try:
        is_mention = "mention" in json.loads(first)
    except json.JSONDecodeError:
        raise RecordError(f"{path}: malformed first record") from None
    return read_mentions(path) if is_mention else read_entities(path)


def _units(paths: Sequence[str] | None, records: Sequence, max_triplets: int) -> dict[str, UnitSet] | None:
    """Merge triplet files for ``records``; None means use the rule extractor."""
    if not paths:
        return None
    lengths = raw_lengths(records)
    merged: dict[str, UnitSet] = {}
    for p in paths:
        for cid, us in load_triplets(p, lengths, max_triplets).items():
            if us.units or cid not in merged:
                merged[cid] = us
    return merged


def _model_config(args) -> ModelConfig:
    mm = args.mode_mention or args.mode
    me = args.mode_entity or args.mode
    return ModelConfig(
        dim=args.dim,
        max_len=args.max_len,
        enc_layers=args.enc_layers,
        enc_heads=args.enc_heads,
        hgan_layers=args.layers,
        hgan_heads=args.heads,
        head_merge=args.head_merge,
        lambda_init=args.lambda_init,
        freeze_lambda=args.freeze_lambda,
        mode_mention=mm,
        mode_entity=me,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        clip_norm=args.clip,
        warmup=args.warmup,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        ratio=args.ratio,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--mode", choices=MODES, default="fused", help="encoder mode for both sides")
    g.add_argument("--mode-mention", choices=MODES, help="override the mention-side mode")
    g.add_argument("--mode-entity", choices=MODES, help="override the entity-side mode")
    g.add_argument("--layers", type=int, default=3, help="graph attention layers")
    g.add_argument("--heads", type=int, default=8, help="graph attention heads")
    g.add_argument("--head-merge", choices=["mean", "concat"], default="mean")
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--max-len", type=int, default=128)
    g.add_argument("--enc-layers", type=int, default=2)
    g.add_argument("--enc-heads", type=int, default=4)
    g.add_argument("--lambda-init", type=float, default=0.5)
    g.add_argument("--freeze-lambda", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--batch", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--weight-decay", type=float, default=0.01)
    g.add_argument("--clip", type=float, default=1.0)
    g.add_argument("--warmup", type=float, default=0.1)
    g.add_argument("--epochs", type=int, default=5)
    g.add_argument("--ratio", type=float, default=1.0, help="fraction of training pairs to use")
    g.add_argument("--seed", type=int, default=0)


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    corpus = generate(args.seed, args.train_entities, args.eval_entities, args.mentions_per_entity)
    for key, path in corpus.write(args.out).items():
        log.info("wrote %s", path)
    return 0


def cmd_extract(args) -> int:
    records = _read_any(args.input)
    warn_empty(args.input, len(records))
    rules = RuleConfig.from_file(args.lexicon, args.max_triplets) if args.lexicon else RuleConfig(max_triplets=args.max_triplets)
    n = write_triplets(args.output, (raw_units(r, rules) for r in records))
    log.info("%d units from %d records", n, len(records))
    return 0


def _validator(mentions, entities, gold, ks):
    def evaluate(model):
        index = build_index(model, entities)
        depth = min(max(ks), len(index))
        results = retrieve(model, mentions, index, depth)
        return {f"R@{k}": v for k, v in recall_at(results, gold, [k for k in ks if k <= depth]).items()}

    return evaluate


def cmd_train(args) -> int:
    mentions = read_mentions(args.train_mentions)
    entities = read_entities(args.train_entities)
    eval_m = read_mentions(args.eval_mentions) if args.eval_mentions else []
    eval_e = read_entities(args.eval_entities) if args.eval_entities else []
    if eval_e:
        zero_shot_guard((e.id for e in entities), (e.id for e in eval_e))
    check_gold(mentions, (e.id for e in entities))
    model_cfg = _model_config(args)
    train_cfg = _train_config(args)
    units = _units(args.triplets, list(mentions) + list(entities), args.max_triplets)
    vocab = vocabulary_from(list(mentions) + eval_m, list(entities) + eval_e)
    tm = prepare(mentions, vocab, model_cfg.max_len, units)
    te = dict(zip((e.id for e in entities), prepare(entities, vocab, model_cfg.max_len, units)))
    pairs = [Pair(ex, te[r.gold_entity_id], r.gold_entity_id) for ex, r in zip(tm, mentions)]
    evaluate = None
    if eval_m and eval_e:
        check_gold(eval_m, (e.id for e in eval_e))
        evaluate = _validator(
            prepare(eval_m, vocab, model_cfg.max_len),
            prepare(eval_e, vocab, model_cfg.max_len),
            {m.id: m.gold_entity_id for m in eval_m},
            args.k_list,
        )
    model = BiEncoder(vocab, model_cfg, seed=train_cfg.seed)
    result = train(model, pairs, train_cfg, evaluate=evaluate, log=lambda rec: log.debug("%s", rec))
    fp = save_model(args.out, model, train_cfg, {"train_entities": sorted(e.id for e in entities)})
    if args.log:
        result.write_log(args.log)
    log.info("saved %s (sha256 %s), final mean loss %.4f", args.out, fp, result.epochs[-1]["mean_loss"])
    return 0


def cmd_encode_entities(args) -> int:
    model, meta = load_model(args.checkpoint)
    entities = read_entities(args.entities)
    if not args.allow_seen:
        zero_shot_guard(meta.get("train_entities", []), (e.id for e in entities))
    units = _units(args.triplets, entities, args.max_triplets)
    examples = prepare(entities, model.vocab, model.cfg.max_len, units)
    index = build_index(model, examples, checkpoint.fingerprint(args.checkpoint), args.batch)
    save_index(args.out, index)
    log.info("indexed %d entities (d=%d)", len(index), index.dim)
    return 0


def cmd_retrieve(args) -> int:
    model, _ = load_model(args.checkpoint)
    index = load_index(args.index)
    fp = checkpoint.fingerprint(args.checkpoint)
    if index.fingerprint and index.fingerprint != fp:
        raise IndexBuildError(f"index was built from checkpoint {index.fingerprint[:12]}, not {fp[:12]}")
    mentions = read_mentions(args.mentions)
    units = _units(args.triplets, mentions, args.max_triplets)
    examples = prepare(mentions, model.vocab, model.cfg.max_len, units)
    results = retrieve(model, examples, index, min(args.k, len(index)), args.batch)
    write_results(args.out, results)
    log.info("retrieved top-%d for %d mentions", min(args.k, len(index)), len(results))
    return 0


def cmd_eval(args) -> int:
    results = read_results(args.results)
    mentions = read_mentions(args.mentions)
    gold = {m.id: m.gold_entity_id for m in mentions}
    entity_ids = [e.id for e in read_entities(args.entities)] if args.entities else None
    recall = recall_at(results, gold, args.k_list, entity_ids)
    report: dict = {"recall": {f"R@{k}": v for k, v in recall.items()}, "mentions": len(results)}
    print(format_table([report["recall"]]))
    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
        by_id = {m.id: m for m in mentions}
        examples = prepare([by_id[r.mention_id] for r in results], model.vocab, model.cfg.max_len, {})
        bounds = args.attention_buckets or list(quartile_boundaries(model.cfg.max_len))
        rows = attention_rank_analysis(model, examples, results, gold, bounds, k=max(args.k_list))
        report["attention_buckets"] = rows
        print()
        print(format_table([{"bucket": f"[{r['bucket'][0]},{r['bucket'][1]})", **{k: v for k, v in r.items() if k != "bucket"}} for r in rows]))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def _dataset_paths(args) -> dict[str, str]:
    d = Path(args.data_dir) if args.data_dir else None
    out = {}
    for key in ("train_mentions", "train_entities", "eval_mentions", "eval_entities"):
        explicit = getattr(args, key)
        if explicit:
            out[key] = explicit
        elif d is not None:
            out[key] = str(d / f"{key}.jsonl")
        else:
            raise SystemExit(f"--{key.replace('_', '-')} or --data-dir is required")
    return out


def cmd_ablate(args) -> int:
    paths = _dataset_paths(args)
    records = {
        "train_mentions": read_mentions(paths["train_mentions"]),
        "train_entities": read_entities(paths["train_entities"]),
        "eval_mentions": read_mentions(paths["eval_mentions"]),
        "eval_entities": read_entities(paths["eval_entities"]),
    }
    data = Dataset.build(**records, max_len=args.max_len)
    tables = ablate(data, _model_config(args), _train_config(args), args.k_list, range(args.seed, args.seed + args.seeds))
    print("encoder modes (both sides)")
    print(format_table(tables["modes"]))
    print()
    print("mention x entity encoders")
    print(format_table(tables["sides"]))
    if args.out:
        Path(args.out).write_text(json.dumps(tables, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_inspect_attention(args) -> int:
    model, _ = load_model(args.checkpoint)
    records = read_mentions(args.input) if args.side == "mention" else read_entities(args.input)
    chosen = [r for r in records if r.id == args.id] if args.id else records[:1]
    if not chosen:
        raise RecordError(f"no record with id {args.id!r} in {args.input}")
    rec = chosen[0]
    units = _units(args.triplets, records, args.max_triplets)
    (ex,) = prepare([rec], model.vocab, model.cfg.max_len, units)
    side = model.mention if args.side == "mention" else model.entity
    flat = side.mode is EncoderMode.FLAT_GAT
    g = (build_flat if flat else build_hierarchical)(ex.units)
    with ad.no_grad():
        out = side.text.encode([ex.tc])
        H0 = init_nodes(g, out.Y[0], ex.tc.span, side.graph_init)
        dump = extract_attention(H0, g, side.hgan)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in dump:
            fh.write(json.dumps({"context_id": rec.id, **row}) + "\n")
    if args.graph_out:
        write_graph(args.graph_out, g)
    log.info("%d attention rows for %s (%d nodes)", len(dump), rec.id, g.n_nodes)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ger", description="Graph-enhanced bi-encoder entity retrieval")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a seeded synthetic distractor corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-entities", type=int, default=300)
    p.add_argument("--eval-entities", type=int, default=200)
    p.add_argument("--mentions-per-entity", type=int, default=2)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("extract", help="rule-extract subject/predicate/object units")
    p.add_argument("--input", required=True, help="mention or entity record file")
    p.add_argument("--output", required=True)
    p.add_argument("--lexicon", help="verb lexicon, one word per line")
    p.add_argument("--max-triplets", type=int, default=16)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a bi-encoder")
    p.add_argument("--train-mentions", required=True)
    p.add_argument("--train-entities", required=True)
    p.add_argument("--eval-mentions", help="included in the vocabulary")
    p.add_argument("--eval-entities", help="checked for overlap with training entities")
    p.add_argument("--triplets", action="append", help="triplet file (repeatable); default is the rule extractor")
    p.add_argument("--max-triplets", type=int, default=16)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-step metrics log")
    p.add_argument("--k-list", type=_ints, default=[1, 8, 32, 64], help="validation recall cut-offs")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode-entities", help="build the cached entity index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--triplets", action="append")
    p.add_argument("--max-triplets", type=int, default=16)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--allow-seen", action="store_true", help="skip the check that no entity was seen in training")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode_entities)

    p = sub.add_parser("retrieve", help="top-k entities per mention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--triplets", action="append")
    p.add_argument("--max-triplets", type=int, default=16)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="recall@k and optional attention-rank buckets")
    p.add_argument("--results", required=True)
    p.add_argument("--mentions", required=True)
    p.add_argument("--entities", help="indexed entity file; allows recall beyond the result depth")
    p.add_argument("--k-list", type=_ints, default=[1, 8, 32, 64])
    p.add_argument("--checkpoint", help="enables the attention-rank analysis")
    p.add_argument("--attention-buckets", type=_ints, help="bucket boundaries, default quartiles of max_len")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every encoder mode and side combination")
    p.add_argument("--data-dir", help="directory written by `generate`")
    for key in ("train-mentions", "train-entities", "eval-mentions", "eval-entities"):
        p.add_argument(f"--{key}")
    p.add_argument("--k-list", type=_ints, default=[1, 8, 32, 64])
    p.add_argument("--seeds", type=int, default=1, help="runs per cell, seeds counting up from --seed")
    p.add_argument("--out")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-attention", help="dump head-averaged graph attention for one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--side", choices=["mention", "entity"], default="mention")
    p.add_argument("--id", help="record id, default the first record")
    p.add_argument("--triplets", action="append")
    p.add_argument("--max-triplets", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--graph-out", help="also write the node/edge roster")
    p.set_defaults(func=cmd_inspect_attention)
    return parser


EXPECTED_ERRORS = (
    RecordError,
    TripletFileError,
    ZeroShotViolation,
    EvaluationError,
    IndexBuildError,
    TrainingError,
    checkpoint.CheckpointError,
    FileNotFoundError,
    ValueError,
)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", force=True)
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"ger {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
