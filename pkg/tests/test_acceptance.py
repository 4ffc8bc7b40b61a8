"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from ger import autodiff as ad
from ger.autodiff import Tensor
from ger.cli import main
from ger.data import prepare, vocabulary_from
from ger.experiment import Dataset, lower_rank_share, run
from ger.graph import CENTRAL, HUB, GraphInit, build_flat, build_hierarchical, init_nodes, init_nodes_batch
from ger.hgan import HganStack, stack_forward, stack_forward_batch
from ger.model import BiEncoder, EncoderMode, ModelConfig
from ger.retrieval import EntityIndex, RetrievalResult, build_index, recall_at, retrieve
from ger.synth import generate
from ger.training import TrainConfig, in_batch_loss, loss_value
from ger.units import KnowledgeUnit, UnitSet

# frozen configuration for the directional experiment
DIRECTIONAL_MODEL = ModelConfig(dim=32, max_len=64, hgan_heads=8)
DIRECTIONAL_TRAIN = TrainConfig(epochs=5, lr=3e-3, batch_size=16)
DIRECTIONAL_SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    def report(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else ""))
        return ok

    return report


def random_unitset(rng, n, length=60, cid="c"):
    units = []
    for _ in range(n):
        cuts = np.sort(rng.choice(np.arange(1, length), 5, replace=False))
        spans = [(int(cuts[0]) - 1, int(cuts[0])), (int(cuts[1]), int(cuts[2])), (int(cuts[3]), int(cuts[4]))]
        perm = rng.permutation(3)
        units.append(KnowledgeUnit(*[spans[i] for i in perm]))
    return UnitSet(cid, tuple(units))


def test_gradient_integrity(verdict):
    corpus = generate(seed=1, n_train_entities=2, n_eval_entities=1, mentions_per_train_entity=1)
    ms, es = corpus.train_mentions[:2], corpus.train_entities[:2]
    vocab = vocabulary_from(ms, es)
    cfg = ModelConfig(dim=8, max_len=40, enc_heads=2, hgan_layers=2, hgan_heads=2)
    model = BiEncoder(vocab, cfg, seed=0)
    mentions, entities = prepare(ms, vocab, cfg.max_len), prepare(es, vocab, cfg.max_len)
    gold = {e.id: i for i, e in enumerate(entities)}
    entities = [entities[gold[m.gold_entity_id]] for m in ms]
    assert all(len(ex.units) for ex in mentions + entities), "fixture must exercise the graph path"
    start = time.perf_counter()
    report = ad.grad_check(lambda: in_batch_loss(model.batch_scores(mentions, entities)), model.trainable(), tolerance=1e-4)
    elapsed = time.perf_counter() - start
    ok = report.passed and elapsed < 60 and len(report.checked) == len(model.trainable())
    verdict(1, "gradient integrity", ok, f"max rel err {max(report.errors.values()):.2e}, {elapsed:.1f}s")
    assert report.passed, report.summary()
    assert elapsed < 60


def test_loss_identities(verdict):
    checks = [
        loss_value(np.array([[4.2]])) == 0.0,
        all(abs(loss_value(np.full((b, b), -0.3)) - 2 * math.log(b)) < 1e-9 for b in range(2, 33)),
        abs(loss_value(np.array([[2.0, 0.0], [0.0, 2.0]])) - 2 * math.log(1 + math.exp(-2))) < 1e-9,
    ]
    rng = np.random.default_rng(0)
    for _ in range(200):
        S = rng.normal(scale=3, size=(5, 5))
        checks.append(abs(loss_value(S + rng.normal(scale=100)) - loss_value(S)) < 1e-9)
    ok = verdict(2, "loss identities", all(checks))
    assert ok


def test_lambda_zero_equals_sentence_only(verdict):
    corpus = generate(seed=3, n_train_entities=10, n_eval_entities=500)
    data = Dataset.build(corpus.train_mentions, corpus.train_entities, corpus.eval_mentions, corpus.eval_entities, max_len=48)
    model = BiEncoder(data.vocab, ModelConfig(dim=16, max_len=48, hgan_heads=4), seed=7)
    model.mention.lam.data = np.array(0.0)
    model.entity.lam.data = np.array(0.0)
    k = len(data.eval_entities)

    def rankings():
        index = build_index(model, data.eval_entities)
        res = retrieve(model, data.eval_mentions, index, k)
        return [(r.entity_ids, np.array(r.scores).tobytes()) for r in res]

    fused = rankings()
    model.set_modes(EncoderMode.SENTENCE_ONLY.value, EncoderMode.SENTENCE_ONLY.value)
    sentence = rankings()
    ok = verdict(3, "lambda=0 matches sentence_only", fused == sentence, f"{k} entities, {len(fused)} mentions")
    assert ok


def test_graph_structure(verdict):
    rng = np.random.default_rng(0)
    failures = 0
    for _ in range(1000):
        n = int(rng.integers(0, 17))
        us = random_unitset(rng, n)
        g, f = build_hierarchical(us), build_flat(us)
        good = (
            g.degree(0) == n
            and f.degree(0) == 3 * n
            and g.n_nodes == 1 + 4 * n
            and len(g.edges) == 7 * n
            and f.n_nodes == 1 + 3 * n
            and len(f.edges) == 6 * n
            and g.roles[0] == CENTRAL
            and all(g.degree(i) == (4 if r == HUB else 3) for i, r in enumerate(g.roles[1:], start=1))
            and all(f.degree(i) == 3 for i in range(1, f.n_nodes))
            and np.array_equal(g.adjacency(), g.adjacency().T)
        )
        failures += not good
    ok = verdict(4, "graph structure", failures == 0, f"{failures} failures over 1000 unit sets")
    assert ok


def test_permutation_invariance(verdict):
    rng = np.random.default_rng(1)
    d, L = 8, 60
    gi = GraphInit(d, rng)
    stack = HganStack(d, 3, 8, rng)
    worst = 0.0
    for case in range(100):
        us = random_unitset(rng, int(rng.integers(1, 9)), L)
        shuffled = UnitSet(us.context_id, tuple(us.units[i] for i in rng.permutation(len(us))))
        Y = Tensor(rng.normal(size=(L, d)))
        outs = []
        for s in (us, shuffled):
            g = build_hierarchical(s)
            outs.append(stack_forward(init_nodes(g, Y, (0, 1), gi), g, stack).data[0])
        worst = max(worst, float(np.max(np.abs(outs[0] - outs[1]))))
    ok = verdict(5, "permutation invariance", worst < 1e-9, f"max change {worst:.1e}")
    assert ok


def test_attention_normalization(verdict):
    rng = np.random.default_rng(2)
    worst, leaked, layers_seen = 0.0, 0, 0
    for trial in range(50):
        d, L = 6, 50
        gi = GraphInit(d, rng)
        stack = HganStack(d, int(rng.integers(1, 4)), int(rng.integers(1, 9)), rng)
        build = build_flat if trial % 2 else build_hierarchical
        graphs = [build(random_unitset(rng, int(rng.integers(0, 10)), L)) for _ in range(4)]
        nb = init_nodes_batch(graphs, Tensor(rng.normal(scale=3, size=(4, L, d))), [(0, 1)] * 4, gi.w_triple)
        _, alphas = stack_forward_batch(nb, stack)
        for alpha in alphas:
            layers_seen += 1
            a = alpha.data
            adj = np.broadcast_to(nb.adjacency[:, None], a.shape)
            real = np.zeros(a.shape[:-1], dtype=bool)
            for b, g in enumerate(graphs):
                real[b, :, : g.n_nodes] = True
            worst = max(worst, float(np.max(np.abs(a.sum(-1)[real] - 1.0))))
            leaked += int(np.count_nonzero(a[~adj]))
    ok = verdict(6, "attention normalization", worst < 1e-9 and leaked == 0, f"{layers_seen} layers, max row error {worst:.1e}")
    assert ok


def test_retrieval_exactness(verdict):
    rng = np.random.default_rng(3)
    bad = 0
    for trial in range(1000):
        n, d = int(rng.integers(1, 50)), int(rng.integers(1, 6))
        ids = [f"e{int(x):04d}" for x in rng.permutation(5000)[:n]]
        if trial % 2:
            V = rng.integers(-1, 2, size=(n, d)).astype(float)
            q = rng.integers(-1, 2, size=d).astype(float)
        else:
            V, q = rng.normal(size=(n, d)), rng.normal(size=d)
        index = EntityIndex(tuple(ids), V)
        k = int(rng.integers(1, n + 1))
        scores = V @ q
        oracle = [ids[i] for i in sorted(range(n), key=lambda i: (-scores[i], ids[i]))]
        full = index.search(q, n)
        gold = ids[int(rng.integers(n))]
        r = recall_at([RetrievalResult("m", tuple(h[0] for h in full), ())], {"m": gold}, [n], ids)
        bad += [h[0] for h in index.search(q, k)] != oracle[:k] or r[n] != 1.0
    ok = verdict(7, "retrieval exactness", bad == 0, f"{bad} mismatches over 1000 instances")
    assert ok


def test_directional_synthetic_result(verdict):
    corpus = generate(seed=0)
    assert len(corpus.train_mentions) >= 500 and len(corpus.eval_entities) >= 200
    data = Dataset.build(
        corpus.train_mentions, corpus.train_entities, corpus.eval_mentions, corpus.eval_entities, max_len=DIRECTIONAL_MODEL.max_len
    )
    start = time.perf_counter()
    stats = {}
    for mode in ("fused", "sentence_only"):
        cfg = replace(DIRECTIONAL_MODEL, mode_mention=mode, mode_entity=mode)
        outs = [run(data, cfg, replace(DIRECTIONAL_TRAIN, seed=s), ks=(1,)) for s in DIRECTIONAL_SEEDS]
        stats[mode] = (np.mean([o.recall[1] for o in outs]), np.mean([lower_rank_share(o.buckets) for o in outs]))
    elapsed = time.perf_counter() - start
    (r_ger, s_ger), (r_sen, s_sen) = stats["fused"], stats["sentence_only"]
    ok = r_ger >= r_sen and s_ger > s_sen and elapsed < 300
    detail = f"R@1 {r_ger:.3f} vs {r_sen:.3f}, lower-rank share {s_ger:.3f} vs {s_sen:.3f}, {elapsed:.0f}s"
    verdict(8, "directional synthetic result", ok, detail)
    assert r_ger >= r_sen
    assert s_ger > s_sen
    assert elapsed < 300


SMALL = ["--dim", "8", "--max-len", "48", "--heads", "2", "--layers", "2", "--enc-heads", "2", "--epochs", "1", "--batch", "8"]


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    assert main(["generate", "--out", str(out), "--train-entities", "20", "--eval-entities", "12"]) == 0
    return out


def test_ablation_harness(verdict, fixture_dir, tmp_path):
    out = tmp_path / "ablate.json"
    code = main(["ablate", "--data-dir", str(fixture_dir), "--k-list", "1,8", "--out", str(out), *SMALL])
    tables = json.loads(out.read_text()) if code == 0 else {"modes": [], "sides": []}
    modes = [r["mode"] for r in tables["modes"]]
    sides = {(r["mention"], r["entity"]) for r in tables["sides"]}

    corpus = generate(seed=5, n_train_entities=12, n_eval_entities=8)
    empty = Dataset.build(
        corpus.train_mentions, corpus.train_entities, corpus.eval_mentions, corpus.eval_entities, max_len=48, units={}
    )
    assert not any(len(ex.units) for ex in empty.eval_mentions + empty.eval_entities)
    cfg = ModelConfig(dim=8, max_len=48, enc_heads=2, hgan_heads=2, hgan_layers=2, mode_mention="graph_only", mode_entity="graph_only")
    degenerate = run(empty, cfg, TrainConfig(epochs=1, batch_size=8), ks=(1, 8))
    ok = (
        code == 0
        and modes == [m.value for m in EncoderMode]
        and sides == {(a, b) for a in ("sentence_only", "fused") for b in ("sentence_only", "fused")}
        and all(np.isfinite(v) for v in degenerate.recall.values())
    )
    verdict(9, "ablation harness", ok, f"{len(modes)} modes, {len(sides)} side pairs, graph_only on zero triplets")
    assert ok


def test_determinism(verdict, fixture_dir, tmp_path):
    def train(name):
        args = [
            "train",
            "--train-mentions", str(fixture_dir / "train_mentions.jsonl"),
            "--train-entities", str(fixture_dir / "train_entities.jsonl"),
            "--eval-mentions", str(fixture_dir / "eval_mentions.jsonl"),
            "--eval-entities", str(fixture_dir / "eval_entities.jsonl"),
            "--out", str(tmp_path / f"{name}.ckpt"),
            "--log", str(tmp_path / f"{name}.jsonl"),
            *SMALL, "--epochs", "2", "--seed", "11",
        ]
        assert main(args) == 0
        return (tmp_path / f"{name}.ckpt").read_bytes(), (tmp_path / f"{name}.jsonl").read_bytes()

    a, b = train("a"), train("b")
    ok = verdict(10, "determinism", a == b, "checkpoint and metrics log byte-identical")
    assert ok
