import numpy as np
import pytest

from ger.model import BiEncoder
from ger.retrieval import (
    EntityIndex,
    EvaluationError,
    IndexBuildError,
    RetrievalResult,
    ZeroShotViolation,
    attention_rank_analysis,
    build_index,
    load_index,
    mention_attention_rank,
    read_results,
    recall_at,
    retrieve,
    save_index,
    write_results,
    zero_shot_guard,
)


def oracle_topk(ids, V, q, k):
    """Full sort: score descending, then entity id ascending."""
    scores = V @ q
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order[:k]]


def test_search_matches_full_sort_oracle():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n, d = int(rng.integers(1, 40)), int(rng.integers(1, 6))
        ids = [f"e{int(x)}" for x in rng.permutation(1000)[:n]]
        if trial % 3 == 0:
            # small integer vectors produce many exact ties
            V = rng.integers(-1, 2, size=(n, d)).astype(float)
            q = rng.integers(-1, 2, size=d).astype(float)
        else:
            V, q = rng.normal(size=(n, d)), rng.normal(size=d)
        k = int(rng.integers(1, n + 1))
        index = EntityIndex(tuple(ids), V)
        got = index.search(q, k)
        assert [h[0] for h in got] == oracle_topk(ids, V, q, k)
        scores = [h[1] for h in got]
        assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_zero_query_ranks_by_id():
    index = EntityIndex(("b", "c", "a"), np.ones((3, 2)))
    assert [h[0] for h in index.search(np.zeros(2), 3)] == ["a", "b", "c"]
    assert all(h[1] == 0.0 for h in index.search(np.zeros(2), 3))


def test_index_validation_and_immutability():
    with pytest.raises(ValueError):
        EntityIndex(("a", "a"), np.zeros((2, 2)))
    index = EntityIndex(("a", "b"), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        index.vectors[0, 0] = 1.0
    with pytest.raises(ValueError):
        index.search(np.zeros(2), 3)
    with pytest.raises(ValueError):
        index.search(np.zeros(2), 0)


def test_hand_built_recall_fixture():
    results = [
        RetrievalResult("m1", ("a", "b", "c"), (3.0, 2.0, 1.0)),
        RetrievalResult("m2", ("b", "c", "a"), (3.0, 2.0, 1.0)),
        RetrievalResult("m3", ("c", "a", "b"), (3.0, 2.0, 1.0)),
    ]
    gold = {"m1": "a", "m2": "a", "m3": "b"}
    # m1 hits at rank 1, m2 at rank 3, m3 at rank 3
    assert recall_at(results, gold, [1, 2, 3], ["a", "b", "c"]) == {1: 1 / 3, 2: 1 / 3, 3: 1.0}


def test_recall_errors():
    r = [RetrievalResult("m1", ("a",), (1.0,))]
    with pytest.raises(EvaluationError):
        recall_at([], {}, [1])
    with pytest.raises(EvaluationError):
        recall_at(r, {"m1": "z"}, [1], ["a"])
    with pytest.raises(EvaluationError):
        recall_at(r, {}, [1])
    with pytest.raises(EvaluationError):
        recall_at(r, {"m1": "a"}, [5])


def test_recall_monotone_and_complete():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        ids = tuple(f"e{i:03d}" for i in range(n))
        index = EntityIndex(ids, rng.normal(size=(n, 4)))
        results = []
        gold = {}
        for m in range(10):
            hits = index.search(rng.normal(size=4), n)
            results.append(RetrievalResult(f"m{m}", tuple(h[0] for h in hits), tuple(h[1] for h in hits)))
            gold[f"m{m}"] = ids[int(rng.integers(n))]
        ks = list(range(1, n + 1))
        rec = recall_at(results, gold, ks, ids)
        assert all(rec[a] <= rec[b] for a, b in zip(ks, ks[1:]))
        assert rec[n] == 1.0


def test_zero_shot_guard():
    zero_shot_guard(["a", "b"], ["c"])
    with pytest.raises(ZeroShotViolation, match="'b'"):
        zero_shot_guard(["a", "b"], ["b", "c"])
    with pytest.raises(ZeroShotViolation):
        zero_shot_guard(["a"], [])


def test_build_and_retrieve(tmp_path, tiny, small_cfg):
    model = BiEncoder(tiny.vocab, small_cfg, seed=0)
    a = build_index(model, tiny.eval_entities, "f" * 64)
    b = build_index(model, tiny.eval_entities, "f" * 64)
    assert a.vectors.tobytes() == b.vectors.tobytes()
    assert a.vectors.shape == (len(tiny.eval_entities), small_cfg.dim)
    with pytest.raises(IndexBuildError):
        build_index(model, [])
    save_index(tmp_path / "idx", a)
    back = load_index(tmp_path / "idx")
    assert back.ids == a.ids and back.fingerprint == "f" * 64
    assert back.vectors.tobytes() == a.vectors.tobytes()

    results = retrieve(model, tiny.eval_mentions, a, len(a))
    for r in results:
        assert sorted(r.entity_ids) == sorted(a.ids)
    assert recall_at(results, tiny.gold, [len(a)], a.ids)[len(a)] == 1.0
    with pytest.raises(ValueError):
        retrieve(model, tiny.eval_mentions, a, len(a) + 1)
    write_results(tmp_path / "r.jsonl", results)
    assert read_results(tmp_path / "r.jsonl") == results


def test_mention_attention_rank():
    att = np.array([0.1, 0.05, 0.5, 0.2, 0.15])
    assert mention_attention_rank(att, (2, 3)) == 0
    assert mention_attention_rank(att, (3, 5)) == 1
    assert mention_attention_rank(np.full(4, 0.25), (2, 4)) == 2


def test_attention_analysis_partitions(tiny, small_cfg):
    model = BiEncoder(tiny.vocab, small_cfg, seed=1)
    index = build_index(model, tiny.eval_entities)
    results = retrieve(model, tiny.eval_mentions, index, 4)
    rows = attention_rank_analysis(model, tiny.eval_mentions, results, tiny.gold, (0, 8, 16, 24, 32), k=4)
    assert [r["bucket"] for r in rows] == [[0, 8], [8, 16], [16, 24], [24, 32]]
    assert sum(r["count"] for r in rows) == len(tiny.eval_mentions)
    assert sum(r["share"] for r in rows) == pytest.approx(1.0)
    for bad in [(0, 16), (1, 32), (0, 16, 16, 32)]:
        with pytest.raises(EvaluationError):
            attention_rank_analysis(model, tiny.eval_mentions, results, tiny.gold, bad)
