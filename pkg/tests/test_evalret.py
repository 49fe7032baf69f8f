import math

import numpy as np
import pytest

from conftest import small_model
from siamsearch.errors import DegenerateVector, EmptyQuery, IndexMismatch
from siamsearch.evalret import (
    EmbeddingIndex,
    EvalConfig,
    build_index,
    evaluate,
    export_embeddings,
    pca_2d,
    query,
    rank_of_positive,
    ranks_from_embeddings,
    report_from_ranks,
    sample_pools,
)


def oracle_rank(q, pos, distractors) -> int:
    """Full sort of all candidates by cosine; the positive goes after any tie."""
    cos = lambda a, b: float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    cands = [(cos(q, pos), 1, "pos")] + [(cos(q, d), 0, "d") for d in distractors]
    cands.sort(key=lambda c: (-c[0], c[1]))
    return 1 + [c[2] for c in cands].index("pos")


def harmonic(n: int) -> float:
    return math.fsum(1.0 / k for k in range(1, n + 1))


class TestRank:
    def test_matches_full_sort(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = int(rng.integers(2, 9))
            k = int(rng.integers(1, 60))
            q, pos = rng.normal(size=d), rng.normal(size=d)
            dist = rng.normal(size=(k, d))
            if rng.random() < 0.3:
                dist[rng.integers(k)] = pos  # duplicate of the positive
            assert rank_of_positive(q, pos, dist) == oracle_rank(q, pos, dist)

    def test_tie_is_pessimistic(self):
        q = np.array([1.0, 0.0])
        assert rank_of_positive(q, q, np.array([[2.0, 0.0], [0.0, 1.0]])) == 2

    def test_no_distractors(self):
        assert rank_of_positive([1.0, 0.0], [0.0, 1.0], np.zeros((0, 2))) == 1

    def test_zero_vector(self):
        with pytest.raises(DegenerateVector):
            rank_of_positive([0.0, 0.0], [1.0, 0.0], [[1.0, 1.0]])


class TestMRR:
    def test_perfect_ranker(self):
        emb = np.eye(60)
        pools = sample_pools(60, 50, 0)
        report = report_from_ranks(ranks_from_embeddings(emb, emb, pools), EvalConfig(), 50)
        assert report.mrr == 1.0
        assert all(v == 1.0 for v in report.success_at_k.values())

    def test_random_embeddings_near_harmonic(self):
        rng = np.random.default_rng(7)
        n = 10_000
        text, code = rng.normal(size=(n, 16)), rng.normal(size=(n, 16))
        ranks = ranks_from_embeddings(text, code, sample_pools(n, 50, 0))
        mrr = report_from_ranks(ranks, EvalConfig(), 50).mrr
        assert 0.080 <= mrr <= 0.100
        assert abs(mrr - harmonic(50) / 50) < 0.006

    def test_known_ranks(self):
        report = report_from_ranks(np.array([1, 2, 4]), EvalConfig(success_at=(1, 2)), 50)
        assert report.mrr == pytest.approx((1 + 0.5 + 0.25) / 3, abs=1e-15)
        assert report.success_at_k == {1: 1 / 3, 2: 2 / 3}

    def test_pools_exclude_self(self):
        pools = sample_pools(30, 10, 3)
        assert pools.shape == (30, 9)
        for i, row in enumerate(pools):
            assert i not in row and len(set(row.tolist())) == 9

    def test_threads_do_not_change_ranks(self):
        rng = np.random.default_rng(1)
        text, code = rng.normal(size=(500, 8)), rng.normal(size=(500, 8))
        pools = sample_pools(500, 50, 2)
        assert np.array_equal(ranks_from_embeddings(text, code, pools, 1), ranks_from_embeddings(text, code, pools, 4))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EvalConfig(pool_size=1)
        with pytest.raises(ValueError):
            EvalConfig(layer="hidden")
        with pytest.raises(ValueError):
            EvalConfig(success_at=(0,))
        assert EvalConfig(pool_size=8).success_at == (1, 5)


class TestEvaluate:
    def test_small_test_set_shrinks_pool(self, toy_vocabs, toy_data):
        m = small_model(toy_vocabs)
        with pytest.warns(UserWarning, match="pool"):
            report = evaluate(m, toy_data, EvalConfig(pool_size=50))
        assert report.pool_size == len(toy_data) and report.n_queries == len(toy_data)
        assert 0.0 < report.mrr <= 1.0

    def test_deterministic(self, toy_vocabs, toy_data):
        m = small_model(toy_vocabs)
        cfg = EvalConfig(pool_size=10, layer="extraction", seed=5)
        assert evaluate(m, toy_data, cfg) == evaluate(m, toy_data, cfg)

    def test_line_format(self, toy_vocabs, toy_data):
        line = evaluate(small_model(toy_vocabs), toy_data, EvalConfig(pool_size=20)).line()
        assert line.startswith("layer=siamese mrr=") and "success@10=" in line


class TestIndex:
    def test_save_load_query(self, tmp_path, toy_records, toy_vocabs):
        m = small_model(toy_vocabs)
        idx = build_index(m, toy_records, toy_vocabs)
        path = tmp_path / "code.idx"
        idx.save(path)
        back = EmbeddingIndex.load(path)
        assert back.ids == idx.ids and np.array_equal(back.matrix, idx.matrix)
        hits = query(back, m, toy_vocabs, toy_records[0].text, k=5)
        assert len(hits) == 5
        scores = [s for _, s in hits]
        assert scores == sorted(scores, reverse=True)

    def test_mismatched_model(self, toy_records, toy_vocabs):
        idx = build_index(small_model(toy_vocabs, seed=0), toy_records, toy_vocabs)
        with pytest.raises(IndexMismatch):
            query(idx, small_model(toy_vocabs, seed=1), toy_vocabs, "anything")

    def test_empty_query(self, toy_records, toy_vocabs):
        m = small_model(toy_vocabs)
        idx = build_index(m, toy_records[:4], toy_vocabs)
        with pytest.raises(EmptyQuery):
            query(idx, m, toy_vocabs, "  ?! ")

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateVector):
            EmbeddingIndex(["a"], np.zeros((1, 3)), "siamese", "x")


class TestExport:
    def test_pca_of_line(self):
        t = np.linspace(-1, 1, 20)
        x = np.stack([t, 2 * t, np.zeros_like(t)], axis=1)
        p = pca_2d(x)
        assert np.allclose(np.abs(p[:, 0]), np.abs(t) * math.sqrt(5))
        assert np.allclose(p[:, 1], 0.0)

    def test_tsv_columns(self, tmp_path, toy_records, toy_vocabs):
        m = small_model(toy_vocabs, s_emb=100)
        path = tmp_path / "emb.tsv"
        export_embeddings(m, toy_records, toy_vocabs, "siamese", path, project_2d=True, label_field="concept")
        lines = path.read_text().splitlines()
        header = lines[0].split("\t")
        assert header[:2] == ["id", "label"] and header[-2:] == ["pca0", "pca1"]
        assert len(lines) == len(toy_records) + 1
        assert all(len(row.split("\t")) == 2 + 100 + 2 for row in lines[1:])


def test_duplicate_code_ties_in_pool():
    code = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    text = np.array([[1.0, 0.1], [0.0, 1.0], [1.0, 1.0]])
    ranks = ranks_from_embeddings(text, code, np.array([[1], [2], [0]]))
    assert ranks.tolist() == [2, 2, 2]
