"""Statistics suite: independent oracles for every test procedure."""

from __future__ import annotations

import itertools
import json
import math

import numpy as np
import pytest

from lexchunk.corpus import Granularity
from lexchunk.evalstat import (
    DatasetError,
    EvalMatrix,
    QARecord,
    chi2_sf,
    compare_to_baseline,
    evaluate_methods,
    friedman_test,
    holm_adjust,
    load_qa_dataset,
    mean_gold_size,
    measure_build,
    normal_ci,
    paired_bootstrap_ci,
    paired_permutation_test,
    recall_at_k,
    regularized_gamma_q,
    strategy_slug,
)
from lexchunk.index import load_index
from lexchunk.retrieval import SectionRanking
from lexchunk.strategies import Family, StrategyConfig

from conftest import format_size_oracle, mock_service, synthetic_corpus


def ranking_of(*section_ids: str) -> SectionRanking:
    ranked = [(sid, 1.0 - 0.05 * i) for i, sid in enumerate(section_ids)]
    return SectionRanking("q", ranked, k_units=100, k_sections=10)


class TestRecall:
    def test_half_when_one_of_two_gold_found(self):
        ranking = ranking_of("566a", "535", "536", "537", "538", "539", "540", "541", "542", "543")
        assert recall_at_k(ranking, {"548", "566a"}) == 0.5

    def test_full_when_gold_subset_of_topk(self):
        ranking = ranking_of("548", "566a", "535")
        assert recall_at_k(ranking, {"548", "566a"}) == 1.0

    def test_zero_when_no_gold_found(self):
        assert recall_at_k(ranking_of("1", "2"), {"9"}) == 0.0

    def test_empty_gold_rejected(self):
        with pytest.raises(DatasetError):
            recall_at_k(ranking_of("1"), set())

    def test_macro_mean_matches_hand_sum(self):
        rankings = [ranking_of("1", "2"), ranking_of("3"), ranking_of("4", "5", "1")]
        golds = [{"1", "9"}, {"3"}, {"9", "8"}]
        values = [recall_at_k(r, g) for r, g in zip(rankings, golds)]
        assert values == [0.5, 1.0, 0.0]
        assert abs(sum(values) / 3 - 0.5) < 1e-12


# -- chi-square tail --------------------------------------------------------


class TestChiSquareTail:
    def test_known_critical_values(self):
        # classic 5% critical values
        assert abs(chi2_sf(3.841458820694124, 1) - 0.05) < 1e-12
        assert abs(chi2_sf(5.991464547107979, 2) - 0.05) < 1e-12
        assert abs(chi2_sf(18.307038053275146, 10) - 0.05) < 1e-12

    def test_agrees_with_scipy_grid(self):
        scipy_special = pytest.importorskip("scipy.special")
        for df in (1, 2, 3, 7, 20, 99):
            for x in (0.0, 0.3, 1.0, 4.2, 17.5, 80.0, 240.0):
                mine = chi2_sf(x, df)
                ref = float(scipy_special.gammaincc(df / 2.0, x / 2.0))
                assert abs(mine - ref) < 1e-10

    def test_gamma_q_bounds_and_edges(self):
        assert regularized_gamma_q(2.0, 0.0) == 1.0
        assert 0.0 <= regularized_gamma_q(0.5, 500.0) <= 1e-12
        with pytest.raises(ValueError):
            regularized_gamma_q(-1.0, 1.0)


# -- Friedman ---------------------------------------------------------------


def friedman_rank_oracle(matrix: np.ndarray) -> float:
    """Brute-force rank arithmetic in pure Python."""
    n, m = matrix.shape
    rank_rows = []
    tie_term = 0.0
    for row in matrix:
        values = sorted(row)
        ranks = []
        for v in row:
            first = values.index(v) + 1
            count = values.count(v)
            ranks.append(first + (count - 1) / 2.0)
        rank_rows.append(ranks)
        for v in set(row):
            t = list(row).count(v)
            tie_term += t**3 - t
    correction = 1.0 - tie_term / (n * m * (m * m - 1))
    if correction <= 0.0:
        return 0.0
    rank_sums = [sum(r[j] for r in rank_rows) for j in range(m)]
    stat = (12.0 / (n * m * (m + 1)) * sum(R * R for R in rank_sums) - 3.0 * n * (m + 1)) / correction
    return max(stat, 0.0)


class TestFriedman:
    def test_identical_columns(self):
        matrix = np.tile(np.linspace(0, 1, 10)[:, None], (1, 4))
        stat, p = friedman_test(matrix)
        assert stat == 0.0 and p == 1.0

    def test_matches_rank_oracle_on_random_matrices(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            n = int(rng.integers(5, 30))
            m = int(rng.integers(3, 8))
            matrix = rng.random((n, m))
            if trial % 3 == 0:  # force ties
                matrix = np.round(matrix, 1)
            stat, _ = friedman_test(matrix)
            assert abs(stat - friedman_rank_oracle(matrix)) < 1e-9

    def test_dominating_method_closed_form(self):
        rng = np.random.default_rng(1)
        base = rng.random((20, 1))
        matrix = np.hstack([base, base + 1.0, base + 2.0])  # strict order per row
        stat, p = friedman_test(matrix)
        assert stat == pytest.approx(40.0, abs=1e-9)  # 12n/(m(m+1)) * sum (Rbar-2)^2
        assert p == pytest.approx(chi2_sf(40.0, 2), abs=1e-15)

    def test_invariant_under_row_monotone_transform(self):
        rng = np.random.default_rng(2)
        matrix = rng.random((12, 4))
        transformed = matrix.copy()
        transformed[3] = np.exp(transformed[3])
        transformed[7] = 10 * transformed[7] + 5
        assert friedman_test(matrix)[0] == pytest.approx(friedman_test(transformed)[0], abs=1e-12)

    def test_agrees_with_scipy(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(3)
        matrix = rng.random((15, 5))
        stat, p = friedman_test(matrix)
        ref = scipy_stats.friedmanchisquare(*[matrix[:, j] for j in range(5)])
        assert stat == pytest.approx(ref.statistic, abs=1e-10)
        assert p == pytest.approx(ref.pvalue, abs=1e-10)

    def test_shape_requirements(self):
        with pytest.raises(ValueError):
            friedman_test(np.ones((5, 2)))
        with pytest.raises(ValueError):
            friedman_test(np.ones((1, 3)))


# -- paired permutation -----------------------------------------------------


def permutation_oracle(diffs: list[float]) -> float:
    """Full enumeration over all sign patterns, pure Python arithmetic."""
    n = len(diffs)
    observed = abs(math.fsum(diffs) / n)
    hits = 0
    for signs in itertools.product((-1.0, 1.0), repeat=n):
        stat = abs(math.fsum(s * d for s, d in zip(signs, diffs)) / n)
        if stat >= observed - 1e-12 * max(1.0, observed):
            hits += 1
    return hits / 2**n


class TestPairedPermutation:
    def test_equal_scores_give_p_one(self):
        a = [0.5, 0.25, 0.75, 1.0, 0.0]
        assert paired_permutation_test(a, a) == 1.0

    def test_constant_unit_difference_exhaustive(self):
        a = [1.0] * 12
        b = [0.0] * 12
        assert paired_permutation_test(a, b) == 2 / 4096

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(4)
        for n in (5, 8, 11):
            # eighths are exact in binary, so both code paths round identically
            a = rng.integers(0, 9, size=n) / 8.0
            b = rng.integers(0, 9, size=n) / 8.0
            assert paired_permutation_test(a, b) == permutation_oracle(list(a - b))

    def test_large_planted_effect_significant(self):
        rng = np.random.default_rng(5)
        a = 0.5 + 0.3 + rng.normal(0, 0.05, size=100)
        b = 0.5 + rng.normal(0, 0.05, size=100)
        assert paired_permutation_test(a, b, draws=10_000, seed=6) <= 0.001

    def test_symmetric_in_argument_order(self):
        rng = np.random.default_rng(7)
        a = rng.random(30)
        b = rng.random(30)
        assert paired_permutation_test(a, b, seed=8) == paired_permutation_test(b, a, seed=8)

    def test_invariant_under_common_shift(self):
        rng = np.random.default_rng(9)
        a = rng.random(25)
        b = rng.random(25)
        assert paired_permutation_test(a, b, seed=1) == paired_permutation_test(
            a + 0.37, b + 0.37, seed=1
        )

    def test_reproducible_under_seed(self):
        rng = np.random.default_rng(10)
        a = rng.random(40)
        b = rng.random(40)
        runs = {paired_permutation_test(a, b, seed=11) for _ in range(3)}
        assert len(runs) == 1

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            paired_permutation_test([1.0], [1.0, 2.0])


# -- Holm -------------------------------------------------------------------


def holm_oracle(p_values: list[float]) -> list[float]:
    order = sorted(range(len(p_values)), key=lambda i: p_values[i])
    m = len(p_values)
    out = [0.0] * m
    best = 0.0
    for rank, idx in enumerate(order):
        best = max(best, (m - rank) * p_values[idx])
        out[idx] = min(best, 1.0)
    return out


class TestHolm:
    def test_worked_example(self):
        assert holm_adjust([0.01, 0.04, 0.03]) == pytest.approx([0.03, 0.06, 0.06])

    def test_all_zeros(self):
        assert holm_adjust([0.0, 0.0, 0.0]) == [0.0, 0.0, 0.0]

    def test_single_value_unchanged(self):
        assert holm_adjust([0.2]) == [0.2]

    def test_matches_oracle_on_random_vectors(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            p = [float(x) for x in rng.random(int(rng.integers(1, 12)))]
            assert holm_adjust(p) == pytest.approx(holm_oracle(p), abs=1e-12)

    def test_adjusted_at_least_raw_and_sorted_monotone(self):
        rng = np.random.default_rng(13)
        p = [float(x) for x in rng.random(9)]
        adjusted = holm_adjust(p)
        assert all(adj >= raw for adj, raw in zip(adjusted, p))
        order = sorted(range(9), key=lambda i: p[i])
        sorted_adj = [adjusted[i] for i in order]
        assert sorted_adj == sorted(sorted_adj)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            holm_adjust([0.5, 1.5])


# -- bootstrap --------------------------------------------------------------


class TestBootstrap:
    def test_constant_differences_collapse_interval(self):
        low, high = paired_bootstrap_ci([0.25] * 10)
        assert low == 0.25 and high == 0.25

    def test_symmetric_differences_straddle_zero(self):
        diffs = [1.0, -1.0] * 50
        low, high = paired_bootstrap_ci(diffs, seed=14)
        assert low < 0.0 < high

    def test_interval_contains_sample_mean(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            diffs = rng.normal(0.1, 0.5, size=int(rng.integers(5, 40)))
            low, high = paired_bootstrap_ci(diffs, seed=16)
            assert low <= diffs.mean() <= high

    def test_reproducible_under_seed(self):
        rng = np.random.default_rng(17)
        diffs = rng.random(30)
        assert paired_bootstrap_ci(diffs, seed=18) == paired_bootstrap_ci(diffs, seed=18)

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            paired_bootstrap_ci([0.5])

    def test_normal_ci_brackets_mean(self):
        values = [0.2, 0.4, 0.6, 0.8]
        low, high = normal_ci(values)
        assert low < 0.5 < high


# -- dataset ----------------------------------------------------------------


class TestDataset:
    def write(self, tmp_path, lines):
        path = tmp_path / "qa.jsonl"
        path.write_text("\n".join(json.dumps(x) for x in lines), encoding="utf-8")
        return path

    def test_load_normalizes_gold_ids(self, tmp_path):
        path = self.write(
            tmp_path,
            [
                {"id": "q1", "question": "Who pays rent?", "gold_sections": ["§ 535", "566A"]},
                {"id": "q2", "question": "Deposit?", "gold_sections": ["548"]},
            ],
        )
        records = load_qa_dataset(path)
        assert records[0].gold_section_ids == frozenset({"535", "566a"})
        assert mean_gold_size(records) == 1.5

    def test_unknown_gold_id_logged(self, tmp_path, caplog):
        path = self.write(tmp_path, [{"id": "q", "question": "?", "gold_sections": ["999"]}])
        with caplog.at_level("WARNING"):
            load_qa_dataset(path, known_section_ids=["1", "2"])
        assert any("not in corpus" in r.message for r in caplog.records)

    def test_empty_gold_rejected(self, tmp_path):
        path = self.write(tmp_path, [{"id": "q", "question": "?", "gold_sections": []}])
        with pytest.raises(DatasetError):
            load_qa_dataset(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        path = self.write(
            tmp_path,
            [
                {"id": "q", "question": "?", "gold_sections": ["1"]},
                {"id": "q", "question": "??", "gold_sections": ["2"]},
            ],
        )
        with pytest.raises(DatasetError):
            load_qa_dataset(path)


# -- build measurement ------------------------------------------------------


class TestMeasureBuild:
    def test_persisted_bytes_match_size_model(self, tmp_path):
        corpus = synthetic_corpus(20, seed=19)
        service = mock_service(cache_dir=tmp_path / "cache")
        record = measure_build(
            StrategyConfig(Family.FLAT, Granularity.SENTENCE), corpus, service, tmp_path
        )
        index = load_index(record.index_path)
        assert record.persisted_bytes == format_size_oracle(index)

    def test_flat_section_build_faster_than_mock_lumber(self, tmp_path):
        corpus = synthetic_corpus(60, seed=20)
        flat_service = mock_service(cache_dir=tmp_path / "c1")
        lumber_service = mock_service(cache_dir=tmp_path / "c2")
        flat = measure_build(
            StrategyConfig(Family.FLAT, Granularity.SECTION), corpus, flat_service, tmp_path / "a"
        )
        lumber = measure_build(
            StrategyConfig(Family.LUMBER, Granularity.SENTENCE, lumber_budget_tokens=64),
            corpus,
            lumber_service,
            tmp_path / "b",
        )
        assert flat.build_seconds < lumber.build_seconds

    def test_warm_cache_issues_no_generation_calls(self, tmp_path):
        corpus = synthetic_corpus(8, seed=21)
        config = StrategyConfig(Family.LUMBER, Granularity.SENTENCE, lumber_budget_tokens=48)
        cold_service = mock_service(cache_dir=tmp_path / "cache")
        cold = measure_build(config, corpus, cold_service, tmp_path / "runs")
        assert cold.provider_counters["lumber_split"]["provider_calls"] > 0

        warm_service = mock_service(cache_dir=tmp_path / "cache")
        warm = measure_build(config, corpus, warm_service, tmp_path / "runs")
        assert warm.provider_counters["lumber_split"]["provider_calls"] == 0
        assert warm.provider_counters["embed"]["provider_calls"] == 0

    def test_slug_is_filesystem_safe(self):
        assert strategy_slug("Fixed 256 / 64") == "fixed-256-64"
        assert strategy_slug("RAPTOR sentence") == "raptor-sentence"


# -- evaluation wiring ------------------------------------------------------


class TestEvaluateMethods:
    def build_indexes(self, corpus, service, tmp_path):
        from lexchunk.index import build_index

        indexes = {}
        for config in (
            StrategyConfig(Family.FLAT, Granularity.SECTION),
            StrategyConfig(Family.FLAT, Granularity.SUBSECTION),
            StrategyConfig(Family.FIXED, window_tokens=16, overlap_tokens=4),
        ):
            indexes[config.tag] = build_index(corpus, config, service).index
        return indexes

    def test_matrix_shape_and_determinism(self, tmp_path):
        corpus = synthetic_corpus(10, seed=22)
        service = mock_service()
        indexes = self.build_indexes(corpus, service, tmp_path)
        records = [
            QARecord("q1", "s1term0 s1term1 s1term2", frozenset({"1"})),
            QARecord("q2", "s4term3 s4term4", frozenset({"4"})),
            QARecord("q3", "s7term5 s7term6 s7term7", frozenset({"7", "8"})),
        ]
        outcome = evaluate_methods(records, indexes, service, repetitions=2,
                                   section_rank=corpus.section_rank())
        assert outcome.recall.scores.shape == (3, 3)
        assert outcome.latency_ms.scores.shape == (3, 3)
        assert ((0.0 <= outcome.recall.scores) & (outcome.recall.scores <= 1.0)).all()
        assert len(outcome.run_records) == 9
        again = evaluate_methods(records, indexes, service, repetitions=2,
                                 section_rank=corpus.section_rank())
        assert np.array_equal(outcome.recall.scores, again.recall.scores)

    def test_compare_to_baseline_structure(self):
        rng = np.random.default_rng(23)
        matrix = EvalMatrix(
            [f"q{i}" for i in range(30)],
            ["Section", "Subsection", "Fixed 16 / 4"],
            rng.random((30, 3)),
        )
        outcome = compare_to_baseline(matrix, "Section", draws=500, seed=3)
        assert "friedman" in outcome
        assert set(outcome["methods"]) == {"Section", "Subsection", "Fixed 16 / 4"}
        for tag in ("Subsection", "Fixed 16 / 4"):
            entry = outcome["methods"][tag]
            assert 0.0 <= entry["p_raw"] <= 1.0
            assert entry["p_holm"] >= entry["p_raw"]
            assert entry["bootstrap_ci"][0] <= entry["mean_diff_vs_baseline"] <= entry["bootstrap_ci"][1]

    def test_unknown_baseline_rejected(self):
        matrix = EvalMatrix(["q1", "q2"], ["A", "B", "C"], np.zeros((2, 3)))
        with pytest.raises(ValueError):
            compare_to_baseline(matrix, "missing")


class TestResumableAbort:
    def test_failed_build_resumes_from_cache(self, tmp_path):
        from lexchunk.providers import (
            DiskCache,
            MockEmbedder,
            MockGenerator,
            ProviderService,
            ProviderUnavailableError,
        )

        class FailsOnSecondSplit(MockGenerator):
            def __init__(self):
                super().__init__()
                self.splits = 0

            def split_index(self, texts, budget):
                self.splits += 1
                if self.splits == 2:
                    raise ProviderUnavailableError("synthetic outage")
                return super().split_index(texts, budget)

        corpus = synthetic_corpus(12, seed=24)
        config = StrategyConfig(Family.LUMBER, Granularity.SENTENCE, lumber_budget_tokens=48)
        cache = tmp_path / "cache"

        flaky = mock_service(cache_dir=cache)
        flaky.generator = FailsOnSecondSplit()
        with pytest.raises(ProviderUnavailableError):
            measure_build(config, corpus, flaky, tmp_path / "runs")

        # the first split survived in the cache, so the retry resumes past it
        retry = mock_service(cache_dir=cache)
        record = measure_build(config, corpus, retry, tmp_path / "runs")
        fresh = mock_service(cache_dir=tmp_path / "fresh-cache")
        measure_build(config, corpus, fresh, tmp_path / "runs2")
        resumed_calls = retry.counter_snapshot()["lumber_split"]["provider_calls"]
        fresh_calls = fresh.counter_snapshot()["lumber_split"]["provider_calls"]
        assert resumed_calls == fresh_calls - 1
        assert record.persisted_bytes > 0
