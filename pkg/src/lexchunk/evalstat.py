"""Recall evaluation, build measurement, and repeated-measures statistics.

All methods answer the same questions, so method comparisons are paired:
a Friedman omnibus test over per-question scores, then paired sign-flip
permutation tests of each method against a baseline with Holm correction,
plus paired bootstrap confidence intervals for the mean difference.

The chi-square tail probability is computed from the regularized incomplete
gamma function (series for small arguments, continued fraction otherwise),
so the statistics need nothing beyond numpy. Every resampling operation is
bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import json
import logging
import math
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, normalize_section_id
from .index import BuildResult, RaptorIndex, VectorIndex, build_index, save_index
from .providers import ProviderService, derive_seed
from .retrieval import SectionRanking, timed_retrieve
from .strategies import StrategyConfig, write_chunk_manifest

logger = logging.getLogger(__name__)

PERMUTATION_DRAWS = 10_000
EXHAUSTIVE_PERMUTATION_MAX_N = 20
BOOTSTRAP_DRAWS = 10_000


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# QA dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QARecord:
    query_id: str
    question: str
    gold_section_ids: frozenset[str]


def load_qa_dataset(
    path: str | Path, known_section_ids: Iterable[str] | None = None
) -> list[QARecord]:
    """Load JSON-lines records ``{"id", "question", "gold_sections"}``.

    Gold ids are normalized to corpus form; ids not present in
    ``known_section_ids`` (when given) are logged as warnings but kept.
    """
    known = set(known_section_ids) if known_section_ids is not None else None
    records = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}: invalid JSON: {exc}") from exc
        try:
            query_id = str(raw["id"])
            question = str(raw["question"])
            gold_raw = raw["gold_sections"]
        except KeyError as exc:
            raise DatasetError(f"line {lineno}: missing field {exc}") from exc
        if not gold_raw:
            raise DatasetError(f"line {lineno}: record {query_id!r} has an empty gold set")
        if query_id in seen_ids:
            raise DatasetError(f"line {lineno}: duplicate question id {query_id!r}")
        seen_ids.add(query_id)
        gold = frozenset(normalize_section_id(str(g)) for g in gold_raw)
        if known is not None:
            unknown = sorted(gold - known)
            if unknown:
                logger.warning("question %s: gold sections %s not in corpus", query_id, unknown)
        records.append(QARecord(query_id, question, gold))
    if not records:
        raise DatasetError(f"{path}: dataset contains no records")
    return records


def mean_gold_size(records: Sequence[QARecord]) -> float:
    return sum(len(r.gold_section_ids) for r in records) / len(records)


# ---------------------------------------------------------------------------
# Recall
# ---------------------------------------------------------------------------


def recall_at_k(ranking: SectionRanking, gold: Iterable[str]) -> float:
    """Fraction of gold sections present among the ranked sections."""
    gold = set(gold)
    if not gold:
        raise DatasetError("gold set is empty")
    hits = sum(1 for sid in ranking.section_ids() if sid in gold)
    return hits / len(gold)


@dataclass
class EvalMatrix:
    """Per-question x per-method scores; rows align across methods."""

    question_ids: list[str]
    method_tags: list[str]
    scores: np.ndarray  # (n questions, m methods)

    def column(self, tag: str) -> np.ndarray:
        return self.scores[:, self.method_tags.index(tag)]


# ---------------------------------------------------------------------------
# Chi-square tail via the regularized incomplete gamma function
# ---------------------------------------------------------------------------

_GAMMA_EPS = 1e-15
_GAMMA_MAX_ITER = 500


def _lower_gamma_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_GAMMA_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_gamma_continued_fraction(a: float, x: float) -> float:
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b if b != 0 else 1.0 / tiny
    h = d
    for i in range(1, _GAMMA_MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x), accurate to ~1e-14."""
    if a <= 0 or x < 0:
        raise ValueError(f"need a > 0 and x >= 0, got a={a}, x={x}")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return min(max(1.0 - _lower_gamma_series(a, x), 0.0), 1.0)
    return min(max(_upper_gamma_continued_fraction(a, x), 0.0), 1.0)


def chi2_sf(x: float, df: int) -> float:
    """Upper-tail probability of the chi-square distribution."""
    if df < 1:
        raise ValueError("df must be >= 1")
    return regularized_gamma_q(df / 2.0, x / 2.0)


# ---------------------------------------------------------------------------
# Friedman omnibus test
# ---------------------------------------------------------------------------


def _average_ranks(row: np.ndarray) -> np.ndarray:
    order = np.argsort(row, kind="stable")
    ranks = np.empty(len(row), dtype=np.float64)
    i = 0
    while i < len(row):
        j = i
        while j + 1 < len(row) and row[order[j + 1]] == row[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # 1-based average rank
        i = j + 1
    return ranks


def friedman_test(matrix: EvalMatrix | np.ndarray) -> tuple[float, float]:
    """Tie-corrected Friedman chi-square statistic and upper-tail p-value.

    Rows are ranked with average ranks for ties; a matrix whose rows are all
    completely tied yields statistic 0 and p-value 1.
    """
    scores = matrix.scores if isinstance(matrix, EvalMatrix) else np.asarray(matrix, dtype=float)
    n, m = scores.shape
    if n < 2 or m < 3:
        raise ValueError(f"need at least 2 rows and 3 methods, got {n}x{m}")

    ranks = np.vstack([_average_ranks(scores[i]) for i in range(n)])
    tie_term = 0.0
    for i in range(n):
        _, counts = np.unique(scores[i], return_counts=True)
        tie_term += float((counts**3 - counts).sum())
    correction = 1.0 - tie_term / (n * m * (m * m - 1))
    if correction <= 0.0:
        return 0.0, 1.0

    rank_sums = ranks.sum(axis=0)
    ssbn = float((rank_sums**2).sum())
    statistic = (12.0 / (n * m * (m + 1)) * ssbn - 3.0 * n * (m + 1)) / correction
    statistic = max(statistic, 0.0)
    return statistic, chi2_sf(statistic, m - 1)


# ---------------------------------------------------------------------------
# Paired permutation test
# ---------------------------------------------------------------------------


def paired_permutation_test(
    a: Sequence[float],
    b: Sequence[float],
    draws: int = PERMUTATION_DRAWS,
    seed: int = 0,
) -> float:
    """Two-sided sign-flip permutation p-value for mean(a - b).

    Enumerates all 2^n sign patterns for n <= 20 (exact p); otherwise draws
    ``draws`` seeded sign vectors and applies add-one smoothing.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"score lists must be 1-d and equal length, got {a.shape} vs {b.shape}")
    if draws < 1:
        raise ValueError("draws must be >= 1")
    diffs = a - b
    n = len(diffs)
    observed = abs(float(diffs.mean()))
    threshold = observed - 1e-12 * max(1.0, observed)

    if n <= EXHAUSTIVE_PERMUTATION_MAX_N:
        total = 1 << n
        bits = np.arange(n, dtype=np.int64)
        hits = 0
        block = 1 << 16
        for start in range(0, total, block):
            patterns = np.arange(start, min(start + block, total), dtype=np.int64)
            signs = (((patterns[:, None] >> bits) & 1) * 2 - 1).astype(np.float64)
            stats = np.abs((signs * diffs).mean(axis=1))
            hits += int(np.count_nonzero(stats >= threshold))
        return hits / total

    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(draws, n))
    stats = np.abs((signs * diffs).mean(axis=1))
    hits = int(np.count_nonzero(stats >= threshold))
    return (hits + 1) / (draws + 1)


# ---------------------------------------------------------------------------
# Holm step-down correction
# ---------------------------------------------------------------------------


def holm_adjust(p_values: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, in the input order."""
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1:
        raise ValueError("p_values must be a flat list")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m, dtype=float)
    running = 0.0
    for position, idx in enumerate(order):
        running = max(running, (m - position) * p[idx])
        adjusted[idx] = min(running, 1.0)
    return [float(x) for x in adjusted]


# ---------------------------------------------------------------------------
# Paired bootstrap confidence interval
# ---------------------------------------------------------------------------


def paired_bootstrap_ci(
    diffs: Sequence[float],
    draws: int = BOOTSTRAP_DRAWS,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of paired differences."""
    diffs = np.asarray(diffs, dtype=float)
    if diffs.ndim != 1 or len(diffs) < 2:
        raise ValueError("need at least 2 paired differences")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diffs), size=(draws, len(diffs)))
    means = diffs[idx].mean(axis=1)
    low = float(np.quantile(means, (1.0 - level) / 2.0))
    high = float(np.quantile(means, (1.0 + level) / 2.0))
    return low, high


def normal_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Normal-theory interval for the mean (1.96-sigma at the default level)."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if len(values) < 2:
        return mean, mean
    z = {0.95: 1.959963984540054, 0.99: 2.5758293035489004}.get(level)
    if z is None:
        raise ValueError("only 0.95 and 0.99 levels are supported")
    half = z * float(values.std(ddof=1)) / math.sqrt(len(values))
    return mean - half, mean + half


# ---------------------------------------------------------------------------
# Build measurement
# ---------------------------------------------------------------------------


@dataclass
class BuildRecord:
    strategy_tag: str
    index_path: str
    manifest_path: str
    build_seconds: float
    persisted_bytes: int
    unit_count: int
    provider_counters: dict[str, dict[str, int]]


def _counter_delta(
    before: Mapping[str, Mapping[str, int]], after: Mapping[str, Mapping[str, int]]
) -> dict[str, dict[str, int]]:
    delta = {}
    for op, counts in after.items():
        base = before.get(op, {})
        delta[op] = {key: counts[key] - base.get(key, 0) for key in counts}
    return delta


def measure_build(
    config: StrategyConfig,
    corpus: Corpus,
    service: ProviderService,
    out_dir: str | Path,
) -> BuildRecord:
    """Build one strategy's index, timing the whole build (provider calls
    included) on a monotonic clock, and persist index plus chunk manifest.

    Cache-hit counters are recorded so warm and cold builds are
    distinguishable in reports.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slug = strategy_slug(config.tag)
    index_path = out_dir / f"{slug}.scix"
    manifest_path = out_dir / f"{slug}.chunks.jsonl"

    before = service.counter_snapshot()
    start = time.perf_counter()
    result: BuildResult = build_index(corpus, config, service)
    persisted = save_index(result.index, index_path)
    elapsed = time.perf_counter() - start
    write_chunk_manifest(result.units, manifest_path)

    return BuildRecord(
        strategy_tag=config.tag,
        index_path=str(index_path),
        manifest_path=str(manifest_path),
        build_seconds=elapsed,
        persisted_bytes=persisted,
        unit_count=result.index.count,
        provider_counters=_counter_delta(before, service.counter_snapshot()),
    )


def strategy_slug(tag: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", tag.lower()).strip("-")


# ---------------------------------------------------------------------------
# Benchmark evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalOutcome:
    recall: EvalMatrix
    latency_ms: EvalMatrix
    run_records: list[dict]


def evaluate_methods(
    records: Sequence[QARecord],
    indexes: Mapping[str, VectorIndex | RaptorIndex],
    service: ProviderService,
    k_units: int = 100,
    k_sections: int = 10,
    repetitions: int = 5,
    aggregation: str = "max",
    section_rank: Mapping[str, int] | None = None,
    beam: int = 8,
) -> EvalOutcome:
    """Run every question through every method, collecting recall and
    retrieval-only latency. Query embedding happens outside the timed region.
    """
    if not records:
        raise DatasetError("no questions to evaluate")
    if not indexes:
        raise ValueError("no indexes to evaluate")
    method_tags = list(indexes)
    question_ids = [r.query_id for r in records]
    recall = np.zeros((len(records), len(method_tags)))
    latency = np.zeros((len(records), len(method_tags)))
    run_records = []

    query_vectors = service.embed_batch([r.question for r in records])
    for col, tag in enumerate(method_tags):
        index = indexes[tag]
        for row, record in enumerate(records):
            timed = timed_retrieve(
                query_vectors[row],
                index,
                repetitions=repetitions,
                k_units=k_units,
                k_sections=k_sections,
                aggregation=aggregation,
                section_rank=section_rank,
                beam=beam,
                query_id=record.query_id,
            )
            recall[row, col] = recall_at_k(timed.ranking, record.gold_section_ids)
            latency[row, col] = timed.mean_latency_ms
            run_records.append(
                {
                    "query_id": record.query_id,
                    "strategy_tag": tag,
                    "ranked": [{"section": s, "score": v} for s, v in timed.ranking.ranked],
                    "latency_ms": timed.latencies_ms,
                    "k_units": k_units,
                    "k_sections": k_sections,
                }
            )
    return EvalOutcome(
        recall=EvalMatrix(question_ids, method_tags, recall),
        latency_ms=EvalMatrix(question_ids, method_tags, latency),
        run_records=run_records,
    )


def compare_to_baseline(
    matrix: EvalMatrix,
    baseline: str,
    draws: int = PERMUTATION_DRAWS,
    seed: int = 0,
    bootstrap_draws: int = BOOTSTRAP_DRAWS,
) -> dict:
    """Friedman omnibus plus per-method paired tests against the baseline.

    Every non-baseline method gets a raw permutation p-value, a Holm-adjusted
    p-value, and a paired bootstrap 95% interval for its mean difference.
    """
    if baseline not in matrix.method_tags:
        raise ValueError(f"baseline {baseline!r} is not among methods {matrix.method_tags}")
    outcome: dict = {"baseline": baseline, "methods": {}}
    if len(matrix.method_tags) >= 3 and len(matrix.question_ids) >= 2:
        statistic, p_value = friedman_test(matrix)
        outcome["friedman"] = {"statistic": statistic, "p_value": p_value}

    base_scores = matrix.column(baseline)
    others = [tag for tag in matrix.method_tags if tag != baseline]
    raw_p = []
    for i, tag in enumerate(others):
        scores = matrix.column(tag)
        raw_p.append(
            paired_permutation_test(scores, base_scores, draws, derive_seed(seed, f"perm-{tag}"))
        )
    adjusted = holm_adjust(raw_p) if raw_p else []
    for i, tag in enumerate(others):
        diffs = matrix.column(tag) - base_scores
        low, high = paired_bootstrap_ci(
            diffs, bootstrap_draws, derive_seed(seed, f"boot-{tag}")
        )
        outcome["methods"][tag] = {
            "mean": float(matrix.column(tag).mean()),
            "mean_diff_vs_baseline": float(diffs.mean()),
            "p_raw": raw_p[i],
            "p_holm": adjusted[i],
            "bootstrap_ci": [low, high],
        }
    outcome["methods"][baseline] = {"mean": float(base_scores.mean())}
    return outcome
