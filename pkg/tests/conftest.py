"""Shared fixtures: small statute corpora and deterministic providers."""

from __future__ import annotations

import numpy as np
import pytest

# filled by the acceptance suite's criterion() helper
ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, ok in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")

from lexchunk.corpus import (
    Corpus,
    HierarchyPath,
    Section,
    Sentence,
    Subsection,
    parse_corpus,
)
from lexchunk.providers import DiskCache, MockEmbedder, MockGenerator, ProviderService

LEASE_S1 = (
    "A lease agreement imposes on the lessor a duty to grant the lessee use of "
    "the leased property for the lease period."
)
LEASE_S2 = (
    "The lessor is to make available the leased property to the lessee in a "
    "condition suitable for use as contractually agreed and maintain it in this "
    "condition for the lease period."
)
LEASE_S3 = "The lessor is to bear all costs to which the leased property is subject."
LEASE_S4 = "The lessee is obliged to pay the lessor the agreed rent."

PURCHASE_S1 = (
    "By a purchase agreement, the seller of a thing is obliged to deliver the "
    "thing to the buyer and to procure ownership of the thing for the buyer."
)

MINOR_111 = [
    "A unilateral legal transaction that a minor undertakes without the "
    "necessary consent of the legal representative is ineffective.",
    "If the minor undertakes such a legal transaction with regard to another "
    "person with this consent, the legal transaction is ineffective if the "
    "minor does not present the consent in writing and the other person "
    "rejects the legal transaction for this reason without undue delay.",
    "Rejection is not possible if the representative had given the other "
    "person notice of the consent.",
]
MINOR_112_1 = [
    "If the legal representative, with the ratification of the family court, "
    "authorises the minor to operate a trade or business independently, the "
    "minor has unlimited capacity to contract for such transactions as the "
    "business operations entail.",
    "Legal transactions are exempt for which the representative needs to "
    "obtain the ratification of the family court.",
]
MINOR_112_2 = [
    "The authorisation may be revoked by the legal representative only with "
    "the ratification of the family court.",
]
MINOR_113_1 = [
    "If the legal representative authorises the minor to enter service or "
    "employment, the minor has unlimited capacity to enter into transactions "
    "that relate to entering or leaving service or employment of the permitted "
    "nature or performing the duties arising from such a relationship.",
    "Contracts are exempt for which the legal representative needs to obtain "
    "the ratification of the family court.",
]
MINOR_113_2 = [
    "The authorisation may be revoked or restricted by the legal representative.",
]

PENALTY_339 = (
    "Where the obligor promises the obligee, in the event of their failing to "
    "perform their obligation or failing to do so properly, payment of an "
    "amount of money as a penalty, the penalty is payable upon the obligor "
    "being in default."
)
PENALTY_340 = (
    "If the obligor has promised the penalty in the event of their failing to "
    "perform their obligation, then the obligee may demand the penalty that is "
    "payable in lieu of fulfilment."
)
PENALTY_341 = (
    "If the obligor has promised the penalty in the event of their failing to "
    "perform their obligation properly, including performance at the specified "
    "time, the obligee may demand the payable penalty in addition to performance."
)


def make_section(
    section_id: str,
    heading: str,
    subsection_sentences: list[list[str]],
    hierarchy: HierarchyPath = HierarchyPath(),
) -> Section:
    subsections = []
    ordinal_in_section = 1
    for i, texts in enumerate(subsection_sentences, start=1):
        sentences = []
        for text in texts:
            sentences.append(Sentence(ordinal_in_section, text))
            ordinal_in_section += 1
        subsections.append(Subsection(i, tuple(sentences)))
    return Section(section_id, heading, hierarchy, tuple(subsections))


@pytest.fixture
def lease_corpus() -> Corpus:
    """Single two-subsection lease section with a two-level hierarchy."""
    section = make_section(
        "535",
        "Contents and primary duties of the lease agreement",
        [[LEASE_S1, LEASE_S2, LEASE_S3], [LEASE_S4]],
        HierarchyPath(book="Law of Obligations", division="Lease"),
    )
    return Corpus("lease", (section,))


@pytest.fixture
def minors_corpus() -> Corpus:
    """Three adjacent sections on minors' capacity; nine sentences total."""
    return Corpus(
        "minors",
        (
            make_section("111", "Unilateral legal transactions", [MINOR_111]),
            make_section(
                "112", "Independent operation of a trade or business", [MINOR_112_1, MINOR_112_2]
            ),
            make_section("113", "Service or employment relationship", [MINOR_113_1, MINOR_113_2]),
        ),
    )


@pytest.fixture
def penalty_corpus() -> Corpus:
    return Corpus(
        "penalties",
        (
            make_section("339", "Payability of penalty for breach of contract", [[PENALTY_339]]),
            make_section("340", "Promise to pay a penalty for non-performance", [[PENALTY_340]]),
            make_section("341", "Promise of a penalty for improper performance", [[PENALTY_341]]),
        ),
    )


def synthetic_corpus(
    n_sections: int,
    seed: int = 0,
    shared_vocab: int = 0,
    shared_ratio: float = 0.0,
    sentences_per_subsection: tuple[int, int] = (2, 3),
    subsections_per_section: tuple[int, int] = (2, 3),
    tokens_per_sentence: int = 10,
) -> Corpus:
    """Corpus where each section owns a distinct vocabulary, optionally mixed
    with a shared pool so sections are confusable."""
    rng = np.random.default_rng(seed)
    pool = [f"common{i}" for i in range(shared_vocab)]
    sections = []
    for s in range(1, n_sections + 1):
        own = [f"s{s}term{j}" for j in range(24)]
        n_subs = int(rng.integers(subsections_per_section[0], subsections_per_section[1] + 1))
        subsection_sentences = []
        for _ in range(n_subs):
            n_sent = int(rng.integers(sentences_per_subsection[0], sentences_per_subsection[1] + 1))
            texts = []
            for _ in range(n_sent):
                words = []
                for _ in range(tokens_per_sentence):
                    if pool and rng.random() < shared_ratio:
                        words.append(pool[int(rng.integers(len(pool)))])
                    else:
                        words.append(own[int(rng.integers(len(own)))])
                texts.append(" ".join(words) + ".")
            subsection_sentences.append(texts)
        sections.append(make_section(str(s), f"Heading {s}", subsection_sentences))
    return Corpus("synthetic", tuple(sections))


def mock_service(
    cache_dir=None, seed: int = 0, dim: int = 256, batch_size: int = 64
) -> ProviderService:
    return ProviderService(
        MockEmbedder(dim=dim, seed=seed),
        MockGenerator(seed=seed),
        DiskCache(cache_dir) if cache_dir else None,
        embed_model=f"hash-embed-{dim}",
        gen_model="rule-gen",
        batch_size=batch_size,
    )


@pytest.fixture
def service() -> ProviderService:
    return mock_service()


@pytest.fixture
def cached_service(tmp_path) -> ProviderService:
    return mock_service(cache_dir=tmp_path / "cache")


def corpus_roundtrip(corpus: Corpus) -> Corpus:
    from lexchunk.corpus import corpus_to_json

    return parse_corpus(corpus_to_json(corpus), "canonical-json", name=corpus.name)


def random_index(n: int, dim: int, seed: int, tag: str = "fixture"):
    """Random unit-vector index with cycling parent ids."""
    from lexchunk.index import VectorIndex
    from lexchunk.providers import normalize_rows
    from lexchunk.strategies import IndexedUnit

    rng = np.random.default_rng(seed)
    vectors = normalize_rows(rng.normal(size=(n, dim)))
    units = [
        IndexedUnit(f"u{i}", vectors[i], (str(1 + i % 7),), f"text {i}", tag, 2)
        for i in range(n)
    ]
    return VectorIndex.from_units(units, tag)


def brute_force_topk(vectors: np.ndarray, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Independent O(n*d) search oracle: explicit dots, sort by (-score, row)."""
    scores = [(i, float(np.dot(row, query))) for i, row in enumerate(vectors)]
    scores.sort(key=lambda pair: (-pair[1], pair[0]))
    return scores[:k]


def format_size_oracle(index) -> int:
    """Persisted byte count recomputed from the file layout definition."""
    from lexchunk.index import RaptorIndex

    def s(text: str) -> int:
        return 2 + len(text.encode("utf-8"))

    total = 4 + 2 + 4 + 8 + s(index.strategy_tag)
    total += index.count * index.dim * 4
    for chunk_id, parents in zip(index.chunk_ids, index.parent_ids):
        total += s(chunk_id) + 2 + sum(s(p) for p in parents)
    if isinstance(index, RaptorIndex):
        total += 4 + 16 * len(index.levels)
        for rows, digest in zip(index.children, index.summary_hashes):
            total += 4 + 8 * len(rows) + 2 + len(digest)
    return total
