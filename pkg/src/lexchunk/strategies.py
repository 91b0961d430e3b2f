"""Builders for the chunking-strategy families.

Each builder turns a corpus (or its base units) into a list of
:class:`IndexedUnit` values: the embedded retrieval keys, each mapped to the
ordered set of sections its source span touches. Flat and contextual units
keep a single parent; fixed windows, Lumber chunks, semantic clusters, and
tree nodes may map to several.

All builders are deterministic for a fixed (corpus, config, seed) under mock
providers, and they emit units in corpus order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (
    BaseUnit,
    Corpus,
    Granularity,
    count_tokens,
    extract_units,
    render_hierarchy_and_section,
    section_full_text,
)
from .providers import ProviderService, derive_seed, normalize_rows

# Window/overlap settings built when no explicit fixed config is given.
DEFAULT_FIXED_SETTINGS: tuple[tuple[int, int], ...] = (
    (256, 64),
    (128, 32),
    (64, 16),
    (32, 8),
    (16, 4),
)

DEFAULT_LUMBER_BUDGET = 512
DEFAULT_RAPTOR_REDUCTION = 4
SEMANTIC_CLUSTER_CAP = 1000


class Family(str, Enum):
    FLAT = "flat"
    FIXED = "fixed"
    CONTEXTUAL = "contextual"
    SEMANTIC = "semantic"
    LUMBER = "lumber"
    RAPTOR = "raptor"


@dataclass
class StrategyConfig:
    family: Family
    granularity: Granularity = Granularity.SUBSECTION
    window_tokens: int | None = None
    overlap_tokens: int | None = None
    cluster_count: int | None = None
    lumber_budget_tokens: int | None = None
    raptor_reduction: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        self.family = Family(self.family)
        self.granularity = Granularity(self.granularity)
        if self.family is Family.FIXED:
            if self.window_tokens is None:
                self.window_tokens, self.overlap_tokens = DEFAULT_FIXED_SETTINGS[0]
            if self.overlap_tokens is None:
                self.overlap_tokens = 0
            if not (self.window_tokens > self.overlap_tokens >= 0):
                raise ValueError(
                    f"fixed windows need window_tokens > overlap_tokens >= 0, "
                    f"got {self.window_tokens}/{self.overlap_tokens}"
                )
        if self.family is Family.SEMANTIC and self.cluster_count is not None and self.cluster_count < 1:
            raise ValueError("cluster_count must be >= 1")
        if self.family is Family.LUMBER:
            if self.lumber_budget_tokens is None:
                self.lumber_budget_tokens = DEFAULT_LUMBER_BUDGET
            if self.lumber_budget_tokens < 1:
                raise ValueError("lumber_budget_tokens must be >= 1")
        if self.family is Family.RAPTOR:
            if self.raptor_reduction is None:
                self.raptor_reduction = DEFAULT_RAPTOR_REDUCTION
            if self.raptor_reduction < 2:
                raise ValueError("raptor_reduction must be >= 2")
        if self.granularity is Granularity.SECTION and self.family not in (Family.FLAT, Family.FIXED):
            raise ValueError(f"section granularity is only valid for flat builds, not {self.family.value}")

    @property
    def tag(self) -> str:
        if self.family is Family.FLAT:
            return self.granularity.value.capitalize()
        if self.family is Family.FIXED:
            return f"Fixed {self.window_tokens} / {self.overlap_tokens}"
        name = {
            Family.CONTEXTUAL: "Contextual",
            Family.SEMANTIC: "Semantic",
            Family.LUMBER: "Lumber",
            Family.RAPTOR: "RAPTOR",
        }[self.family]
        return f"{name} {self.granularity.value}"


def default_strategy_set(seed: int = 0) -> list[StrategyConfig]:
    """The full evaluated grid: 4 flat + 5 fixed + 3 each of contextual,
    semantic, lumber, and RAPTOR builds (21 variants)."""
    fine = (Granularity.SUBSECTION, Granularity.SENTENCE, Granularity.PROPOSITION)
    configs = [StrategyConfig(Family.FLAT, g, seed=seed) for g in (Granularity.SECTION, *fine)]
    configs += [
        StrategyConfig(Family.FIXED, window_tokens=w, overlap_tokens=o, seed=seed)
        for w, o in DEFAULT_FIXED_SETTINGS
    ]
    for family in (Family.CONTEXTUAL, Family.SEMANTIC, Family.LUMBER, Family.RAPTOR):
        configs += [StrategyConfig(family, g, seed=seed) for g in fine]
    return configs


@dataclass
class IndexedUnit:
    """One embedded retrieval key and the sections it maps back to."""

    chunk_id: str
    vector: np.ndarray
    parent_section_ids: tuple[str, ...]
    embedded_text: str
    strategy_tag: str
    token_count: int


@dataclass
class RaptorNode:
    node_id: str
    level: int
    vector: np.ndarray
    children: tuple[str, ...] = ()
    leaf_unit: BaseUnit | None = None
    summary_text: str | None = None

    @property
    def text(self) -> str:
        return self.leaf_unit.text if self.leaf_unit is not None else (self.summary_text or "")


def _ordered_parents(units: Sequence[BaseUnit]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for unit in units:
        seen.setdefault(unit.parent_section_id, None)
    return tuple(seen)


# ---------------------------------------------------------------------------
# Base units
# ---------------------------------------------------------------------------


def proposition_units(corpus: Corpus, service: ProviderService) -> list[BaseUnit]:
    """Decompose every sentence into propositions. Generated once; reruns hit
    the provider cache."""
    sections = {s.section_id: s for s in corpus.sections}
    units = []
    for sentence_unit in extract_units(corpus, Granularity.SENTENCE):
        context = section_full_text(sections[sentence_unit.parent_section_id])
        for j, text in enumerate(service.propositionize(sentence_unit, context), start=1):
            sid = sentence_unit.parent_section_id
            ordinal = sentence_unit.unit_id.rsplit(":", 1)[1]
            units.append(
                BaseUnit(f"{sid}:proposition:{ordinal}.{j}", Granularity.PROPOSITION, sid, text)
            )
    return units


def base_units(corpus: Corpus, granularity: Granularity, service: ProviderService) -> list[BaseUnit]:
    if granularity is Granularity.PROPOSITION:
        return proposition_units(corpus, service)
    return extract_units(corpus, granularity)


# ---------------------------------------------------------------------------
# Flat / contextual
# ---------------------------------------------------------------------------


def build_flat(units: Sequence[BaseUnit], service: ProviderService, tag: str = "flat") -> list[IndexedUnit]:
    """Index every base unit as-is: retrieved and indexed units coincide."""
    if not units:
        return []
    vectors = service.embed_batch([u.text for u in units])
    return [
        IndexedUnit(u.unit_id, vectors[i], (u.parent_section_id,), u.text, tag, count_tokens(u.text))
        for i, u in enumerate(units)
    ]


def build_contextual(
    units: Sequence[BaseUnit], corpus: Corpus, service: ProviderService, tag: str = "contextual"
) -> list[IndexedUnit]:
    """Prepend a generated situating prefix to each unit before embedding.

    Only the embedded text changes; the parent mapping stays one-to-one with
    the base units.
    """
    if not units:
        return []
    sections = {s.section_id: s for s in corpus.sections}
    context_docs = {
        sid: render_hierarchy_and_section(section) for sid, section in sections.items()
    }
    embedded_texts = []
    for unit in units:
        prefix = service.contextual_prefix(unit, context_docs[unit.parent_section_id])
        label = unit.granularity.value.capitalize()
        if prefix.strip():
            embedded_texts.append(f"Additional context: {prefix}\n{label}: {unit.text}")
        else:
            embedded_texts.append(f"{label}: {unit.text}")
    vectors = service.embed_batch(embedded_texts)
    return [
        IndexedUnit(
            f"ctx:{u.unit_id}",
            vectors[i],
            (u.parent_section_id,),
            embedded_texts[i],
            tag,
            count_tokens(embedded_texts[i]),
        )
        for i, u in enumerate(units)
    ]


# ---------------------------------------------------------------------------
# Fixed-size windows
# ---------------------------------------------------------------------------


def _corpus_token_stream(corpus: Corpus) -> tuple[list[str], list[str]]:
    """All body tokens in corpus order (subsection markers included), plus
    the parent section id of each token."""
    tokens: list[str] = []
    parents: list[str] = []

    def push(text: str, sid: str) -> None:
        for token in text.split():
            tokens.append(token)
            parents.append(sid)

    for section in corpus.sections:
        for subsection in section.subsections:
            push(f"({subsection.ordinal})", section.section_id)
            for sentence in subsection.sentences:
                push(sentence.text, section.section_id)
    return tokens, parents


def build_fixed(
    corpus: Corpus,
    window_tokens: int,
    overlap_tokens: int,
    service: ProviderService,
    tag: str | None = None,
) -> list[IndexedUnit]:
    """Slide exact W-token windows with W-O stride over the corpus token
    stream; the final window may be shorter. Windows crossing a section
    boundary map to every section they touch."""
    if window_tokens <= overlap_tokens or overlap_tokens < 0:
        raise ValueError(
            f"need window_tokens > overlap_tokens >= 0, got {window_tokens}/{overlap_tokens}"
        )
    tag = tag or f"Fixed {window_tokens} / {overlap_tokens}"
    tokens, parents = _corpus_token_stream(corpus)
    total = len(tokens)
    if total == 0:
        return []

    spans = []
    start = 0
    while True:
        end = min(start + window_tokens, total)
        spans.append((start, end))
        if start + window_tokens >= total:
            break
        start += window_tokens - overlap_tokens

    texts = [" ".join(tokens[s:e]) for s, e in spans]
    vectors = service.embed_batch(texts)
    units = []
    for i, (s, e) in enumerate(spans):
        span_parents: dict[str, None] = {}
        for sid in parents[s:e]:
            span_parents.setdefault(sid, None)
        units.append(IndexedUnit(f"win:{i}", vectors[i], tuple(span_parents), texts[i], tag, e - s))
    return units


def expected_fixed_chunk_count(total_tokens: int, window_tokens: int, overlap_tokens: int) -> int:
    return math.ceil(max(total_tokens - overlap_tokens, 1) / (window_tokens - overlap_tokens))


# ---------------------------------------------------------------------------
# KMeans
# ---------------------------------------------------------------------------


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(
    vectors: Sequence[np.ndarray] | np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> tuple[list[int], np.ndarray]:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Terminates when the largest centroid shift drops below ``tol`` or after
    ``max_iter`` sweeps. Empty clusters are reseeded to the point farthest
    from its current centroid, so every cluster ends non-empty. Deterministic
    for fixed inputs and seed.
    """
    points = np.asarray(vectors, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)

    point_sq = (points**2).sum(axis=1)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = point_sq[:, None] - 2.0 * points @ centroids.T + (centroids**2).sum(axis=1)[None, :]
        assign = np.argmin(d2, axis=1)

        # reseed empty clusters with the farthest point of a multi-member cluster
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            residual = d2[np.arange(n), assign].copy()
            residual[counts[assign] <= 1] = -np.inf
            farthest = int(np.argmax(residual))
            counts[assign[farthest]] -= 1
            assign[farthest] = j
            counts[j] = 1

        new_centroids = np.zeros_like(centroids)
        np.add.at(new_centroids, assign, points)
        counts = np.bincount(assign, minlength=k).astype(np.float64)
        new_centroids /= counts[:, None]

        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    return [int(a) for a in assign], centroids.astype(np.float32)


def default_cluster_count(unit_count: int) -> int:
    return min(SEMANTIC_CLUSTER_CAP, max(1, round(unit_count / 24)))


def build_semantic(
    units: Sequence[BaseUnit],
    service: ProviderService,
    cluster_count: int | None,
    seed: int,
    tag: str = "semantic",
) -> list[IndexedUnit]:
    """Cluster unit embeddings and index one mean vector per cluster, mapped
    back to every member's parent section."""
    if not units:
        return []
    k = cluster_count if cluster_count is not None else default_cluster_count(len(units))
    vectors = service.embed_batch([u.text for u in units])
    assign, _ = kmeans(vectors, k, seed)

    members: dict[int, list[int]] = {}
    for i, label in enumerate(assign):
        members.setdefault(label, []).append(i)
    # canonical cluster order: first member's corpus position
    ordered = sorted(members.values(), key=lambda idx: idx[0])

    out = []
    for j, idx in enumerate(ordered):
        pooled = normalize_rows(vectors[idx].mean(axis=0, dtype=np.float64)[None, :])[0]
        member_units = [units[i] for i in idx]
        text = "\n".join(u.text for u in member_units)
        out.append(
            IndexedUnit(
                f"cluster:{j}",
                pooled,
                _ordered_parents(member_units),
                text,
                tag,
                sum(count_tokens(u.text) for u in member_units),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Lumber-style chunking
# ---------------------------------------------------------------------------


def build_lumber(
    units: Sequence[BaseUnit],
    budget_tokens: int,
    service: ProviderService,
    tag: str = "lumber",
) -> list[IndexedUnit]:
    """Accumulate units up to the token budget, ask the generator for the
    first unit of the next chunk, emit everything before it, and resume
    there. Chunks partition the unit stream in order."""
    if budget_tokens < 1:
        raise ValueError("budget_tokens must be >= 1")
    chunk_spans: list[tuple[int, int]] = []
    pos = 0
    while pos < len(units):
        group_end = pos + 1  # a group always holds at least one unit
        consumed = count_tokens(units[pos].text)
        while group_end < len(units):
            nxt = count_tokens(units[group_end].text)
            if consumed + nxt > budget_tokens:
                break
            consumed += nxt
            group_end += 1
        group = units[pos:group_end]
        split = service.lumber_split(group, budget_tokens)
        take = len(group) if split >= len(group) + 1 else max(split - 1, 1)
        chunk_spans.append((pos, pos + take))
        pos += take

    texts = [" ".join(u.text for u in units[s:e]) for s, e in chunk_spans]
    vectors = service.embed_batch(texts)
    out = []
    for i, (s, e) in enumerate(chunk_spans):
        member_units = list(units[s:e])
        out.append(
            IndexedUnit(
                f"lum:{i}",
                vectors[i],
                _ordered_parents(member_units),
                texts[i],
                tag,
                sum(count_tokens(u.text) for u in member_units),
            )
        )
    return out


# ---------------------------------------------------------------------------
# RAPTOR tree
# ---------------------------------------------------------------------------


def build_raptor(
    units: Sequence[BaseUnit],
    service: ProviderService,
    reduction: int,
    seed: int,
) -> list[RaptorNode]:
    """Cluster bottom-up, summarize each cluster, re-embed, and recurse until
    a level has at most ``reduction`` nodes. Returns every node, leaves first.
    """
    if not units:
        raise ValueError("build_raptor requires at least one unit")
    if reduction < 2:
        raise ValueError("reduction must be >= 2")
    leaf_vectors = service.embed_batch([u.text for u in units])
    nodes = [
        RaptorNode(f"L0N{i}", 0, leaf_vectors[i], leaf_unit=unit) for i, unit in enumerate(units)
    ]
    level_nodes = list(nodes)
    level = 0
    while len(level_nodes) > reduction:
        k = max(1, math.ceil(len(level_nodes) / reduction))
        vectors = np.stack([node.vector for node in level_nodes])
        assign, _ = kmeans(vectors, k, derive_seed(seed, f"raptor-level-{level}"))
        members: dict[int, list[int]] = {}
        for i, label in enumerate(assign):
            members.setdefault(label, []).append(i)
        ordered = sorted(members.values(), key=lambda idx: idx[0])

        summaries = [service.summarize_cluster([level_nodes[i].text for i in idx]) for idx in ordered]
        summary_vectors = service.embed_batch(summaries)
        level += 1
        next_nodes = []
        for j, idx in enumerate(ordered):
            node = RaptorNode(
                f"L{level}N{j}",
                level,
                summary_vectors[j],
                children=tuple(level_nodes[i].node_id for i in idx),
                summary_text=summaries[j],
            )
            next_nodes.append(node)
        nodes.extend(next_nodes)
        level_nodes = next_nodes
    return nodes


# ---------------------------------------------------------------------------
# Chunk manifest
# ---------------------------------------------------------------------------


def write_chunk_manifest(units: Sequence[IndexedUnit], path: str | Path) -> None:
    """One JSON line per indexed unit; embedded text is recorded by hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for unit in units:
            digest = hashlib.sha256(unit.embedded_text.encode("utf-8")).hexdigest()
            handle.write(
                json.dumps(
                    {
                        "chunk_id": unit.chunk_id,
                        "strategy_tag": unit.strategy_tag,
                        "parent_section_ids": list(unit.parent_section_ids),
                        "embedded_text_sha256": digest,
                        "token_count": unit.token_count,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
