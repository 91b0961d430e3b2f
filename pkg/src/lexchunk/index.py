"""Persisted exact-search vector indexes and the summary-tree index.

File format (little-endian throughout)::

    magic   4 bytes  "SCIX"
    version u16      1 = flat index, 2 = tree index with node table
    dim     u32
    count   u64
    tag     u16 length + UTF-8 bytes
    vectors count * dim * f32
    per row: chunk_id (u16 length + UTF-8), parent count u16,
             each parent id (u16 length + UTF-8)

Version 2 appends a node table::

    level_count u32, then per level: start u64, count u64 (row ranges,
    leaves first); per row: child_count u32, child row indices u64 each,
    summary-hash length u16 + bytes (empty for leaves)

Raw unit texts are never persisted here; the file carries only vectors and
routing metadata, which is what the size accounting measures. Indexes are
immutable once built, so concurrent readers need no locking.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .corpus import Corpus
from .providers import ProviderService, derive_seed
from .strategies import (
    Family,
    IndexedUnit,
    RaptorNode,
    StrategyConfig,
    base_units,
    build_contextual,
    build_fixed,
    build_flat,
    build_lumber,
    build_raptor,
    build_semantic,
)

MAGIC = b"SCIX"
VERSION_FLAT = 1
VERSION_TREE = 2


class IndexFormatError(ValueError):
    """File is not an index file or uses an unknown version."""


class IndexCorruptionError(ValueError):
    """File is recognized but truncated or internally inconsistent."""


@dataclass
class VectorIndex:
    dim: int
    count: int
    vectors: np.ndarray  # (count, dim) float32, unit rows
    chunk_ids: list[str]
    parent_ids: list[tuple[str, ...]]
    strategy_tag: str

    @classmethod
    def from_units(cls, units: Sequence[IndexedUnit], strategy_tag: str) -> "VectorIndex":
        if units:
            vectors = np.stack([u.vector for u in units]).astype(np.float32)
            dim = vectors.shape[1]
        else:
            vectors = np.zeros((0, 0), dtype=np.float32)
            dim = 0
        return cls(
            dim=dim,
            count=len(units),
            vectors=vectors,
            chunk_ids=[u.chunk_id for u in units],
            parent_ids=[u.parent_section_ids for u in units],
            strategy_tag=strategy_tag,
        )


@dataclass
class RaptorIndex:
    dim: int
    count: int
    vectors: np.ndarray
    chunk_ids: list[str]
    parent_ids: list[tuple[str, ...]]
    strategy_tag: str
    levels: list[tuple[int, int]]  # (start row, row count), leaves first
    children: list[tuple[int, ...]]  # child row indices per row
    summary_hashes: list[bytes]  # sha256 per internal row, b"" for leaves

    @classmethod
    def from_nodes(cls, nodes: Sequence[RaptorNode], strategy_tag: str) -> "RaptorIndex":
        if not nodes:
            raise ValueError("cannot build a tree index from zero nodes")
        row_of = {node.node_id: i for i, node in enumerate(nodes)}
        max_level = max(node.level for node in nodes)
        levels = []
        cursor = 0
        for level in range(max_level + 1):
            size = sum(1 for node in nodes if node.level == level)
            levels.append((cursor, size))
            cursor += size
        for (start, size), level in zip(levels, range(max_level + 1)):
            if any(nodes[i].level != level for i in range(start, start + size)):
                raise ValueError("nodes must be ordered by level, leaves first")
        return cls(
            dim=nodes[0].vector.shape[0],
            count=len(nodes),
            vectors=np.stack([node.vector for node in nodes]).astype(np.float32),
            chunk_ids=[node.node_id for node in nodes],
            parent_ids=[
                (node.leaf_unit.parent_section_id,) if node.leaf_unit is not None else ()
                for node in nodes
            ],
            strategy_tag=strategy_tag,
            levels=levels,
            children=[tuple(row_of[c] for c in node.children) for node in nodes],
            summary_hashes=[
                hashlib.sha256(node.summary_text.encode("utf-8")).digest()
                if node.summary_text is not None
                else b""
                for node in nodes
            ],
        )


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def search_topk(index: VectorIndex, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact inner-product search over all rows.

    Results come back in descending score order with ties broken by ascending
    row index; at most min(k, count) entries.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query, dtype=np.float32)
    if query.shape != (index.dim,):
        raise ValueError(f"query dim {query.shape} does not match index dim {index.dim}")
    scores = index.vectors @ query
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in order]


def traverse_raptor_instrumented(
    index: RaptorIndex, query: np.ndarray, beam: int = 8, k_leaves: int = 100
) -> tuple[list[tuple[int, float]], int]:
    """Beam descent from the top level to the leaves.

    Scores the whole top level, keeps the ``beam`` best nodes per level, and
    descends only through their children; surviving leaves are ranked by
    exact inner product. Returns the ranked (leaf row, score) list and the
    number of vectors scored along the way.
    """
    if beam < 1 or k_leaves < 1:
        raise ValueError("beam and k_leaves must be >= 1")
    if index.count == 0:
        raise ValueError("cannot traverse an empty tree")
    query = np.asarray(query, dtype=np.float32)
    if query.shape != (index.dim,):
        raise ValueError(f"query dim {query.shape} does not match index dim {index.dim}")

    scored = 0
    start, size = index.levels[-1]
    frontier = list(range(start, start + size))
    for _ in range(len(index.levels) - 1, 0, -1):
        scores = index.vectors[frontier] @ query
        scored += len(frontier)
        order = np.argsort(-scores, kind="stable")[:beam]
        kept = [frontier[i] for i in order]
        frontier = sorted(row for parent in kept for row in index.children[parent])

    scores = index.vectors[frontier] @ query
    scored += len(frontier)
    order = np.argsort(-scores, kind="stable")[:k_leaves]
    return [(frontier[i], float(scores[i])) for i in order], scored


def traverse_raptor(
    index: RaptorIndex, query: np.ndarray, beam: int = 8, k_leaves: int = 100
) -> list[tuple[int, float]]:
    results, _ = traverse_raptor_instrumented(index, query, beam, k_leaves)
    return results


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _write_str(out: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError(f"string too long for format: {len(data)} bytes")
    out.write(struct.pack("<H", len(data)))
    out.write(data)


def _read_exact(handle: BinaryIO, n: int) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise IndexCorruptionError(f"unexpected end of file (wanted {n} bytes, got {len(data)})")
    return data


def _read_str(handle: BinaryIO) -> str:
    (length,) = struct.unpack("<H", _read_exact(handle, 2))
    return _read_exact(handle, length).decode("utf-8")


def save_index(index: VectorIndex | RaptorIndex, path: str | Path) -> int:
    """Write the index and return the persisted byte count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    is_tree = isinstance(index, RaptorIndex)
    with path.open("wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<H", VERSION_TREE if is_tree else VERSION_FLAT))
        out.write(struct.pack("<I", index.dim))
        out.write(struct.pack("<Q", index.count))
        _write_str(out, index.strategy_tag)
        out.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
        for chunk_id, parents in zip(index.chunk_ids, index.parent_ids):
            _write_str(out, chunk_id)
            out.write(struct.pack("<H", len(parents)))
            for parent in parents:
                _write_str(out, parent)
        if is_tree:
            out.write(struct.pack("<I", len(index.levels)))
            for start, size in index.levels:
                out.write(struct.pack("<QQ", start, size))
            for child_rows, digest in zip(index.children, index.summary_hashes):
                out.write(struct.pack("<I", len(child_rows)))
                for row in child_rows:
                    out.write(struct.pack("<Q", row))
                out.write(struct.pack("<H", len(digest)))
                out.write(digest)
    return path.stat().st_size


def load_index(path: str | Path) -> VectorIndex | RaptorIndex:
    """Load an index; vectors round-trip bit-exactly."""
    path = Path(path)
    with path.open("rb") as handle:
        magic = handle.read(4)
        if magic != MAGIC:
            raise IndexFormatError(f"bad magic {magic!r}, not an index file")
        (version,) = struct.unpack("<H", _read_exact(handle, 2))
        if version not in (VERSION_FLAT, VERSION_TREE):
            raise IndexFormatError(f"unsupported format version {version}")
        (dim,) = struct.unpack("<I", _read_exact(handle, 4))
        (count,) = struct.unpack("<Q", _read_exact(handle, 8))
        tag = _read_str(handle)
        raw = _read_exact(handle, count * dim * 4)
        vectors = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
        chunk_ids = []
        parent_ids = []
        for _ in range(count):
            chunk_ids.append(_read_str(handle))
            (n_parents,) = struct.unpack("<H", _read_exact(handle, 2))
            parent_ids.append(tuple(_read_str(handle) for _ in range(n_parents)))
        if version == VERSION_FLAT:
            trailing = handle.read(1)
            if trailing:
                raise IndexCorruptionError("trailing bytes after flat index payload")
            return VectorIndex(dim, count, vectors, chunk_ids, parent_ids, tag)

        (level_count,) = struct.unpack("<I", _read_exact(handle, 4))
        levels = [struct.unpack("<QQ", _read_exact(handle, 16)) for _ in range(level_count)]
        children = []
        hashes = []
        for _ in range(count):
            (n_children,) = struct.unpack("<I", _read_exact(handle, 4))
            rows = tuple(
                struct.unpack("<Q", _read_exact(handle, 8))[0] for _ in range(n_children)
            )
            if any(row >= count for row in rows):
                raise IndexCorruptionError("child row index out of range")
            children.append(rows)
            (hash_len,) = struct.unpack("<H", _read_exact(handle, 2))
            hashes.append(_read_exact(handle, hash_len))
        trailing = handle.read(1)
        if trailing:
            raise IndexCorruptionError("trailing bytes after tree index payload")
        return RaptorIndex(
            dim,
            count,
            vectors,
            chunk_ids,
            parent_ids,
            tag,
            [(int(s), int(c)) for s, c in levels],
            children,
            hashes,
        )


# ---------------------------------------------------------------------------
# Build orchestration
# ---------------------------------------------------------------------------


@dataclass
class BuildResult:
    index: VectorIndex | RaptorIndex
    units: list[IndexedUnit]  # manifest rows; for trees, one per node


def build_index(corpus: Corpus, config: StrategyConfig, service: ProviderService) -> BuildResult:
    """Run one strategy end to end: base units, family builder, finalized index."""
    tag = config.tag
    if config.family is Family.FIXED:
        units = build_fixed(corpus, config.window_tokens, config.overlap_tokens, service, tag)
        return BuildResult(VectorIndex.from_units(units, tag), units)

    units_in = base_units(corpus, config.granularity, service)
    if config.family is Family.FLAT:
        units = build_flat(units_in, service, tag)
    elif config.family is Family.CONTEXTUAL:
        units = build_contextual(units_in, corpus, service, tag)
    elif config.family is Family.SEMANTIC:
        units = build_semantic(
            units_in, service, config.cluster_count, derive_seed(config.seed, "semantic"), tag
        )
    elif config.family is Family.LUMBER:
        units = build_lumber(units_in, config.lumber_budget_tokens, service, tag)
    elif config.family is Family.RAPTOR:
        nodes = build_raptor(
            units_in, service, config.raptor_reduction, derive_seed(config.seed, "raptor")
        )
        tree = RaptorIndex.from_nodes(nodes, tag)
        rows = [
            IndexedUnit(
                node.node_id,
                node.vector,
                tree.parent_ids[i],
                node.text,
                tag,
                len(node.text.split()),
            )
            for i, node in enumerate(nodes)
        ]
        return BuildResult(tree, rows)
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unknown family {config.family}")
    return BuildResult(VectorIndex.from_units(units, tag), units)
