"""Embedding and text-generation providers with disk caching and retry.

Every generative step in an index build goes through a :class:`ProviderService`,
which fronts either remote HTTP providers or deterministic local mocks with a
shared content-addressed disk cache. The cache makes multi-hour builds
resumable and guarantees at-most-once remote execution per key via an
exclusive file lock taken before the call.

Embedding vectors are float32 numpy rows normalized to unit L2 norm; the mock
embedder is a signed feature hasher over lowercase whitespace tokens, so its
similarities track lexical overlap, which is enough for offline retrieval
tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from filelock import FileLock

from .corpus import BaseUnit, count_tokens

logger = logging.getLogger(__name__)

PREFIX_TOKEN_CAP = 64
SUMMARY_TOKEN_CAP = 256

EMBED_API_KEY_ENV = "EMBED_API_KEY"
LLM_API_KEY_ENV = "LLM_API_KEY"


class ProviderConfigError(ValueError):
    pass


class ProviderUnavailableError(RuntimeError):
    """Remote provider kept failing after all retries.

    ``batch_range`` carries the (start, end) slice of the input batch that
    failed, so a resumed build knows where to pick up.
    """

    def __init__(self, message: str, batch_range: tuple[int, int] | None = None):
        super().__init__(message)
        self.batch_range = batch_range


@dataclass
class ProviderConfig:
    """One provider endpoint (or mock) plus its caching and retry policy."""

    kind: str  # "remote" | "mock"
    model_name: str
    cache_dir: str | Path | None = None
    endpoint: str | None = None
    max_retries: int = 5
    batch_size: int = 32
    seed: int = 0
    dim: int = 256
    backoff_seconds: float = 0.5
    api_key_env: str = EMBED_API_KEY_ENV

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "mock"):
            raise ProviderConfigError(f"unknown provider kind {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise ProviderConfigError("remote provider requires an endpoint")
        if self.kind == "mock" and self.seed is None:
            raise ProviderConfigError("mock provider requires a seed")
        if self.batch_size < 1:
            raise ProviderConfigError("batch_size must be positive")


def derive_seed(seed: int, stage: str) -> int:
    """Stable 63-bit sub-seed for a named pipeline stage."""
    digest = hashlib.blake2b(f"{seed}:{stage}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFFFFFFFFFF


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize each row; zero rows are left untouched."""
    matrix = np.asarray(matrix, dtype=np.float32)
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return (matrix / norms).astype(np.float32)


# ---------------------------------------------------------------------------
# Mock providers
# ---------------------------------------------------------------------------


def _hash64(seed: int, token: str) -> int:
    digest = hashlib.blake2b(f"{seed}\x1f{token}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class MockEmbedder:
    """Signed feature-hashing embedder: deterministic in (text, dim, seed)."""

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.call_count = 0

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        self.call_count += 1
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            if not text.strip():
                raise ValueError("cannot embed empty text")
            for token in text.lower().split():
                h = _hash64(self.seed, token)
                bucket = h % self.dim
                sign = 1.0 if (h >> 63) & 1 else -1.0
                out[i, bucket] += sign
        return normalize_rows(out)


class MockGenerator:
    """Rule-based stand-in for the generation model. All rules are pure
    functions of their inputs, so builds are reproducible offline.

    * propositions: split on ";"; split "X to A and to B" into "X to A." and
      "X to B." (the shared stem before the first infinitive is copied onto
      both conjuncts); otherwise the text is already a single statement.
    * context prefix: the hierarchy labels and section heading parsed from
      the context document, joined by ": ".
    * split index: the first unit whose preceding units consume at least half
      the token budget; no such unit means keep the whole group.
    * summary: first sentence of each input text, concatenated.
    """

    _INFINITIVE_SPLITS = ((" and to ", " to "), (" und zu ", " zu "))

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.call_count = 0

    def propositions(self, text: str) -> list[str]:
        self.call_count += 1
        if not text.strip():
            return [text]
        if ";" in text:
            return [part.strip() for part in text.split(";") if part.strip()]
        for conj, marker in self._INFINITIVE_SPLITS:
            pos = text.find(conj)
            if pos < 0:
                continue
            left = text[:pos].rstrip()
            right = text[pos + len(conj) - len(marker) :].strip()  # keep "to ..."
            stem_end = left.find(marker)
            stem = left[:stem_end].rstrip() if stem_end >= 0 else ""
            terminal = text.rstrip()[-1] if text.rstrip()[-1] in ".!?" else "."
            first = left if left.endswith((".", "!", "?")) else left + terminal
            second = (stem + " " + right) if stem else right
            if not second.endswith((".", "!", "?")):
                second += terminal
            return [first, second.strip()]
        return [text]

    def context_prefix(self, hierarchy_and_section: str) -> str:
        self.call_count += 1
        labels = []
        heading = ""
        for line in hierarchy_and_section.splitlines():
            if not line.strip():
                break
            key, _, value = line.partition(":")
            value = value.strip()
            if key.startswith("Section"):
                heading = value
            elif value:
                labels.append(value)
        parts = labels + ([heading] if heading else [])
        return ": ".join(parts)

    def split_index(self, unit_texts: Sequence[str], budget_tokens: int) -> int:
        self.call_count += 1
        half = budget_tokens / 2.0
        consumed = 0
        for i, text in enumerate(unit_texts, start=1):
            if i > 1 and consumed >= half:
                return i
            consumed += count_tokens(text)
        return len(unit_texts) + 1

    def summary(self, texts: Sequence[str]) -> str:
        self.call_count += 1
        firsts = []
        for text in texts:
            match = re.search(r"[.!?](\s|$)", text)
            firsts.append(text[: match.end()].strip() if match else text.strip())
        return " ".join(firsts)


# ---------------------------------------------------------------------------
# Remote providers
# ---------------------------------------------------------------------------

# transport(url, payload, headers, timeout) -> decoded JSON response
Transport = Callable[[str, dict, dict, float], dict]


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    import requests

    response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    response.raise_for_status()
    return response.json()


def _default_embedding_adapter(response: dict) -> list[list[float]]:
    if "embeddings" in response:
        return response["embeddings"]
    if "data" in response:  # OpenAI-style schema
        return [item["embedding"] for item in response["data"]]
    raise ProviderUnavailableError(f"unrecognized embedding response keys: {sorted(response)}")


def _default_generation_adapter(response: dict) -> str:
    for key in ("text", "output", "completion"):
        if key in response:
            return str(response[key])
    raise ProviderUnavailableError(f"unrecognized generation response keys: {sorted(response)}")


class _RemoteBase:
    def __init__(self, config: ProviderConfig, transport: Transport | None = None):
        self.config = config
        self.transport = transport or _requests_transport
        self.call_count = 0
        api_key = os.environ.get(config.api_key_env, "")
        self.headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

    def _post(self, payload: dict, what: str, batch_range: tuple[int, int] | None = None) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff_seconds * (2 ** (attempt - 1)))
            try:
                self.call_count += 1
                return self.transport(self.config.endpoint, payload, self.headers, 60.0)
            except Exception as exc:  # transport failures are retryable
                last_error = exc
                logger.warning("%s attempt %d failed: %s", what, attempt + 1, exc)
        raise ProviderUnavailableError(
            f"{what} failed after {self.config.max_retries + 1} attempts: {last_error}",
            batch_range=batch_range,
        )


class RemoteEmbedder(_RemoteBase):
    def __init__(
        self,
        config: ProviderConfig,
        transport: Transport | None = None,
        adapter: Callable[[dict], list[list[float]]] | None = None,
    ):
        super().__init__(config, transport)
        self.adapter = adapter or _default_embedding_adapter

    def embed(self, texts: Sequence[str], batch_range: tuple[int, int] | None = None) -> np.ndarray:
        payload = {"model": self.config.model_name, "input": list(texts)}
        response = self._post(payload, "embedding request", batch_range)
        rows = self.adapter(response)
        if len(rows) != len(texts):
            raise ProviderUnavailableError(
                f"embedding response has {len(rows)} rows for {len(texts)} inputs",
                batch_range=batch_range,
            )
        return normalize_rows(np.asarray(rows, dtype=np.float32))


@dataclass
class GenerationPrompts:
    """Editable prompt templates for the remote generation provider."""

    propositions: str = (
        "Decompose the following statutory text into minimal self-contained "
        "statements, one per line. Keep each statement's conditions intact. "
        "If it already expresses a single statement, return it unchanged.\n\n"
        "Context:\n{context}\n\nText:\n{text}\n"
    )
    context_prefix: str = (
        "Write one concise sentence (at most {cap} words) situating the "
        "following passage inside its statute, for retrieval indexing.\n\n"
        "{context}\n\nPassage:\n{text}\n"
    )
    lumber_split: str = (
        "The numbered units below form a running statutory text stream with a "
        "budget of {budget} tokens. Reply with only the number of the first "
        "unit where the next chunk should begin, or {keep} to keep the whole "
        "group.\n\n{units}\n"
    )
    summary: str = (
        "Summarize the shared regulatory content of the following passages in "
        "at most {cap} words.\n\n{texts}\n"
    )


class RemoteGenerator(_RemoteBase):
    def __init__(
        self,
        config: ProviderConfig,
        transport: Transport | None = None,
        adapter: Callable[[dict], str] | None = None,
        prompts: GenerationPrompts | None = None,
    ):
        super().__init__(config, transport)
        self.adapter = adapter or _default_generation_adapter
        self.prompts = prompts or GenerationPrompts()

    def _generate(self, prompt: str, what: str) -> str:
        payload = {"model": self.config.model_name, "prompt": prompt}
        return self.adapter(self._post(payload, what)).strip()

    def propositions(self, text: str, context: str = "") -> list[str]:
        raw = self._generate(
            self.prompts.propositions.format(context=context, text=text), "proposition request"
        )
        return [line.strip() for line in raw.splitlines() if line.strip()]

    def context_prefix(self, hierarchy_and_section: str, text: str = "") -> str:
        return self._generate(
            self.prompts.context_prefix.format(
                cap=PREFIX_TOKEN_CAP, context=hierarchy_and_section, text=text
            ),
            "context-prefix request",
        )

    def split_index(self, unit_texts: Sequence[str], budget_tokens: int) -> int | None:
        listing = "\n".join(f"{i}. {t}" for i, t in enumerate(unit_texts, start=1))
        raw = self._generate(
            self.prompts.lumber_split.format(
                budget=budget_tokens, keep=len(unit_texts) + 1, units=listing
            ),
            "split request",
        )
        match = re.search(r"\d+", raw)
        return int(match.group()) if match else None

    def summary(self, texts: Sequence[str]) -> str:
        return self._generate(
            self.prompts.summary.format(cap=SUMMARY_TOKEN_CAP, texts="\n\n".join(texts)),
            "summary request",
        )


# ---------------------------------------------------------------------------
# Disk cache
# ---------------------------------------------------------------------------


def cache_key(model_name: str, payload: object) -> str:
    canonical = json.dumps(
        {"model": model_name, "input": payload}, sort_keys=True, ensure_ascii=False
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class DiskCache:
    """One JSON file per (operation, key); layout ``<root>/<op>/<k[:2]>/<k>.json``.

    Writers take an exclusive per-key lock before any remote call so that
    concurrent workers execute each key at most once.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, operation: str, key: str) -> Path:
        return self.root / operation / key[:2] / f"{key}.json"

    def lock(self, operation: str, key: str) -> FileLock:
        path = self._path(operation, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        return FileLock(str(path) + ".lock")

    def get(self, operation: str, key: str) -> dict | None:
        path = self._path(operation, key)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, operation: str, key: str, payload: dict) -> None:
        path = self._path(operation, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        tmp.replace(path)


# ---------------------------------------------------------------------------
# Service facade
# ---------------------------------------------------------------------------


def _truncate_tokens(text: str, cap: int) -> str:
    tokens = text.split()
    return " ".join(tokens[:cap]) if len(tokens) > cap else text


@dataclass
class OpCounters:
    provider_calls: int = 0
    cache_hits: int = 0


class ProviderService:
    """Caching, batching, and accounting around one embedder and one generator.

    All methods are safe to call with a warm cache and no providers reachable:
    a cache hit never touches the underlying provider, which is what makes
    long builds resumable and cheap to re-run.
    """

    def __init__(
        self,
        embedder: MockEmbedder | RemoteEmbedder,
        generator: MockGenerator | RemoteGenerator | None = None,
        cache: DiskCache | None = None,
        embed_model: str = "mock-embed",
        gen_model: str = "mock-gen",
        batch_size: int = 32,
    ):
        self.embedder = embedder
        self.generator = generator
        self.cache = cache
        self.embed_model = embed_model
        self.gen_model = gen_model
        self.batch_size = batch_size
        self.counters: dict[str, OpCounters] = {}

    def _count(self, operation: str) -> OpCounters:
        return self.counters.setdefault(operation, OpCounters())

    @property
    def dim(self) -> int:
        if isinstance(self.embedder, MockEmbedder):
            return self.embedder.dim
        return self.embedder.config.dim

    def counter_snapshot(self) -> dict[str, dict[str, int]]:
        return {
            op: {"provider_calls": c.provider_calls, "cache_hits": c.cache_hits}
            for op, c in self.counters.items()
        }

    # -- embeddings --------------------------------------------------------

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        """Embed texts in order, one unit-norm float32 row per input."""
        if not texts:
            raise ValueError("embed_batch requires at least one text")
        for text in texts:
            if not text.strip():
                raise ValueError("embed_batch inputs must be non-empty")
        counters = self._count("embed")
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        keys = [cache_key(self.embed_model, text) for text in texts]

        missing: list[int] = []
        for i, key in enumerate(keys):
            entry = self.cache.get("embed", key) if self.cache else None
            if entry is not None:
                if entry["dim"] != self.dim:
                    raise ProviderConfigError(
                        f"cache holds dim {entry['dim']} vectors but provider emits dim {self.dim}"
                    )
                out[i] = np.asarray(entry["vector"], dtype=np.float32)
                counters.cache_hits += 1
            else:
                missing.append(i)

        for start in range(0, len(missing), self.batch_size):
            block = missing[start : start + self.batch_size]
            block_keys = sorted({keys[i] for i in block})
            locks = [self.cache.lock("embed", k) for k in block_keys] if self.cache else []
            for lock in locks:
                lock.acquire()
            try:
                todo = []
                for i in block:
                    entry = self.cache.get("embed", keys[i]) if self.cache else None
                    if entry is not None:  # another worker filled it meanwhile
                        out[i] = np.asarray(entry["vector"], dtype=np.float32)
                        counters.cache_hits += 1
                    else:
                        todo.append(i)
                if todo:
                    counters.provider_calls += 1
                    batch_range = (todo[0], todo[-1] + 1)
                    if isinstance(self.embedder, RemoteEmbedder):
                        vectors = self.embedder.embed([texts[i] for i in todo], batch_range)
                    else:
                        vectors = self.embedder.embed([texts[i] for i in todo])
                    if vectors.shape[1] != self.dim:
                        raise ProviderConfigError(
                            f"provider returned dim {vectors.shape[1]}, expected {self.dim}"
                        )
                    for row, i in enumerate(todo):
                        out[i] = vectors[row]
                        if self.cache:
                            self.cache.put(
                                "embed",
                                keys[i],
                                {
                                    "model": self.embed_model,
                                    "dim": self.dim,
                                    "vector": [float(x) for x in vectors[row]],
                                },
                            )
            finally:
                for lock in locks:
                    lock.release()
        return out

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    # -- generation --------------------------------------------------------

    def _require_generator(self) -> MockGenerator | RemoteGenerator:
        if self.generator is None:
            raise ProviderConfigError("no generation provider configured")
        return self.generator

    def _cached_generation(self, operation: str, payload: object, produce: Callable[[], dict]) -> dict:
        counters = self._count(operation)
        key = cache_key(self.gen_model, payload)
        if self.cache is None:
            counters.provider_calls += 1
            return produce()
        entry = self.cache.get(operation, key)
        if entry is not None:
            counters.cache_hits += 1
            return entry
        with self.cache.lock(operation, key):
            entry = self.cache.get(operation, key)
            if entry is not None:
                counters.cache_hits += 1
                return entry
            counters.provider_calls += 1
            entry = produce()
            self.cache.put(operation, key, entry)
            return entry

    def propositionize(self, unit: BaseUnit, section_context: str = "") -> list[str]:
        """Decompose a unit into self-contained statements (>= 1, cached)."""
        if unit.granularity.value not in ("sentence", "subsection"):
            raise ValueError(f"can only propositionize sentence or subsection units, got {unit.granularity.value}")
        generator = self._require_generator()

        def produce() -> dict:
            if isinstance(generator, MockGenerator):
                texts = generator.propositions(unit.text)
            else:
                texts = generator.propositions(unit.text, section_context)
            if not texts:
                logger.warning("empty proposition output for %s; keeping unit text", unit.unit_id)
                texts = [unit.text]
            return {"model": self.gen_model, "texts": texts}

        entry = self._cached_generation("propositions", unit.text, produce)
        return list(entry["texts"])

    def contextual_prefix(self, unit: BaseUnit, hierarchy_and_section: str) -> str:
        """Concise prefix situating the unit in its statute, <= 64 tokens."""
        generator = self._require_generator()

        def produce() -> dict:
            if isinstance(generator, MockGenerator):
                text = generator.context_prefix(hierarchy_and_section)
            else:
                text = generator.context_prefix(hierarchy_and_section, unit.text)
            return {"model": self.gen_model, "text": _truncate_tokens(text, PREFIX_TOKEN_CAP)}

        payload = {"unit": unit.text, "context": hierarchy_and_section}
        return self._cached_generation("context_prefix", payload, produce)["text"]

    def lumber_split(self, units: Sequence[BaseUnit], budget_tokens: int) -> int:
        """1-based index of the unit starting the next chunk; len+1 keeps all."""
        if not units:
            raise ValueError("lumber_split requires at least one unit")
        generator = self._require_generator()
        texts = [u.text for u in units]

        def produce() -> dict:
            raw = generator.split_index(texts, budget_tokens)
            # an index of 1 would emit an empty chunk and stall the build
            if raw is None or not (2 <= raw <= len(units) + 1):
                logger.warning("unusable split index %r for %d units; keeping group", raw, len(units))
                raw = len(units) + 1
            return {"model": self.gen_model, "index": raw}

        payload = {"texts": texts, "budget": budget_tokens}
        return int(self._cached_generation("lumber_split", payload, produce)["index"])

    def summarize_cluster(self, texts: Sequence[str]) -> str:
        """Summary of a cluster's member texts, <= 256 tokens."""
        if not texts:
            raise ValueError("summarize_cluster requires at least one text")
        generator = self._require_generator()

        def produce() -> dict:
            return {
                "model": self.gen_model,
                "text": _truncate_tokens(generator.summary(texts), SUMMARY_TOKEN_CAP),
            }

        return self._cached_generation("summary", list(texts), produce)["text"]


def build_provider_service(
    embed_config: ProviderConfig,
    gen_config: ProviderConfig | None = None,
    transport: Transport | None = None,
) -> ProviderService:
    """Wire a ProviderService from embedding and generation configs."""
    if embed_config.kind == "mock":
        embedder: MockEmbedder | RemoteEmbedder = MockEmbedder(embed_config.dim, embed_config.seed)
    else:
        embedder = RemoteEmbedder(embed_config, transport)

    generator: MockGenerator | RemoteGenerator | None = None
    if gen_config is not None:
        if gen_config.kind == "mock":
            generator = MockGenerator(gen_config.seed)
        else:
            generator = RemoteGenerator(gen_config, transport)

    cache_dir = embed_config.cache_dir
    cache = DiskCache(cache_dir) if cache_dir else None
    return ProviderService(
        embedder,
        generator,
        cache,
        embed_model=embed_config.model_name,
        gen_model=gen_config.model_name if gen_config else "none",
        batch_size=embed_config.batch_size,
    )
