"""Hierarchical statutory corpus model, parsers, and base-unit extraction.

A corpus is an ordered list of sections; each section sits under an optional
book/division/title/subtitle path and contains numbered subsections, which in
turn contain sentences. Sentences are numbered continuously across subsection
boundaries within a section, so the fourth sentence of a two-subsection
section keeps ordinal 4 even when it opens subsection 2.

Section identifiers are normalized to digits plus an optional lowercase
letter suffix ("535", "566a") without any paragraph sign, which is the join
key used by QA gold labels.

Two input formats are supported:

* ``canonical-json`` -- one object ``{"name", "sections": [...]}`` with
  explicit subsections and sentence lists (see :func:`corpus_to_dict` for the
  exact shape; parsing its output is the identity).
* ``plain-statute-text`` -- sections introduced by a ``§ <id>`` line followed
  by a heading line; ``(n)`` at line start opens subsection n. Prose without
  any marker becomes an implicit subsection 1.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator


class CorpusError(ValueError):
    """Base class for corpus parsing and validation failures."""


class ParseError(CorpusError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DuplicateSectionError(CorpusError):
    pass


class EmptyCorpusError(CorpusError):
    pass


SECTION_ID_RE = re.compile(r"^[0-9]+[a-z]*$")

# Tokens that must never be treated as a sentence boundary even when followed
# by whitespace and an uppercase letter. Citation-dense statutory prose is
# full of these. Entries are matched as literal occurrences; a candidate
# period falling inside any occurrence is suppressed.
DEFAULT_ABBREVIATIONS: tuple[str, ...] = (
    "Abs.",
    "Nr.",
    "S.",
    "Satz",
    "z. B.",
    "z.B.",
    "bzw.",
    "ggf.",
    "i. S. d.",
    "i.S.d.",
    "vgl.",
    "§",
    "§§",
)


class Granularity(str, Enum):
    SECTION = "section"
    SUBSECTION = "subsection"
    SENTENCE = "sentence"
    PROPOSITION = "proposition"


@dataclass(frozen=True)
class HierarchyPath:
    """Position of a section in the book/division/title/subtitle tree.

    A deeper level may only be present when all shallower ones are.
    """

    book: str | None = None
    division: str | None = None
    title: str | None = None
    subtitle: str | None = None

    def labels(self) -> list[str]:
        return [x for x in (self.book, self.division, self.title, self.subtitle) if x]

    def validate(self) -> None:
        levels = (self.book, self.division, self.title, self.subtitle)
        names = ("book", "division", "title", "subtitle")
        seen_missing = False
        for name, value in zip(names, levels):
            if value is None:
                seen_missing = True
                continue
            if seen_missing:
                raise CorpusError(f"hierarchy level '{name}' present without its parent levels")
            if not value.strip() or value != value.strip():
                raise CorpusError(f"hierarchy level '{name}' must be non-empty trimmed text")


@dataclass(frozen=True)
class Sentence:
    ordinal_in_section: int
    text: str


@dataclass(frozen=True)
class Subsection:
    ordinal: int
    sentences: tuple[Sentence, ...]


@dataclass(frozen=True)
class Section:
    section_id: str
    heading: str
    hierarchy: HierarchyPath
    subsections: tuple[Subsection, ...]

    def sentences(self) -> Iterator[Sentence]:
        for subsection in self.subsections:
            yield from subsection.sentences


@dataclass(frozen=True)
class Corpus:
    name: str
    sections: tuple[Section, ...]

    def section_ids(self) -> list[str]:
        return [s.section_id for s in self.sections]

    def get(self, section_id: str) -> Section:
        for section in self.sections:
            if section.section_id == section_id:
                return section
        raise KeyError(section_id)

    def section_rank(self) -> dict[str, int]:
        """Document-order rank of each section id, for score tie-breaking."""
        return {s.section_id: i for i, s in enumerate(self.sections)}


@dataclass(frozen=True)
class BaseUnit:
    """One granularity-tagged text span with a single parent section."""

    unit_id: str
    granularity: Granularity
    parent_section_id: str
    text: str


def count_tokens(text: str) -> int:
    """Whitespace-delimited word count, the token measure used throughout."""
    return len(text.split())


def normalize_section_id(raw: str) -> str:
    sid = raw.strip().lstrip("§").strip().lower()
    if not SECTION_ID_RE.match(sid):
        raise CorpusError(f"invalid section id {raw!r} (expected digits plus optional letter suffix)")
    return sid


# ---------------------------------------------------------------------------
# Sentence segmentation
# ---------------------------------------------------------------------------


def _abbreviation_spans(text: str, abbreviations: Iterable[str]) -> list[tuple[int, int]]:
    spans = []
    for abbr in abbreviations:
        start = 0
        while True:
            pos = text.find(abbr, start)
            if pos < 0:
                break
            before = text[pos - 1] if pos > 0 else " "
            if before.isspace() or before in "([":
                spans.append((pos, pos + len(abbr)))
            start = pos + 1
    return spans


def segment_sentences(text: str, abbreviations: Iterable[str] = DEFAULT_ABBREVIATIONS) -> list[str]:
    """Split subsection text into sentences.

    A boundary is a ``.``, ``!`` or ``?`` followed by whitespace and an
    uppercase letter or ``(``. Periods inside known abbreviations and periods
    terminating a single-digit token ("1." in enumerations) never split. Text
    with no boundary comes back as a single sentence; joining the output with
    single spaces reproduces the input modulo whitespace.
    """
    if not text.strip():
        raise CorpusError("cannot segment empty text")
    protected = _abbreviation_spans(text, abbreviations)

    def is_protected(pos: int) -> bool:
        return any(s <= pos < e for s, e in protected)

    starts = [0]
    for match in re.finditer(r"[.!?]\s+", text):
        punct_pos = match.start()
        nxt = text[match.end()] if match.end() < len(text) else ""
        if not (nxt.isupper() or nxt == "("):
            continue
        if text[punct_pos] == ".":
            if is_protected(punct_pos):
                continue
            # single-digit token like "1." never ends a sentence
            if (
                punct_pos >= 1
                and text[punct_pos - 1].isdigit()
                and (punct_pos == 1 or not text[punct_pos - 2].isdigit())
            ):
                continue
        starts.append(match.end())

    pieces = []
    for i, start in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else len(text)
        piece = text[start:end].strip()
        if piece:
            pieces.append(piece)
    return pieces


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def section_body_text(section: Section) -> str:
    """Sentence text of the whole section, without heading or markers."""
    return " ".join(s.text for s in section.sentences())


def section_full_text(section: Section) -> str:
    """Heading line followed by each subsection as ``(n) <sentences>``."""
    lines = [section.heading] if section.heading else []
    for subsection in section.subsections:
        body = " ".join(s.text for s in subsection.sentences)
        lines.append(f"({subsection.ordinal}) {body}")
    return "\n".join(lines)


def render_hierarchy_and_section(section: Section) -> str:
    """Hierarchy labels plus the full section, the context document handed
    to prefix generators."""
    lines = []
    for name, value in (
        ("Book", section.hierarchy.book),
        ("Division", section.hierarchy.division),
        ("Title", section.hierarchy.title),
        ("Subtitle", section.hierarchy.subtitle),
    ):
        if value:
            lines.append(f"{name}: {value}")
    lines.append(f"Section {section.section_id}: {section.heading}")
    lines.append("")
    lines.append(section_full_text(section))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Base-unit extraction
# ---------------------------------------------------------------------------


def extract_units(corpus: Corpus, granularity: Granularity | str) -> list[BaseUnit]:
    """One BaseUnit per section, subsection, or sentence, in corpus order.

    Section units carry heading plus full text; finer units carry the bare
    span text. Proposition units are produced by a generator, not here.
    """
    granularity = Granularity(granularity)
    if granularity is Granularity.PROPOSITION:
        raise ValueError("proposition units are generated, not extracted; see strategies.proposition_units")
    units = []
    for section in corpus.sections:
        sid = section.section_id
        if granularity is Granularity.SECTION:
            units.append(
                BaseUnit(f"{sid}:section", granularity, sid, section_full_text(section))
            )
        elif granularity is Granularity.SUBSECTION:
            for subsection in section.subsections:
                text = " ".join(s.text for s in subsection.sentences)
                units.append(
                    BaseUnit(f"{sid}:subsection:{subsection.ordinal}", granularity, sid, text)
                )
        else:
            for sentence in section.sentences():
                units.append(
                    BaseUnit(
                        f"{sid}:sentence:{sentence.ordinal_in_section}",
                        granularity,
                        sid,
                        sentence.text,
                    )
                )
    return units


# ---------------------------------------------------------------------------
# Construction and validation
# ---------------------------------------------------------------------------


def _build_section(
    section_id: str,
    heading: str,
    hierarchy: HierarchyPath,
    subsection_texts: list[tuple[int, list[str]]],
) -> Section:
    hierarchy.validate()
    subsections = []
    next_ordinal_in_section = 1
    for ordinal, sentence_texts in subsection_texts:
        sentences = []
        for text in sentence_texts:
            if not text.strip():
                raise CorpusError(f"section {section_id}: empty sentence in subsection {ordinal}")
            sentences.append(Sentence(next_ordinal_in_section, text.strip()))
            next_ordinal_in_section += 1
        if not sentences:
            raise CorpusError(f"section {section_id}: subsection {ordinal} has no sentences")
        subsections.append(Subsection(ordinal, tuple(sentences)))
    if not subsections:
        raise CorpusError(f"section {section_id} has no subsections")
    ordinals = [ss.ordinal for ss in subsections]
    if ordinals != list(range(1, len(ordinals) + 1)):
        raise CorpusError(f"section {section_id}: subsection ordinals {ordinals} are not 1..n consecutive")
    return Section(section_id, heading, hierarchy, tuple(subsections))


def validate_corpus(corpus: Corpus) -> None:
    """Raise CorpusError if any structural invariant is violated."""
    if not corpus.sections:
        raise EmptyCorpusError("corpus has no sections")
    seen = set()
    for section in corpus.sections:
        if not SECTION_ID_RE.match(section.section_id):
            raise CorpusError(f"invalid section id {section.section_id!r}")
        if section.section_id in seen:
            raise DuplicateSectionError(f"duplicate section id {section.section_id!r}")
        seen.add(section.section_id)
        section.hierarchy.validate()
        ordinals = [ss.ordinal for ss in section.subsections]
        if not ordinals or ordinals != list(range(1, len(ordinals) + 1)):
            raise CorpusError(f"section {section.section_id}: bad subsection ordinals {ordinals}")
        sentence_ordinals = [s.ordinal_in_section for s in section.sentences()]
        if sentence_ordinals != list(range(1, len(sentence_ordinals) + 1)):
            raise CorpusError(
                f"section {section.section_id}: sentence ordinals {sentence_ordinals} not continuous"
            )


# ---------------------------------------------------------------------------
# canonical-json format
# ---------------------------------------------------------------------------


def corpus_to_dict(corpus: Corpus) -> dict:
    return {
        "name": corpus.name,
        "sections": [
            {
                "id": section.section_id,
                "heading": section.heading,
                "hierarchy": {
                    "book": section.hierarchy.book,
                    "division": section.hierarchy.division,
                    "title": section.hierarchy.title,
                    "subtitle": section.hierarchy.subtitle,
                },
                "subsections": [
                    {
                        "ordinal": subsection.ordinal,
                        "sentences": [s.text for s in subsection.sentences],
                    }
                    for subsection in section.subsections
                ],
            }
            for section in corpus.sections
        ],
    }


def corpus_to_json(corpus: Corpus) -> str:
    return json.dumps(corpus_to_dict(corpus), ensure_ascii=False, indent=2)


def _parse_canonical_json(text: str, name: str | None) -> Corpus:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"not valid JSON: {exc}", line=exc.lineno) from exc
    if not isinstance(data, dict) or "sections" not in data:
        raise ParseError("expected a top-level object with a 'sections' list")
    raw_sections = data["sections"]
    if not isinstance(raw_sections, list):
        raise ParseError("'sections' must be a list")
    if not raw_sections:
        raise EmptyCorpusError("corpus document contains no sections")

    sections = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_sections):
        where = f"sections[{i}]"
        if not isinstance(raw, dict) or "id" not in raw:
            raise ParseError(f"{where}: expected an object with an 'id'")
        sid = normalize_section_id(str(raw["id"]))
        if sid in seen:
            raise DuplicateSectionError(f"{where}: duplicate section id {sid!r}")
        seen.add(sid)
        raw_hier = raw.get("hierarchy") or {}
        hierarchy = HierarchyPath(
            book=raw_hier.get("book") or None,
            division=raw_hier.get("division") or None,
            title=raw_hier.get("title") or None,
            subtitle=raw_hier.get("subtitle") or None,
        )
        raw_subs = raw.get("subsections")
        if not isinstance(raw_subs, list) or not raw_subs:
            raise ParseError(f"{where}: 'subsections' must be a non-empty list")
        subsection_texts = []
        for j, raw_sub in enumerate(raw_subs):
            if not isinstance(raw_sub, dict) or "sentences" not in raw_sub:
                raise ParseError(f"{where}.subsections[{j}]: expected an object with 'sentences'")
            ordinal = int(raw_sub.get("ordinal", j + 1))
            sentences = [str(t) for t in raw_sub["sentences"]]
            subsection_texts.append((ordinal, sentences))
        sections.append(_build_section(sid, str(raw.get("heading", "")), hierarchy, subsection_texts))
    return Corpus(name or str(data.get("name", "corpus")), tuple(sections))


# ---------------------------------------------------------------------------
# plain-statute-text format
# ---------------------------------------------------------------------------

_SECTION_HEADER_RE = re.compile(r"^§\s*(\S+)\s*(.*)$")
_SUBSECTION_MARK_RE = re.compile(r"^\((\d+)\)\s*(.*)$")


def _parse_plain_text(
    text: str, name: str | None, abbreviations: Iterable[str] = DEFAULT_ABBREVIATIONS
) -> Corpus:
    sections: list[Section] = []
    seen: set[str] = set()

    current_id: str | None = None
    current_heading = ""
    heading_pending = False
    header_line = 0
    # list of (ordinal, accumulated text lines)
    blocks: list[tuple[int, list[str]]] = []

    def flush() -> None:
        nonlocal current_id
        if current_id is None:
            return
        subsection_texts = []
        for ordinal, lines in blocks:
            joined = " ".join(part for part in lines if part).strip()
            if not joined:
                raise ParseError(
                    f"section {current_id}: subsection ({ordinal}) has no text", line=header_line
                )
            subsection_texts.append((ordinal, segment_sentences(joined, abbreviations)))
        if not subsection_texts:
            raise ParseError(f"section {current_id} has no body text", line=header_line)
        sections.append(_build_section(current_id, current_heading, HierarchyPath(), subsection_texts))
        current_id = None

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if line.startswith("§"):
            match = _SECTION_HEADER_RE.match(line)
            if not match:
                raise ParseError(f"malformed section header {line!r}", line=lineno)
            flush()
            try:
                current_id = normalize_section_id(match.group(1))
            except CorpusError as exc:
                raise ParseError(str(exc), line=lineno) from exc
            if current_id in seen:
                raise DuplicateSectionError(f"duplicate section id {current_id!r} at line {lineno}")
            seen.add(current_id)
            current_heading = match.group(2).strip()
            heading_pending = not current_heading
            header_line = lineno
            blocks = []
            continue
        if current_id is None:
            if line:
                raise ParseError(f"text before first section header: {line!r}", line=lineno)
            continue
        if not line:
            continue
        marker = _SUBSECTION_MARK_RE.match(line)
        if marker:
            heading_pending = False
            blocks.append((int(marker.group(1)), [marker.group(2)]))
            continue
        if heading_pending:
            current_heading = line
            heading_pending = False
            continue
        if not blocks:
            blocks.append((1, [line]))  # unmarked prose: implicit subsection 1
        else:
            blocks[-1][1].append(line)
    flush()

    if not sections:
        raise EmptyCorpusError("corpus document contains no sections")
    return Corpus(name or "corpus", tuple(sections))


def parse_corpus(text: str, fmt: str, name: str | None = None) -> Corpus:
    """Parse a corpus document in ``canonical-json`` or ``plain-statute-text``
    format and validate all structural invariants."""
    if fmt == "canonical-json":
        corpus = _parse_canonical_json(text, name)
    elif fmt == "plain-statute-text":
        corpus = _parse_plain_text(text, name)
    else:
        raise ValueError(f"unknown corpus format {fmt!r}")
    validate_corpus(corpus)
    return corpus


def load_corpus(path: str | Path, fmt: str | None = None) -> Corpus:
    path = Path(path)
    if fmt is None:
        fmt = "canonical-json" if path.suffix == ".json" else "plain-statute-text"
    return parse_corpus(path.read_text(encoding="utf-8"), fmt, name=path.stem)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(corpus_to_json(corpus), encoding="utf-8")
