"""Corpus ingestion and rule-based sentence splitting."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

logger = logging.getLogger(__name__)

CorpusFormat = Literal["jsonl", "plain-dir"]

DEFAULT_ABBREVIATIONS: tuple[str, ...] = (
    "Mr.", "Mrs.", "Dr.", "St.", "No.", "Fig.", "e.g.", "i.e.", "et al.",
)

TERMINATORS = ".!?。！？"
_CLOSERS = "\"'”’)]"
_OPENERS = "\"'“‘([«"

# terminator run, optional closing quotes/brackets, then the whitespace gap
_TERMINAL_RE = re.compile(rf"[{re.escape(TERMINATORS)}]+[{re.escape(_CLOSERS)}]*(?=\s)")
_BLANK_LINE_RE = re.compile(r"\n[^\S\n]*\n")


class CorpusError(Exception):
    """Raised when a corpus cannot be read or parsed."""


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Sentence:
    doc_id: str
    index: int
    text: str
    span: tuple[int, int]


def _unique_id(candidate: str, seen: set[str]) -> str:
    if candidate not in seen:
        return candidate
    n = 1
    while f"{candidate}-{n}" in seen:
        n += 1
    return f"{candidate}-{n}"


def _read_utf8(path: Path) -> str:
    try:
        return path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorpusError(f"{path}: not valid UTF-8 ({e.reason} at byte {e.start})") from e
    except OSError as e:
        raise CorpusError(f"{path}: unreadable ({e.strerror})") from e


def _load_jsonl(path: Path) -> Iterable[tuple[str, str, dict[str, str]]]:
    for lineno, line in enumerate(_read_utf8(path).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
        if not isinstance(record, dict):
            raise CorpusError(f"{path}:{lineno}: expected a JSON object")
        doc_id, text = record.get("id"), record.get("text")
        if not isinstance(doc_id, str) or not doc_id:
            raise CorpusError(f"{path}:{lineno}: field 'id' must be a nonempty string")
        if not isinstance(text, str):
            raise CorpusError(f"{path}:{lineno}: field 'text' must be a string")
        meta = record.get("meta") or {}
        if not isinstance(meta, dict):
            raise CorpusError(f"{path}:{lineno}: field 'meta' must be an object")
        yield doc_id, text, {str(k): str(v) for k, v in meta.items()}


def _load_plain_dir(path: Path) -> Iterable[tuple[str, str, dict[str, str]]]:
    for file in sorted(path.glob("*.txt")):
        yield file.stem, _read_utf8(file), {"source": str(file), "title": file.stem}


def ingest_corpus(path: str | Path, format: CorpusFormat) -> list[Document]:
    """Load documents from a JSONL file or a directory of ``.txt`` files.

    Colliding ids are suffixed ``-1``, ``-2``, ... in encounter order.

    Raises:
        CorpusError: unreadable path, malformed JSON line (with line number),
            or non-UTF-8 content.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"{path}: no such file or directory")
    if format == "jsonl":
        if not path.is_file():
            raise CorpusError(f"{path}: expected a JSONL file")
        records = _load_jsonl(path)
    elif format == "plain-dir":
        if not path.is_dir():
            raise CorpusError(f"{path}: expected a directory")
        records = _load_plain_dir(path)
    else:
        raise CorpusError(f"unknown corpus format {format!r}")

    docs: list[Document] = []
    seen: set[str] = set()
    for doc_id, text, meta in records:
        uid = _unique_id(doc_id, seen)
        if uid != doc_id:
            logger.warning("duplicate document id %r renamed to %r", doc_id, uid)
        seen.add(uid)
        docs.append(Document(id=uid, text=text, metadata=meta))
    return docs


def _ends_with_abbreviation(text: str, end: int, abbreviations: Iterable[str]) -> bool:
    head = text[:end].lower()
    for abbr in abbreviations:
        a = abbr.lower()
        if head.endswith(a):
            start = end - len(a)
            if start == 0 or not text[start - 1].isalnum():
                return True
    return False


def _starts_sentence(ch: str) -> bool:
    return ch.isupper() or ch.isdigit() or ch in _OPENERS


def _boundaries(text: str, abbreviations: tuple[str, ...]) -> list[int]:
    cuts: set[int] = set()

    for m in _TERMINAL_RE.finditer(text):
        rest = text[m.end():].lstrip()
        if not rest or not _starts_sentence(rest[0]):
            continue
        run = m.group(0).rstrip(_CLOSERS)
        if run == "." and _ends_with_abbreviation(text, m.start() + 1, abbreviations):
            continue
        cuts.add(m.end())

    for m in _BLANK_LINE_RE.finditer(text):
        cuts.add(m.start())

    # a line without terminal punctuation (heading, list item) stands alone
    pos = 0
    for line in text.split("\n"):
        end = pos + len(line)
        stripped = line.rstrip().rstrip(_CLOSERS)
        if stripped.strip() and stripped[-1] not in TERMINATORS:
            cuts.update((pos, end))
        pos = end + 1

    return sorted(cuts)


def split_sentences(
    doc: Document, abbreviations: tuple[str, ...] = DEFAULT_ABBREVIATIONS
) -> list[Sentence]:
    """Split a document into trimmed sentences with character spans into ``doc.text``."""
    text = doc.text
    sentences: list[Sentence] = []
    prev = 0
    for cut in [*_boundaries(text, abbreviations), len(text)]:
        segment = text[prev:cut]
        lead = len(segment) - len(segment.lstrip())
        body = segment.strip()
        if body:
            start = prev + lead
            sentences.append(
                Sentence(doc.id, len(sentences), body, (start, start + len(body)))
            )
        prev = cut
    return sentences
