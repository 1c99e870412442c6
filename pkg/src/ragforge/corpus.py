"""Corpus loading, cleaning and canonical serialization.

Input is pre-extracted text in a line-delimited JSON format (one document
per line; fields ``doc_id``, ``title``, ``body``, ``metadata``,
``user_id``). Cleaning strips control characters, removes repeated
header/footer lines and collapses whitespace; documents that end up empty
or under a small token floor are excluded from the output stream.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

from ragforge.records import dump_json_line

PUBLIC_LIBRARY = "public"

# Documents with fewer tokens than this after cleaning count as near-empty
# and are discarded.
NEAR_EMPTY_TOKENS = 20

# A line is treated as a header/footer artifact when it is short and its
# exact (stripped) text repeats at least this many times in the document.
HEADER_MIN_REPEATS = 3
HEADER_MAX_CHARS = 80

_CONTROL_RE = re.compile(r"[\x00-\x08\x0b\x0c\x0e-\x1f\x7f]")
_WS_RE = re.compile(r"\s+")
_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class CorpusError(Exception):
    """Fatal corpus problem (unreadable file, bad format version)."""


class RecordError(CorpusError):
    """A single malformed record, with its 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number
        self.message = message


@dataclass
class Document:
    """One source document. ``library`` is ``"public"`` or a user id."""

    doc_id: str
    body: str
    title: str = ""
    metadata: dict[str, str] = field(default_factory=dict)
    library: str = PUBLIC_LIBRARY


@dataclass
class CleaningReport:
    doc_id: str
    removed_segments: int = 0
    empty_after_cleaning: bool = False


def _parse_record(obj: Any, default_library: str) -> Document:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    if "doc_id" not in obj or not str(obj["doc_id"]).strip():
        raise ValueError("missing doc_id")
    if "body" not in obj or not isinstance(obj["body"], str):
        raise ValueError("missing body")
    metadata = obj.get("metadata", {})
    if metadata is None:
        metadata = {}
    if not isinstance(metadata, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in metadata.items()
    ):
        raise ValueError("metadata must be a flat string-to-string map")
    user_id = obj.get("user_id", "")
    if user_id is not None and not isinstance(user_id, str):
        raise ValueError("user_id must be a string")
    library = user_id if user_id else default_library
    if not library:
        raise ValueError("empty library tag")
    return Document(
        doc_id=str(obj["doc_id"]),
        body=obj["body"],
        title=str(obj.get("title", "") or ""),
        metadata=dict(metadata),
        library=library,
    )


def load_corpus(
    path: str | Path,
    library: str = PUBLIC_LIBRARY,
    on_record_error: Callable[[RecordError], None] | None = None,
) -> Iterator[Document]:
    """Yield one :class:`Document` per valid record, in file order.

    Malformed records raise :class:`RecordError` naming the line, unless
    ``on_record_error`` is given, in which case the error is reported
    through it and loading continues. Duplicate ``doc_id`` values count
    as malformed. An unreadable file is fatal either way.
    """
    path = Path(path)
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc

    def report(err: RecordError) -> None:
        if on_record_error is None:
            raise err
        on_record_error(err)

    seen: set[str] = set()
    with handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                report(RecordError(line_number, f"invalid JSON ({exc.msg})"))
                continue
            try:
                doc = _parse_record(obj, library)
            except ValueError as exc:
                report(RecordError(line_number, str(exc)))
                continue
            if doc.doc_id in seen:
                report(RecordError(line_number, f"duplicate doc_id {doc.doc_id!r}"))
                continue
            seen.add(doc.doc_id)
            yield doc


def document_to_json(doc: Document) -> str:
    """Canonical single-line serialization.

    Field order is fixed (doc_id, title, body, metadata, user_id) and
    empty optional fields are omitted, so loading a file written by
    :func:`write_corpus` and re-serializing reproduces it byte for byte.
    """
    obj: dict[str, Any] = {"doc_id": doc.doc_id}
    if doc.title:
        obj["title"] = doc.title
    obj["body"] = doc.body
    if doc.metadata:
        obj["metadata"] = doc.metadata
    if doc.library != PUBLIC_LIBRARY:
        obj["user_id"] = doc.library
    return dump_json_line(obj)


def write_corpus(path: str | Path, docs: Iterable[Document]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(document_to_json(doc))
            f.write("\n")
            n += 1
    return n


def count_words(text: str) -> int:
    return len(_TOKEN_RE.findall(text))


def clean_text(raw: str, doc_id: str = "") -> tuple[str, CleaningReport]:
    """Normalize raw document text.

    Removes control characters, drops every occurrence of short lines
    (<= 80 chars) whose exact stripped text repeats >= 3 times (page
    header/footer artifacts), and collapses whitespace runs to single
    spaces. Total: never raises. Idempotent.
    """
    report = CleaningReport(doc_id=doc_id)
    text = _CONTROL_RE.sub(" ", raw)

    lines = text.split("\n")
    counts = Counter(
        line.strip()
        for line in lines
        if line.strip() and len(line.strip()) <= HEADER_MAX_CHARS
    )
    repeated = {s for s, c in counts.items() if c >= HEADER_MIN_REPEATS}
    if repeated:
        kept_lines = []
        for line in lines:
            if line.strip() in repeated:
                report.removed_segments += 1
            else:
                kept_lines.append(line)
        lines = kept_lines

    cleaned = _WS_RE.sub(" ", "\n".join(lines)).strip()
    report.empty_after_cleaning = not cleaned
    return cleaned, report


def clean_document(
    doc: Document, min_tokens: int = NEAR_EMPTY_TOKENS
) -> tuple[Document | None, CleaningReport]:
    """Clean a document's body; returns ``(None, report)`` if discarded.

    A body that is empty or under ``min_tokens`` tokens after cleaning is
    discarded; the report's ``empty_after_cleaning`` flag marks the
    exclusion in both cases.
    """
    cleaned, report = clean_text(doc.body, doc_id=doc.doc_id)
    if not cleaned or count_words(cleaned) < min_tokens:
        report.empty_after_cleaning = True
        return None, report
    return (
        Document(
            doc_id=doc.doc_id,
            body=cleaned,
            title=doc.title,
            metadata=doc.metadata,
            library=doc.library,
        ),
        report,
    )


def clean_corpus(
    docs: Iterable[Document], min_tokens: int = NEAR_EMPTY_TOKENS
) -> Iterator[tuple[Document | None, CleaningReport]]:
    """Clean a document stream; excluded documents yield ``(None, report)``."""
    for doc in docs:
        yield clean_document(doc, min_tokens=min_tokens)
