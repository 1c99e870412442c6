"""Sentence-aware recursive text segmentation.

Text is split losslessly into sentences, adjacent sentence pairs are
scored once per document by a next-sentence-prediction scorer, and
over-budget spans are cut recursively at the boundary with the lowest
normalized continuation score. Single sentences that alone exceed the
token budget pass through as flagged oversized chunks rather than being
cut mid-sentence.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Sequence

from ragforge.clients.base import ModelClient, sigmoid

LABEL_CONTINUE = "Continue"
LABEL_BREAK = "Break"

DEFAULT_MAX_TOKENS = 512
MIN_MAX_TOKENS = 16

# Hand-curated abbreviation list: a single period after one of these
# (case-insensitive, compared without the final period) never ends a
# sentence. Single capital letters are deliberately absent so initials
# like "A." still split.
ABBREVIATIONS = frozenset(
    {
        "dr", "mr", "mrs", "ms", "prof", "rev", "gen", "sgt", "capt",
        "sr", "jr", "st",
        "vs", "etc", "e.g", "i.e", "cf", "al", "ca",
        "fig", "eq", "eqs", "sec", "ch", "pp", "vol", "approx", "dept",
        "inc", "ltd", "co", "corp",
        "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept",
        "oct", "nov", "dec",
        "u.s", "u.k", "a.m", "p.m", "ph.d",
    }
)

# Terminator run, optional closing quotes/brackets, then the separator
# (whitespace or end of text) that gets attached to the left sentence.
_BOUNDARY_RE = re.compile(r"([.!?]+)([\"')\]]*)(\s+|$)")
_PRECEDING_WORD_RE = re.compile(r"([\w.]+)$", re.UNICODE)

_WORDPUNCT_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

Tokenizer = Callable[[str], list[str]]


def _wordpunct(text: str) -> list[str]:
    return _WORDPUNCT_RE.findall(text)


_TOKENIZERS: dict[str, Tokenizer] = {"wordpunct": _wordpunct}


def register_tokenizer(name: str, fn: Tokenizer) -> None:
    _TOKENIZERS[name] = fn


def get_tokenizer(name: str = "wordpunct") -> Tokenizer:
    try:
        return _TOKENIZERS[name]
    except KeyError:
        raise KeyError(f"unknown tokenizer {name!r}; registered: {sorted(_TOKENIZERS)}")


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    """Token count under ``tokenizer`` (default: word-or-punctuation regex)."""
    return len((tokenizer or _wordpunct)(text))


@dataclass
class Sentence:
    """One sentence, carrying its trailing separator.

    ``text`` includes any whitespace up to the next sentence, so the
    plain concatenation of a document's sentences reproduces the input
    byte for byte.
    """

    index: int
    text: str
    token_count: int


@dataclass
class BoundaryScore:
    """Continuation score for the boundary between sentence i and i+1."""

    boundary_index: int
    raw_logit: float
    normalized: float
    predicted_label: str

    @property
    def continue_probability(self) -> float:
        return sigmoid(self.raw_logit)


@dataclass
class Chunk:
    """Contiguous sentence span of one document."""

    chunk_id: str
    doc_id: str
    sentence_start: int
    sentence_end: int
    text: str
    token_count: int
    ordinal: int
    oversized: bool = False

    @property
    def sentence_range(self) -> tuple[int, int]:
        return (self.sentence_start, self.sentence_end)


class BoundaryScoringError(RuntimeError):
    """Scorer failure during a boundary pass; retriable."""

    def __init__(self, boundary_index: int, message: str):
        super().__init__(f"boundary {boundary_index}: {message}")
        self.boundary_index = boundary_index
        self.retriable = True


def make_chunk_id(doc_id: str, ordinal: int) -> str:
    """Stable chunk identifier: ``{doc_id}#{ordinal:04d}``."""
    return f"{doc_id}#{ordinal:04d}"


def split_sentences(text: str, tokenizer: Tokenizer | None = None) -> list[Sentence]:
    """Split text into sentences without losing a byte.

    Boundaries are runs of ``.!?`` (plus closing quotes/brackets)
    followed by whitespace or end of text. A boundary is vetoed when the
    run is a single period preceded by a known abbreviation, or when the
    next non-space character is lowercase or a digit (mid-sentence
    period). The trailing separator stays attached to the left sentence.
    """
    if not text:
        return []
    tok = tokenizer or _wordpunct
    cuts: list[int] = []
    for m in _BOUNDARY_RE.finditer(text):
        end = m.end()
        if end < len(text):
            nxt = text[end]
            if nxt.islower() or nxt.isdigit():
                continue
        if m.group(1) == ".":
            prev = _PRECEDING_WORD_RE.search(text, 0, m.start())
            if prev:
                word = prev.group(1).strip(".").lower()
                if word in ABBREVIATIONS:
                    continue
        if end < len(text):
            cuts.append(end)
    starts = [0] + cuts
    ends = cuts + [len(text)]
    return [
        Sentence(index=i, text=text[s:e], token_count=len(tok(text[s:e])))
        for i, (s, e) in enumerate(zip(starts, ends))
    ]


def score_boundaries(
    sentences: Sequence[Sentence], scorer: ModelClient
) -> list[BoundaryScore]:
    """Score every adjacent sentence pair in one pass.

    Raw logits are min-max normalized over the whole pass (all-equal
    logits map to 0.5); the label is Continue iff the continuation
    probability is at least 0.5, i.e. the raw logit is non-negative.
    """
    if len(sentences) < 2:
        raise ValueError("score_boundaries requires at least 2 sentences")
    pairs = [
        (sentences[i].text.strip(), sentences[i + 1].text.strip())
        for i in range(len(sentences) - 1)
    ]
    logits: list[float] = []
    step = max(1, scorer.config.max_batch_size)
    for start in range(0, len(pairs), step):
        try:
            batch = scorer.nsp_batch(pairs[start : start + step])
        except Exception as exc:
            raise BoundaryScoringError(start, str(exc)) from exc
        if len(batch) != len(pairs[start : start + step]):
            raise BoundaryScoringError(start, "scorer returned wrong logit count")
        logits.extend(float(x) for x in batch)

    lo, hi = min(logits), max(logits)
    if hi > lo:
        normalized = [(x - lo) / (hi - lo) for x in logits]
    else:
        normalized = [0.5] * len(logits)
    return [
        BoundaryScore(
            boundary_index=i,
            raw_logit=logits[i],
            normalized=normalized[i],
            predicted_label=LABEL_CONTINUE if logits[i] >= 0.0 else LABEL_BREAK,
        )
        for i in range(len(logits))
    ]


def segment(
    text: str,
    scorer: ModelClient,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    tokenizer: Tokenizer | None = None,
    doc_id: str = "doc",
) -> list[Chunk]:
    """Segment text into chunks of at most ``max_tokens`` tokens.

    Boundaries are scored once for the whole document; an over-budget
    span is cut at its interior boundary with the lowest normalized
    continuation score (ties go to the lowest boundary index), then both
    halves are segmented recursively. A single sentence that exceeds the
    budget on its own becomes one chunk with ``oversized=True``.
    """
    if max_tokens < MIN_MAX_TOKENS:
        raise ValueError(f"max_tokens must be >= {MIN_MAX_TOKENS}")
    if not text:
        return []
    tok = tokenizer or _wordpunct
    sentences = split_sentences(text, tokenizer=tok)
    counts = [s.token_count for s in sentences]
    total = sum(counts)

    scores: list[BoundaryScore] | None = None
    if total > max_tokens and len(sentences) > 1:
        scores = score_boundaries(sentences, scorer)

    spans: list[tuple[int, int]] = []

    def cut(start: int, end: int) -> None:
        tokens = sum(counts[start:end])
        if tokens <= max_tokens or end - start == 1:
            spans.append((start, end))
            return
        assert scores is not None
        best = min(
            range(start, end - 1), key=lambda i: (scores[i].normalized, i)
        )
        cut(start, best + 1)
        cut(best + 1, end)

    cut(0, len(sentences))

    chunks: list[Chunk] = []
    for ordinal, (start, end) in enumerate(spans):
        body = "".join(s.text for s in sentences[start:end])
        tokens = sum(counts[start:end])
        chunks.append(
            Chunk(
                chunk_id=make_chunk_id(doc_id, ordinal),
                doc_id=doc_id,
                sentence_start=start,
                sentence_end=end,
                text=body,
                token_count=tokens,
                ordinal=ordinal,
                oversized=tokens > max_tokens,
            )
        )
    return chunks
