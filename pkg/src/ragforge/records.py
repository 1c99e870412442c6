"""Shared record types and line-delimited JSON helpers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

# Canonical answer for questions the retrieved context cannot support.
# Byte-exact: emitted verbatim into synthesized data and chat answers.
REFUSAL_ANSWER = "Sorry. I cannot find the answer based on the context."

TASK_TYPES = ("qa", "rerank", "sts")


@dataclass
class ScoredNegative:
    """A negative document with the weak-retriever score it was mined at."""

    chunk_id: str
    text: str
    weak_score: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_id": self.chunk_id,
            "text": self.text,
            "weak_score": self.weak_score,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScoredNegative":
        return cls(
            chunk_id=str(d["chunk_id"]),
            text=str(d["text"]),
            weak_score=float(d.get("weak_score", 0.0)),
        )


@dataclass
class TrainingPair:
    """Query plus positive document plus scored negatives.

    ``negatives`` may be empty before mining; after mining it holds at
    least the configured minimum. ``task_type`` is one of ``qa``,
    ``rerank`` or ``sts`` and selects the mining sharpness.
    """

    query: str
    positive: str
    positive_id: str = ""
    negatives: list[ScoredNegative] = field(default_factory=list)
    instruction: str = ""
    task_type: str = "qa"
    quality_label: int | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "query": self.query,
            "positive": self.positive,
            "positive_id": self.positive_id,
            "negatives": [n.to_dict() for n in self.negatives],
            "instruction": self.instruction,
            "task_type": self.task_type,
        }
        if self.quality_label is not None:
            d["quality_label"] = self.quality_label
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainingPair":
        return cls(
            query=str(d["query"]),
            positive=str(d["positive"]),
            positive_id=str(d.get("positive_id", "")),
            negatives=[ScoredNegative.from_dict(n) for n in d.get("negatives", [])],
            instruction=str(d.get("instruction", "")),
            task_type=str(d.get("task_type", "qa")),
            quality_label=d.get("quality_label"),
        )


def dump_json_line(obj: dict[str, Any]) -> str:
    """One record as a compact single JSON line (no trailing newline)."""
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> int:
    """Write records as line-delimited JSON; returns the count written."""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(dump_json_line(rec))
            f.write("\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    """Yield one parsed object per non-empty line."""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
