"""Retrieval and answer-quality evaluation.

Metrics: top-k recall of gold chunks over ranked retrieval results,
per-question-type coverage (how many questions retrieve anything above
the threshold), and answer recall (fraction of reference statements
present in the generated answer, per the judge). Reports embed published
reference values as rows tagged "paper-reported"; those require the full
fine-tuned system and are never compared against locally computed
numbers.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from ragforge.clients.base import JudgeKind, ModelClient, QUERY_SIDE
from ragforge.pipeline import PipelineConfig, answer_query
from ragforge.records import read_jsonl
from ragforge.vectorstore import Collection


class QAType:
    SINGLE_SIMPLE = "single_simple"
    SINGLE_INFERENCE = "single_inference"
    MULTI_DOC = "multi_doc"
    CONDITIONAL = "conditional"

    ALL = (SINGLE_SIMPLE, SINGLE_INFERENCE, MULTI_DOC, CONDITIONAL)


DISPLAY_NAMES = {
    QAType.SINGLE_SIMPLE: "Single-document Simple QA",
    QAType.SINGLE_INFERENCE: "Single-document Inference QA",
    QAType.MULTI_DOC: "Multi-document QA",
    QAType.CONDITIONAL: "Conditional QA",
}

DEFAULT_KS = (1, 3, 5, 8, 32, 64)

REFERENCE_TAG = "paper-reported"

# Published full-system results; reference display only.
REFERENCE_LINES: tuple[dict[str, Any], ...] = (
    {
        "metric": "coverage_total",
        "answered": 927,
        "total": 938,
        "ratio": 0.988,
        "source": REFERENCE_TAG,
    },
    {
        "metric": "recall_at_k",
        "values": {"1": 0.908, "3": 0.945, "5": 0.95, "8": 0.959, "32": 0.966, "64": 0.969},
        "source": REFERENCE_TAG,
    },
    {
        "metric": "answer_recall",
        "with_retrieval": 0.666,
        "without_retrieval": 0.529,
        "source": REFERENCE_TAG,
    },
)


class EvalError(Exception):
    """Evaluation input or report failure."""


@dataclass
class EvalItem:
    """One evaluation question with its gold grounding."""

    question: str
    reference_answer: str
    reference_statements: list[str]
    gold_chunk_ids: list[str] = field(default_factory=list)
    gold_doc_ids: list[str] = field(default_factory=list)
    qa_type: str = QAType.SINGLE_SIMPLE

    def validate(self) -> None:
        if not self.question:
            raise EvalError("item has an empty question")
        if not self.reference_statements:
            raise EvalError(f"item {self.question!r} has no reference statements")
        if self.qa_type not in QAType.ALL:
            raise EvalError(f"item {self.question!r} has unknown qa_type {self.qa_type!r}")

    def has_gold(self) -> bool:
        return bool(self.gold_chunk_ids or self.gold_doc_ids)


@dataclass
class EvalSet:
    """Loaded evaluation items plus the questions excluded for empty gold."""

    items: list[EvalItem]
    excluded: list[str] = field(default_factory=list)


def load_eval_set(path: str | Path) -> EvalSet:
    """Read the line-delimited JSON interchange format.

    Fields per record: question, reference_answer, reference_statements,
    gold_chunk_ids and/or gold_doc_ids, qa_type. Records without any gold
    are excluded from scoring and reported by question text.
    """
    items: list[EvalItem] = []
    excluded: list[str] = []
    for record in read_jsonl(path):
        item = EvalItem(
            question=str(record.get("question", "")),
            reference_answer=str(record.get("reference_answer", "")),
            reference_statements=[str(s) for s in record.get("reference_statements", [])],
            gold_chunk_ids=[str(c) for c in record.get("gold_chunk_ids", [])],
            gold_doc_ids=[str(d) for d in record.get("gold_doc_ids", [])],
            qa_type=str(record.get("qa_type", QAType.SINGLE_SIMPLE)),
        )
        item.validate()
        if not item.has_gold():
            excluded.append(item.question)
            continue
        items.append(item)
    return EvalSet(items=items, excluded=excluded)


def resolve_gold(item: EvalItem, store: Collection) -> set[str]:
    """Gold chunk ids, expanding doc-level gold to every chunk of the doc.

    Doc-level expansion relies on the ``{doc_id}#{ordinal}`` chunk id
    convention used at ingest.
    """
    gold = set(item.gold_chunk_ids)
    if item.gold_doc_ids:
        wanted = set(item.gold_doc_ids)
        for rec in store.iter_records():
            doc_id = rec.chunk_id.rsplit("#", 1)[0]
            if doc_id in wanted:
                gold.add(rec.chunk_id)
    return gold


def recall_at_k(
    ranked_ids: Sequence[Sequence[str]],
    gold_sets: Sequence[set[str]],
    ks: Sequence[int] = DEFAULT_KS,
) -> dict[int, float]:
    """Fraction of items whose top-k ranked ids intersect their gold set."""
    if len(ranked_ids) != len(gold_sets):
        raise EvalError("ranked_ids and gold_sets must align")
    if not ranked_ids:
        raise EvalError("no items to score")
    for i, gold in enumerate(gold_sets):
        if not gold:
            raise EvalError(f"item {i} has empty gold; exclude it before scoring")
    out: dict[int, float] = {}
    for k in ks:
        if k < 1:
            raise EvalError("k must be >= 1")
        hits = sum(
            1 for ids, gold in zip(ranked_ids, gold_sets) if set(ids[:k]) & gold
        )
        out[k] = hits / len(ranked_ids)
    return out


@dataclass
class CoverageRow:
    answered: int
    total: int
    mean_score: float | None

    @property
    def ratio(self) -> float:
        return self.answered / self.total if self.total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "answered": self.answered,
            "total": self.total,
            "ratio": self.ratio,
            "mean_score": self.mean_score,
        }


def coverage(
    qa_types: Sequence[str], top_scores: Sequence[float | None]
) -> dict[str, CoverageRow]:
    """Per-type coverage from each item's best retrieval score.

    ``top_scores[i]`` is the item's best threshold-passing similarity, or
    None when nothing was retrieved. The mean-score column averages over
    retrieved items only. The "total" row sums the type rows.
    """
    if len(qa_types) != len(top_scores):
        raise EvalError("qa_types and top_scores must align")
    rows: dict[str, CoverageRow] = {}
    for qa_type in QAType.ALL:
        idx = [i for i, t in enumerate(qa_types) if t == qa_type]
        scores = [top_scores[i] for i in idx if top_scores[i] is not None]
        rows[qa_type] = CoverageRow(
            answered=len(scores),
            total=len(idx),
            mean_score=(sum(scores) / len(scores)) if scores else None,
        )
    all_scores = [s for s in top_scores if s is not None]
    rows["total"] = CoverageRow(
        answered=sum(rows[t].answered for t in QAType.ALL),
        total=sum(rows[t].total for t in QAType.ALL),
        mean_score=(sum(all_scores) / len(all_scores)) if all_scores else None,
    )
    return rows


_NORM_RE = re.compile(r"\s+")


def _normalize_statement(text: str) -> str:
    return _NORM_RE.sub(" ", text.casefold()).strip()


@dataclass
class AnswerRecallResult:
    value: float
    present: int
    total: int
    flagged: list[str] = field(default_factory=list)


def answer_recall(
    generated_answer: str,
    reference_statements: Sequence[str],
    judge: ModelClient,
) -> AnswerRecallResult:
    """Fraction of deduplicated reference statements present in the answer.

    A judge failure counts the statement as absent and flags it.
    """
    if not reference_statements:
        raise EvalError("answer_recall needs at least one reference statement")
    seen: set[str] = set()
    statements: list[str] = []
    for s in reference_statements:
        key = _normalize_statement(s)
        if key and key not in seen:
            seen.add(key)
            statements.append(s)
    if not statements:
        raise EvalError("all reference statements are empty")
    present = 0
    flagged: list[str] = []
    for statement in statements:
        try:
            hit = bool(
                judge.judge(
                    JudgeKind.STATEMENT_PRESENCE,
                    {"statement": statement, "answer": generated_answer},
                )
            )
        except Exception:
            flagged.append(statement)
            continue
        if hit:
            present += 1
    return AnswerRecallResult(
        value=present / len(statements),
        present=present,
        total=len(statements),
        flagged=flagged,
    )


@dataclass
class EvalReport:
    """Full evaluation result, serializable to the report schema."""

    coverage: dict[str, CoverageRow]
    recall: dict[int, float]
    answer_recall_value: float
    answer_recall_flagged: int
    config: dict[str, Any]
    excluded_items: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": 1,
            "config": self.config,
            "coverage": {name: row.to_dict() for name, row in self.coverage.items()},
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "answer_recall": {
                "value": self.answer_recall_value,
                "flagged": self.answer_recall_flagged,
            },
            "excluded_items": self.excluded_items,
            "reference": [dict(line) for line in REFERENCE_LINES],
        }


REPORT_SCHEMA: dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": [
        "schema_version",
        "config",
        "coverage",
        "recall",
        "answer_recall",
        "excluded_items",
        "reference",
    ],
    "properties": {
        "schema_version": {"const": 1},
        "config": {"type": "object"},
        "coverage": {
            "type": "object",
            "required": list(QAType.ALL) + ["total"],
            "additionalProperties": {
                "type": "object",
                "required": ["answered", "total", "ratio", "mean_score"],
                "properties": {
                    "answered": {"type": "integer", "minimum": 0},
                    "total": {"type": "integer", "minimum": 0},
                    "ratio": {"type": "number", "minimum": 0, "maximum": 1},
                    "mean_score": {"type": ["number", "null"]},
                },
            },
        },
        "recall": {
            "type": "object",
            "patternProperties": {
                "^[0-9]+$": {"type": "number", "minimum": 0, "maximum": 1}
            },
            "additionalProperties": False,
        },
        "answer_recall": {
            "type": "object",
            "required": ["value", "flagged"],
            "properties": {
                "value": {"type": "number", "minimum": 0, "maximum": 1},
                "flagged": {"type": "integer", "minimum": 0},
            },
        },
        "excluded_items": {"type": "integer", "minimum": 0},
        "reference": {"type": "array", "items": {"type": "object"}},
    },
}


def evaluate(
    eval_set: EvalSet,
    store: Collection,
    client: ModelClient,
    config: PipelineConfig | None = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> EvalReport:
    """Run retrieval + pipeline + judging over an eval set."""
    config = config or PipelineConfig()
    config.validate()
    if not eval_set.items:
        raise EvalError("eval set has no scorable items")
    max_k = max(ks)

    ranked_ids: list[list[str]] = []
    gold_sets: list[set[str]] = []
    qa_types: list[str] = []
    top_scores: list[float | None] = []
    recall_values: list[float] = []
    flagged_total = 0

    for item in eval_set.items:
        gold = resolve_gold(item, store)
        if not gold:
            raise EvalError(
                f"gold for {item.question!r} resolves to no stored chunks"
            )
        qvec = client.embed(
            [item.question], side=QUERY_SIDE, instruction=config.instruction
        )[0]
        scope = list(config.scope) if config.scope is not None else None
        ranked = store.search(qvec.values, top_n=max_k, score_threshold=None, scope=scope)
        ranked_ids.append([r.chunk_id for r in ranked])
        gold_sets.append(gold)
        qa_types.append(item.qa_type)

        passing = [r.similarity for r in ranked if r.similarity >= config.score_threshold]
        top_scores.append(max(passing) if passing else None)

        answer = answer_query(item.question, config, store, client)
        result = answer_recall(answer.text, item.reference_statements, client)
        recall_values.append(result.value)
        flagged_total += len(result.flagged)

    return EvalReport(
        coverage=coverage(qa_types, top_scores),
        recall=recall_at_k(ranked_ids, gold_sets, ks),
        answer_recall_value=sum(recall_values) / len(recall_values),
        answer_recall_flagged=flagged_total,
        config={
            "retrieve_n": config.retrieve_n,
            "top_k": config.top_k,
            "score_threshold": config.score_threshold,
            "scope": list(config.scope) if config.scope is not None else None,
            "ks": [int(k) for k in ks],
        },
        excluded_items=len(eval_set.excluded),
    )


def _check_monotone(recall: dict[int, float]) -> None:
    ks = sorted(recall)
    for a, b in zip(ks, ks[1:]):
        if recall[b] < recall[a] - 1e-12:
            raise EvalError(
                f"recall@{b}={recall[b]} < recall@{a}={recall[a]}; "
                "ranked-result truncation is broken"
            )


def render_markdown(report: EvalReport) -> str:
    """Human-readable tables mirroring the report JSON."""
    lines: list[str] = []
    lines.append("# Evaluation report")
    lines.append("")
    lines.append("## Coverage")
    lines.append("")
    lines.append("| QA type | Retrieved / All | Ratio | Mean score |")
    lines.append("|---|---|---|---|")
    for qa_type in QAType.ALL:
        row = report.coverage[qa_type]
        mean = f"{row.mean_score:.3f}" if row.mean_score is not None else "-"
        lines.append(
            f"| {DISPLAY_NAMES[qa_type]} | {row.answered}/{row.total} "
            f"| {row.ratio:.3f} | {mean} |"
        )
    total = report.coverage["total"]
    mean = f"{total.mean_score:.3f}" if total.mean_score is not None else "-"
    lines.append(
        f"| Total | {total.answered}/{total.total} | {total.ratio:.3f} | {mean} |"
    )
    ref_cov = REFERENCE_LINES[0]
    lines.append(
        f"| Total ({REFERENCE_TAG}) | {ref_cov['answered']}/{ref_cov['total']} "
        f"| {ref_cov['ratio']:.3f} | - |"
    )
    lines.append("")
    lines.append("## Recall@k")
    lines.append("")
    ks = sorted(report.recall)
    lines.append("| Run | " + " | ".join(f"Top {k}" for k in ks) + " |")
    lines.append("|---|" + "---|" * len(ks))
    lines.append(
        "| this run | " + " | ".join(f"{report.recall[k]:.3f}" for k in ks) + " |"
    )
    ref_recall = REFERENCE_LINES[1]["values"]
    lines.append(
        f"| {REFERENCE_TAG} | "
        + " | ".join(
            f"{ref_recall[str(k)]:.3f}" if str(k) in ref_recall else "-" for k in ks
        )
        + " |"
    )
    lines.append("")
    lines.append("## Answer recall")
    lines.append("")
    lines.append("| Run | Answer recall |")
    lines.append("|---|---|")
    lines.append(f"| this run | {report.answer_recall_value:.3f} |")
    ref_ar = REFERENCE_LINES[2]
    lines.append(f"| with retrieval ({REFERENCE_TAG}) | {ref_ar['with_retrieval']:.3f} |")
    lines.append(
        f"| without retrieval ({REFERENCE_TAG}) | {ref_ar['without_retrieval']:.3f} |"
    )
    lines.append("")
    return "\n".join(lines)


def emit_report(
    report: EvalReport,
    out_dir: str | Path,
    formats: Iterable[str] = ("json", "md", "csv", "png"),
) -> dict[str, Path]:
    """Write the report files; gates on recall monotonicity first."""
    _check_monotone(report.recall)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    formats = set(formats)

    if "json" in formats:
        path = out_dir / "report.json"
        path.write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)
            + "\n",
            encoding="utf-8",
        )
        paths["json"] = path
    if "md" in formats:
        path = out_dir / "report.md"
        path.write_text(render_markdown(report), encoding="utf-8")
        paths["md"] = path
    if "csv" in formats:
        path = out_dir / "report.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "key", "value"])
            for qa_type in list(QAType.ALL) + ["total"]:
                row = report.coverage[qa_type]
                writer.writerow(["coverage_answered", qa_type, row.answered])
                writer.writerow(["coverage_total", qa_type, row.total])
                writer.writerow(["coverage_ratio", qa_type, f"{row.ratio:.6f}"])
            for k in sorted(report.recall):
                writer.writerow(["recall", k, f"{report.recall[k]:.6f}"])
            writer.writerow(["answer_recall", "", f"{report.answer_recall_value:.6f}"])
            writer.writerow(["excluded_items", "", report.excluded_items])
        paths["csv"] = path
    if "png" in formats:
        from ragforge.plots import render_recall_curve

        path = out_dir / "recall.png"
        reference = {int(k): v for k, v in REFERENCE_LINES[1]["values"].items()}
        render_recall_curve(report.recall, reference, path)
        paths["png"] = path
    return paths
