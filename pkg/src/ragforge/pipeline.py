"""Online answering pipeline.

Five stages, run in order for every request: embed the instructed query,
retrieve candidates from the vector store, rerank them, keep the top-K by
rerank score, then build the prompt and generate. If thresholding leaves
no candidates, the pipeline short-circuits to the refusal answer without
calling the generator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Sequence

from ragforge.clients.base import DEFAULT_INSTRUCTIONS, ModelClient, QUERY_SIDE
from ragforge.records import REFUSAL_ANSWER
from ragforge.vectorstore import Collection, RetrievalResult

DEFAULT_RETRIEVE_N = 32
DEFAULT_TOP_K = 8
DEFAULT_SCORE_THRESHOLD = 0.35

STAGES = ("embed_query", "vector_search", "rerank", "select", "generate")


class PipelineError(RuntimeError):
    """Failure inside one pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Operating point of the answering pipeline."""

    retrieve_n: int = DEFAULT_RETRIEVE_N
    top_k: int = DEFAULT_TOP_K
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    scope: tuple[str, ...] | None = None
    instruction: str = DEFAULT_INSTRUCTIONS["qa"]
    template: str = "default"
    # Off by default: also require rerank normalized score >= this value.
    rerank_threshold: float | None = None

    def validate(self) -> None:
        if self.top_k < 1 or self.top_k > self.retrieve_n:
            raise ValueError("require 1 <= top_k <= retrieve_n")
        if not -1.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [-1, 1]")


@dataclass
class ScoredChunk:
    """Retrieved chunk with both its similarity and rerank scores."""

    chunk_id: str
    text: str
    similarity: float
    partition: str
    payload: dict[str, Any]
    rerank_raw: float = 0.0
    rerank_normalized: float = 0.0


@dataclass
class TraceEvent:
    """One pipeline stage observation."""

    stage: str
    count: int
    elapsed_ms: float

    def to_dict(self) -> dict[str, Any]:
        return {"stage": self.stage, "count": self.count, "elapsed_ms": self.elapsed_ms}


@dataclass
class Answer:
    """Pipeline output for one query."""

    text: str
    citations: list[str]
    retrieved: list[ScoredChunk]
    unanswerable: bool
    trace: list[TraceEvent] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "citations": list(self.citations),
            "unanswerable": self.unanswerable,
            "retrieved": [
                {
                    "chunk_id": c.chunk_id,
                    "similarity": c.similarity,
                    "rerank_raw": c.rerank_raw,
                    "rerank_normalized": c.rerank_normalized,
                    "partition": c.partition,
                }
                for c in self.retrieved
            ],
        }


_NO_CONTEXT_LINE = "No context was retrieved. Reply with the refusal sentence."

_DEFAULT_TEMPLATE = (
    "You are a careful assistant. Answer the question using only the numbered "
    "context passages below. Do not use outside knowledge. If the context does "
    "not contain the answer, reply exactly:\n"
    f"{REFUSAL_ANSWER}\n"
    "\n"
    "[Context]\n"
    "{context}\n"
    "\n"
    "[Question]\n"
    "{query}\n"
    "\n"
    "[Answer]\n"
)

PROMPT_TEMPLATES: dict[str, str] = {"default": _DEFAULT_TEMPLATE}


def build_prompt(
    query: str, chunks: Sequence[ScoredChunk], template: str = "default"
) -> str:
    """Render the generation prompt.

    Every chunk appears exactly once, in the given (rerank) order, as a
    numbered ``[i] text`` line; the query follows the context block. Same
    inputs produce identical bytes.
    """
    try:
        fmt = PROMPT_TEMPLATES[template]
    except KeyError:
        raise KeyError(f"unknown prompt template {template!r}") from None
    if chunks:
        context = "\n".join(
            f"[{i}] {c.text.strip()}" for i, c in enumerate(chunks, start=1)
        )
    else:
        context = _NO_CONTEXT_LINE
    return fmt.format(context=context, query=query)


def answer_query(
    query: str,
    config: PipelineConfig,
    store: Collection,
    client: ModelClient,
) -> Answer:
    """Run the five pipeline stages for one query."""
    if not query:
        raise ValueError("query must be non-empty")
    config.validate()
    trace: list[TraceEvent] = []

    def timed(stage: str):
        start = time.perf_counter()

        def done(count: int) -> None:
            trace.append(
                TraceEvent(
                    stage=stage,
                    count=count,
                    elapsed_ms=(time.perf_counter() - start) * 1000.0,
                )
            )

        return done

    done = timed("embed_query")
    try:
        qvec = client.embed([query], side=QUERY_SIDE, instruction=config.instruction)[0]
    except Exception as exc:
        raise PipelineError("embed_query", str(exc)) from exc
    if store.model_tag and qvec.model and store.model_tag != qvec.model:
        raise PipelineError(
            "embed_query",
            f"store was built with model {store.model_tag!r} but the "
            f"client embeds with {qvec.model!r}",
        )
    done(1)

    done = timed("vector_search")
    try:
        hits: list[RetrievalResult] = store.search(
            qvec.values,
            top_n=config.retrieve_n,
            score_threshold=config.score_threshold,
            scope=list(config.scope) if config.scope is not None else None,
        )
    except Exception as exc:
        raise PipelineError("vector_search", str(exc)) from exc
    done(len(hits))

    candidates = [
        ScoredChunk(
            chunk_id=h.chunk_id,
            text=str(h.payload.get("text", "")),
            similarity=h.similarity,
            partition=h.partition,
            payload=h.payload,
        )
        for h in hits
    ]

    if not candidates:
        trace.append(TraceEvent(stage="rerank", count=0, elapsed_ms=0.0))
        trace.append(TraceEvent(stage="select", count=0, elapsed_ms=0.0))
        trace.append(TraceEvent(stage="generate", count=0, elapsed_ms=0.0))
        return Answer(
            text=REFUSAL_ANSWER,
            citations=[],
            retrieved=[],
            unanswerable=True,
            trace=trace,
        )

    done = timed("rerank")
    try:
        scores = client.rerank(query, [c.text for c in candidates])
    except Exception as exc:
        raise PipelineError("rerank", str(exc)) from exc
    for cand, score in zip(candidates, scores):
        cand.rerank_raw = score.raw
        cand.rerank_normalized = score.normalized
    done(len(candidates))

    done = timed("select")
    pool = candidates
    if config.rerank_threshold is not None:
        pool = [c for c in pool if c.rerank_normalized >= config.rerank_threshold]
    selected = sorted(pool, key=lambda c: (-c.rerank_normalized, c.chunk_id))
    selected = selected[: config.top_k]
    done(len(selected))

    if not selected:
        trace.append(TraceEvent(stage="generate", count=0, elapsed_ms=0.0))
        return Answer(
            text=REFUSAL_ANSWER,
            citations=[],
            retrieved=candidates,
            unanswerable=True,
            trace=trace,
        )

    done = timed("generate")
    prompt = build_prompt(query, selected, template=config.template)
    try:
        text = client.generate(prompt)
    except Exception as exc:
        raise PipelineError("generate", str(exc)) from exc
    done(1)

    refused = text == REFUSAL_ANSWER
    return Answer(
        text=text,
        citations=[] if refused else [c.chunk_id for c in selected],
        retrieved=candidates,
        unanswerable=refused,
        trace=trace,
    )
