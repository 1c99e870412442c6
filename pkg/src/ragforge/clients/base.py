"""Client interface, shared score/vector types and query formatting."""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

QUERY_SIDE = "query"
DOCUMENT_SIDE = "document"


class JudgeKind:
    """Wire-level judge kinds."""

    QUALITY_0_3 = "quality_0_3"
    RELEVANCE_0_1 = "relevance_0_1"
    STATEMENT_PRESENCE = "statement_presence"

    ALL = (QUALITY_0_3, RELEVANCE_0_1, STATEMENT_PRESENCE)


# Per-task default instructions prepended to queries. The upstream models
# ship no canonical table, so these defaults are ours and overridable via
# configuration.
DEFAULT_INSTRUCTIONS = {
    "qa": "Given a question, retrieve passages that answer the question",
    "rerank": "Given a query, retrieve documents relevant to the query",
    "sts": "Retrieve semantically similar text",
}


class ClientError(Exception):
    """Client call failure; ``retriable`` marks transient conditions."""

    def __init__(self, message: str, retriable: bool = True):
        super().__init__(message)
        self.retriable = retriable


class DimensionDriftError(ClientError):
    """Embedding dimension changed across calls; fatal."""

    def __init__(self, message: str):
        super().__init__(message, retriable=False)


@dataclass
class ClientConfig:
    """Connection and provenance settings for one client."""

    endpoint: str = "stub"
    timeout: float = 30.0
    max_batch_size: int = 64
    model_tag: str = "stub-v1"
    embed_dim: int = 256
    retries: int = 3
    backoff: float = 0.25


@dataclass
class InstructedQuery:
    """Query rendered with its task instruction.

    ``rendered`` is exactly ``"Instruct: " + instruction + "\\n" +
    "Query: " + query``; documents are never rendered this way.
    """

    instruction: str
    query: str
    rendered: str = field(init=False)

    def __post_init__(self) -> None:
        self.rendered = f"Instruct: {self.instruction}\nQuery: {self.query}"


def render_instructed_query(instruction: str, query: str) -> InstructedQuery:
    if not query:
        raise ValueError("query must be non-empty")
    return InstructedQuery(instruction=instruction, query=query)


def parse_instructed_query(rendered: str) -> tuple[str, str]:
    """Inverse of :func:`render_instructed_query`.

    Splits on the first ``"\\nQuery: "``; round-trips exactly whenever the
    instruction does not itself contain that marker.
    """
    if not rendered.startswith("Instruct: "):
        raise ValueError("not an instructed query")
    body = rendered[len("Instruct: ") :]
    marker = "\nQuery: "
    pos = body.find(marker)
    if pos < 0:
        raise ValueError("missing Query section")
    return body[:pos], body[pos + len(marker) :]


def sigmoid(x: float) -> float:
    """Numerically stable logistic function."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class EmbeddingVector:
    """Dense vector plus the tag of the model that produced it."""

    values: np.ndarray
    model: str

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass
class RerankScore:
    """Raw cross-encoder relevance score and its sigmoid normalization."""

    raw: float
    normalized: float

    @classmethod
    def from_raw(cls, raw: float) -> "RerankScore":
        return cls(raw=raw, normalized=sigmoid(raw))


class ModelClient(abc.ABC):
    """All five neural capabilities behind one object.

    Implementations must be safe to share across concurrent requests.
    """

    def __init__(self, config: ClientConfig):
        self.config = config
        self._seen_dim: int | None = None

    @abc.abstractmethod
    def _embed_batch(
        self, texts: Sequence[str], side: str, instruction: str
    ) -> tuple[list[np.ndarray], str]:
        """Return (vectors, model tag) for one batch.

        ``texts`` arrive fully rendered (query-side instructions already
        applied by :meth:`embed`); ``side`` and ``instruction`` are
        metadata for implementations that route by them.
        """

    @abc.abstractmethod
    def _rerank_raw(self, query: str, documents: Sequence[str]) -> list[float]:
        """Raw relevance scores, order-aligned with ``documents``."""

    @abc.abstractmethod
    def nsp_batch(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        """Raw continuation logits for adjacent sentence pairs."""

    @abc.abstractmethod
    def generate(self, prompt: str) -> str:
        """Generate text for a prompt."""

    @abc.abstractmethod
    def judge(self, kind: str, inputs: dict[str, Any]) -> Any:
        """Judge per ``kind``: quality 0..3, relevance [0,1], or presence."""

    def embed(
        self,
        texts: Sequence[str],
        side: str = DOCUMENT_SIDE,
        instruction: str = "",
    ) -> list[EmbeddingVector]:
        """Embed texts; the query side is rendered with its instruction first."""
        if side not in (QUERY_SIDE, DOCUMENT_SIDE):
            raise ValueError(f"unknown side {side!r}")
        if side == QUERY_SIDE:
            texts = [render_instructed_query(instruction, t).rendered for t in texts]
        out: list[EmbeddingVector] = []
        step = max(1, self.config.max_batch_size)
        for start in range(0, len(texts), step):
            vectors, model = self._embed_batch(
                texts[start : start + step], side, instruction
            )
            for v in vectors:
                if self._seen_dim is None:
                    self._seen_dim = int(v.shape[0])
                elif int(v.shape[0]) != self._seen_dim:
                    raise DimensionDriftError(
                        f"embedding dimension drifted from {self._seen_dim} "
                        f"to {int(v.shape[0])}"
                    )
                out.append(EmbeddingVector(values=v, model=model))
        return out

    def rerank(self, query: str, documents: Sequence[str]) -> list[RerankScore]:
        """Score every document against the query; sigmoid-normalized."""
        if not documents:
            raise ValueError("rerank requires at least one document")
        raw = self._rerank_raw(query, documents)
        if len(raw) != len(documents):
            raise ClientError(
                f"reranker returned {len(raw)} scores for {len(documents)} documents",
                retriable=False,
            )
        return [RerankScore.from_raw(r) for r in raw]

    def nsp(self, sentence_a: str, sentence_b: str) -> float:
        """Raw continuation logit for one sentence pair."""
        return self.nsp_batch([(sentence_a, sentence_b)])[0]
