"""Deterministic in-process client.

Every capability is a pure function of its inputs, so any test or
pipeline run is bit-stable across runs and platforms. The formulas below
are part of the stub's contract and are asserted by tests:

* embed:   L2-normalized signed hashed features (words weight 1.0,
           character trigrams weight 0.5) at ``config.embed_dim``; see
           :mod:`ragforge.features` for the exact bucketing.
* nsp:     logit = 4 * J(a, b) - 2 where J is the Jaccard similarity of
           lowercase word-token sets. Symmetric in its arguments.
* rerank:  raw = 6 * J(query, doc) - 3.
* judge:   relevance_0_1 = J(text_a, text_b);
           statement_presence = normalized-substring containment;
           quality_0_3 = grounding rubric (see :meth:`StubClient.judge`).
* generate: template echo dispatched on prompt markers (see
           :meth:`StubClient.generate`).
"""

from __future__ import annotations

import re
from typing import Any, Sequence

import numpy as np

from ragforge.clients.base import ClientConfig, JudgeKind, ModelClient
from ragforge.features import unit_features, word_tokens
from ragforge.records import REFUSAL_ANSWER


def jaccard(text_a: str, text_b: str) -> float:
    """Jaccard similarity of lowercase word-token sets; 1.0 for two empties."""
    a, b = set(word_tokens(text_a)), set(word_tokens(text_b))
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


def normalize_for_match(text: str) -> str:
    """Casefold and collapse whitespace for substring matching."""
    return re.sub(r"\s+", " ", text.casefold()).strip()


_CONTEXT_LINE_RE = re.compile(r"^\[(\d+)\] (.*)$", re.MULTILINE)
_GENERATION_DOC_RE = re.compile(r"\[document\]:\s*(.*?)\s*### Response:$", re.DOTALL)
_REWRITE_SHORT_RE = re.compile(r"\[Short Answer\]\n(.*?)\n\s*Please note", re.DOTALL)


def _first_sentence(text: str, max_words: int = 30) -> str:
    m = re.search(r"^(.*?[.!?])(\s|$)", text)
    sent = m.group(1) if m else text
    words = sent.split()
    if len(words) > max_words:
        sent = " ".join(words[:max_words])
    return sent.strip()


def _focus_word(text: str) -> str:
    for tok in word_tokens(text):
        if len(tok) >= 5:
            return tok
    toks = word_tokens(text)
    return toks[0] if toks else "this text"


class StubClient(ModelClient):
    """Offline stand-in for all remote models."""

    def __init__(self, config: ClientConfig | None = None):
        super().__init__(config or ClientConfig())

    def _embed_batch(
        self, texts: Sequence[str], side: str, instruction: str
    ) -> tuple[list[np.ndarray], str]:
        dim = self.config.embed_dim
        return [unit_features(t, dim) for t in texts], self.config.model_tag

    def _rerank_raw(self, query: str, documents: Sequence[str]) -> list[float]:
        return [6.0 * jaccard(query, doc) - 3.0 for doc in documents]

    def nsp_batch(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        return [4.0 * jaccard(a, b) - 2.0 for a, b in pairs]

    def generate(self, prompt: str) -> str:
        """Deterministic template echo.

        Dispatch, in order: answer-rewriting prompts (contain
        ``[References]`` and ``[Short Answer]``) echo an expansion of the
        short answer; query-generation prompts (contain ``[document]:``
        and end with ``### Response:``) echo one ``[question]``/
        ``[answer]`` pair built from the document; chat prompts (numbered
        ``[i] ...`` context lines) echo the top context chunk; anything
        else yields the refusal answer.
        """
        if not prompt:
            raise ValueError("prompt must be non-empty")

        if "[References]" in prompt and "[Short Answer]" in prompt:
            m = _REWRITE_SHORT_RE.search(prompt)
            short = m.group(1).strip() if m else ""
            return (
                f"{short} This conclusion follows directly from the provided "
                "references. The references describe the same finding in "
                "context. The answer addresses the query without deviation. "
                "The supporting passages are consistent on this point. No "
                f"facts beyond the references are introduced. In summary, {short}"
            )

        m = _GENERATION_DOC_RE.search(prompt)
        if m:
            doc = m.group(1)
            question = f"What does the passage explain about {_focus_word(doc)}?"
            answer = _first_sentence(doc)
            return f"[question] {question}\n[answer] {answer}"

        contexts = _CONTEXT_LINE_RE.findall(prompt)
        if contexts:
            return f"According to the context: {contexts[0][1]}"
        return REFUSAL_ANSWER

    def judge(self, kind: str, inputs: dict[str, Any]) -> Any:
        if kind == JudgeKind.RELEVANCE_0_1:
            return jaccard(inputs["text_a"], inputs["text_b"])
        if kind == JudgeKind.STATEMENT_PRESENCE:
            statement = normalize_for_match(inputs["statement"])
            answer = normalize_for_match(inputs["answer"])
            return bool(statement) and statement in answer
        if kind == JudgeKind.QUALITY_0_3:
            return self._quality_label(inputs)
        raise ValueError(f"unknown judge kind {kind!r}")

    @staticmethod
    def _quality_label(inputs: dict[str, Any]) -> int:
        """Grounding rubric.

        Label by the fraction g of the answer's word tokens present in
        the context: empty answer or g < 0.15 -> 0; g < 0.45 -> 1;
        g < 0.75 -> 2; else 3.
        """
        answer_tokens = word_tokens(inputs.get("answer", ""))
        if not answer_tokens:
            return 0
        context_tokens = set(word_tokens(inputs.get("context", "")))
        g = sum(1 for t in answer_tokens if t in context_tokens) / len(answer_tokens)
        if g < 0.15:
            return 0
        if g < 0.45:
            return 1
        if g < 0.75:
            return 2
        return 3
