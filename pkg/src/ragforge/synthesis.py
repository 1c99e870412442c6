"""Training-data synthesis.

Generates typed question/answer pairs from corpus chunks, assembles noisy
retrieval contexts around each positive chunk, rewrites short answers
into long grounded ones, mixes in refusal-answer examples at a 7:1 ratio
using deliberately low-relevance contexts, filters by a 0-3 quality
label, and builds preference pairs gated by a strict 0.4 relevance
threshold. The two prompt templates are byte-frozen by golden tests; any
edit here is meant to break those tests.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from random import Random
from typing import Any, Iterable, Iterator, Sequence

from ragforge.clients.base import JudgeKind, ModelClient
from ragforge.mining import derive_seed
from ragforge.records import REFUSAL_ANSWER
from ragforge.vectorstore import Collection


class SynthesisError(RuntimeError):
    """Synthesis step failure (unparseable generation, missing data)."""


class QueryType:
    """The nine question categories."""

    WHAT = "What"
    WHICH = "Which"
    WHO = "Who"
    WHEN = "When"
    WHERE = "Where"
    HOW = "How"
    WHY = "Why"
    GENERAL = "General"
    IMPERATIVE = "Imperative"

    ALL = (WHAT, WHICH, WHO, WHEN, WHERE, HOW, WHY, GENERAL, IMPERATIVE)


# Clause spliced into the generation instruction after "... and ".
# The frame supplies the sentence-final period, so clauses carry none.
_WH_WORDS = {
    QueryType.WHAT: "What",
    QueryType.WHICH: "Which",
    QueryType.WHO: "Who/Whose",
    QueryType.WHEN: "When",
    QueryType.WHERE: "Where",
    QueryType.HOW: "How",
    QueryType.WHY: "Why",
}

TYPE_CLAUSES = {
    **{
        t: f"The question should use [{w}]... to ask" for t, w in _WH_WORDS.items()
    },
    QueryType.GENERAL: "Please ask in general form",
    QueryType.IMPERATIVE: "Use imperative sentences to prompt the text",
}

CONTEXT_POSITIVE = "positive"
CONTEXT_DISTRACTOR = "distractor"

DEFAULT_DISTRACTORS = 3
DEFAULT_RATIO = 7
# Chunks ranked at or beyond this position by the weak retriever count as
# low-relevance when building refusal examples.
LOW_RELEVANCE_RANK = 50

DPO_THRESHOLD = 0.4


@dataclass
class FewShotExample:
    query_type: str
    question: str
    answer: str


@dataclass
class ContextChunk:
    """One context passage of a synthesized example."""

    role: str
    chunk_id: str
    text: str

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "chunk_id": self.chunk_id, "text": self.text}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ContextChunk":
        return cls(
            role=str(data["role"]),
            chunk_id=str(data["chunk_id"]),
            text=str(data["text"]),
        )


@dataclass
class SynthExample:
    """One synthesized training example.

    Answerable examples carry exactly one positive-role context;
    unanswerable ones carry none and their answer is byte-equal to the
    refusal string.
    """

    question: str
    answer: str
    contexts: list[ContextChunk]
    answerable: bool
    query_type: str
    doc_id: str
    quality_label: int | None = None

    def positive_contexts(self) -> list[ContextChunk]:
        return [c for c in self.contexts if c.role == CONTEXT_POSITIVE]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "question": self.question,
            "answer": self.answer,
            "contexts": [c.to_dict() for c in self.contexts],
            "answerable": self.answerable,
            "query_type": self.query_type,
            "doc_id": self.doc_id,
        }
        if self.quality_label is not None:
            out["quality_label"] = self.quality_label
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SynthExample":
        return cls(
            question=str(data["question"]),
            answer=str(data["answer"]),
            contexts=[ContextChunk.from_dict(c) for c in data["contexts"]],
            answerable=bool(data["answerable"]),
            query_type=str(data["query_type"]),
            doc_id=str(data["doc_id"]),
            quality_label=data.get("quality_label"),
        )


@dataclass
class DpoPair:
    """Preference pair over contexts for one question."""

    question: str
    chosen: ContextChunk
    rejected: ContextChunk
    relevance_chosen: float
    relevance_rejected: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "chosen": self.chosen.to_dict(),
            "rejected": self.rejected.to_dict(),
            "relevance_chosen": self.relevance_chosen,
            "relevance_rejected": self.relevance_rejected,
        }


DEFAULT_FEW_SHOTS: dict[str, list[FewShotExample]] = {
    QueryType.WHAT: [
        FewShotExample(
            QueryType.WHAT,
            "What is the boiling point of water at sea level?",
            "Water boils at 100 degrees Celsius at sea level.",
        ),
        FewShotExample(
            QueryType.WHAT,
            "What gas do plants absorb during photosynthesis?",
            "Plants absorb carbon dioxide during photosynthesis.",
        ),
        FewShotExample(
            QueryType.WHAT,
            "What is the hardest naturally occurring mineral?",
            "Diamond is the hardest naturally occurring mineral.",
        ),
    ],
    QueryType.WHICH: [
        FewShotExample(
            QueryType.WHICH,
            "Which planet is closest to the sun?",
            "Mercury is the planet closest to the sun.",
        ),
        FewShotExample(
            QueryType.WHICH,
            "Which ocean is the deepest?",
            "The Pacific Ocean is the deepest ocean.",
        ),
        FewShotExample(
            QueryType.WHICH,
            "Which rock type forms from cooling magma?",
            "Igneous rock forms from cooling magma.",
        ),
    ],
    QueryType.WHO: [
        FewShotExample(
            QueryType.WHO,
            "Who proposed the theory of continental drift?",
            "Alfred Wegener proposed the theory of continental drift in 1912.",
        ),
        FewShotExample(
            QueryType.WHO,
            "Whose laws describe planetary motion?",
            "Johannes Kepler formulated the laws of planetary motion.",
        ),
        FewShotExample(
            QueryType.WHO,
            "Who first measured the charge of the electron?",
            "Robert Millikan first measured the charge of the electron.",
        ),
    ],
    QueryType.WHEN: [
        FewShotExample(
            QueryType.WHEN,
            "When did the Cretaceous period end?",
            "The Cretaceous period ended about 66 million years ago.",
        ),
        FewShotExample(
            QueryType.WHEN,
            "When does water reach its maximum density?",
            "Water reaches its maximum density at about 4 degrees Celsius.",
        ),
        FewShotExample(
            QueryType.WHEN,
            "When was the structure of DNA described?",
            "The double-helix structure of DNA was described in 1953.",
        ),
    ],
    QueryType.WHERE: [
        FewShotExample(
            QueryType.WHERE,
            "Where do most earthquakes occur?",
            "Most earthquakes occur along tectonic plate boundaries.",
        ),
        FewShotExample(
            QueryType.WHERE,
            "Where is the ozone layer located?",
            "The ozone layer is located in the lower stratosphere.",
        ),
        FewShotExample(
            QueryType.WHERE,
            "Where does seafloor spreading take place?",
            "Seafloor spreading takes place at mid-ocean ridges.",
        ),
    ],
    QueryType.HOW: [
        FewShotExample(
            QueryType.HOW,
            "How does sedimentary rock form?",
            "Sedimentary rock forms when layers of sediment are compacted and cemented together.",
        ),
        FewShotExample(
            QueryType.HOW,
            "How do glaciers shape valleys?",
            "Glaciers carve valleys into a U shape as the moving ice erodes rock.",
        ),
        FewShotExample(
            QueryType.HOW,
            "How is wind speed measured?",
            "Wind speed is measured with an anemometer.",
        ),
    ],
    QueryType.WHY: [
        FewShotExample(
            QueryType.WHY,
            "Why is the sky blue?",
            "The sky appears blue because air molecules scatter shorter blue wavelengths of sunlight more strongly.",
        ),
        FewShotExample(
            QueryType.WHY,
            "Why do metals conduct electricity?",
            "Metals conduct electricity because their outer electrons move freely between atoms.",
        ),
        FewShotExample(
            QueryType.WHY,
            "Why does ice float on water?",
            "Ice floats because it is less dense than liquid water.",
        ),
    ],
    QueryType.GENERAL: [
        FewShotExample(
            QueryType.GENERAL,
            "Is granite an igneous rock?",
            "Yes, granite is an intrusive igneous rock.",
        ),
        FewShotExample(
            QueryType.GENERAL,
            "Does sound travel faster in water than in air?",
            "Yes, sound travels roughly four times faster in water than in air.",
        ),
        FewShotExample(
            QueryType.GENERAL,
            "Can two minerals have the same chemical formula?",
            "Yes, polymorphs such as graphite and diamond share a chemical formula but differ in structure.",
        ),
    ],
    QueryType.IMPERATIVE: [
        FewShotExample(
            QueryType.IMPERATIVE,
            "Describe the water cycle.",
            "Water evaporates, condenses into clouds, falls as precipitation, and returns to oceans and rivers.",
        ),
        FewShotExample(
            QueryType.IMPERATIVE,
            "List the layers of the Earth.",
            "The Earth consists of the crust, the mantle, the outer core, and the inner core.",
        ),
        FewShotExample(
            QueryType.IMPERATIVE,
            "Explain how a rainbow forms.",
            "A rainbow forms when sunlight is refracted, reflected, and dispersed inside raindrops.",
        ),
    ],
}


def sample_query_type(rng: Random) -> str:
    """Uniform draw over the nine types."""
    return rng.choice(QueryType.ALL)


def pick_few_shots(
    query_type: str,
    library: dict[str, list[FewShotExample]] | None = None,
    rng: Random | None = None,
    k: int = 3,
) -> list[FewShotExample]:
    """k distinct examples of the requested type, seeded draw."""
    library = library if library is not None else DEFAULT_FEW_SHOTS
    rng = rng or Random(0)
    subset = library.get(query_type, [])
    if len(subset) < k:
        raise SynthesisError(
            f"few-shot library has {len(subset)} examples of type "
            f"{query_type!r}, need {k}"
        )
    return rng.sample(subset, k)


_GENERATION_HEADER = (
    "Instruction: Given the next [document], create a [question] and [answer] "
    "pair that are grounded in the main point of the document, don't add any "
    "additional information that is not in the document and {clause}. The "
    "[question] is by an information-seeking user and the [answer] is provided "
    "by a helping AI Agent.\n"
    "Refer to the following question format and corresponding answers. Your "
    "output should consist solely of question-answer pairs."
)


def build_generation_prompt(
    document: str, query_type: str, few_shots: Sequence[FewShotExample]
) -> str:
    """Render the question-generation prompt; ends exactly '### Response:'."""
    if not document:
        raise ValueError("document must be non-empty")
    if query_type not in TYPE_CLAUSES:
        raise ValueError(f"unknown query type {query_type!r}")
    parts = [_GENERATION_HEADER.format(clause=TYPE_CLAUSES[query_type])]
    for shot in few_shots:
        parts.append(f"[question]{shot.question}")
        parts.append(f"[answer] {shot.answer}")
    parts.append(f"[document]: {document}")
    parts.append("### Response:")
    return "\n\n".join(parts)


_REWRITE_TEMPLATE = (
    "Here is a task involving RAG (Retrieval Augmented Generation) for "
    "question answering. I will provide you some documents(denoted as "
    "[References]), a question (denoted as [Query]) related to the documents, "
    "and the corresponding original answer (denoted as [Short Answer]). You "
    "are required to expand the content of the answer, with the following "
    "requirements:\n"
    "1. Your generated answer should contain 6 to 8 sentences.\n"
    "2. Your generated answer should have exactly the same meaning as the "
    "[Short Answer] and must perfectly address the [Query] without deviating.\n"
    "3. The content of your generated answer should fully utilize the content "
    "from the [References], and you must not fabricate any facts.\n"
    "\n"
    "[References]\n"
    "{references}\n"
    "\n"
    "[Query]\n"
    "{query}\n"
    "\n"
    "[Short Answer]\n"
    "{short_answer}\n"
    "\n"
    "Please note that do not output content other than the generated new "
    "answer. Your generated new answer is"
)


def build_rewrite_prompt(references: str, query: str, short_answer: str) -> str:
    """Render the answer-expansion prompt."""
    if not (references and query and short_answer):
        raise ValueError("references, query and short_answer must be non-empty")
    return _REWRITE_TEMPLATE.format(
        references=references, query=query, short_answer=short_answer
    )


_RESPONSE_RE = re.compile(
    r"\[question\]\s*(.+?)\s*\[answer\]\s*(.+)\s*$", re.DOTALL
)


def parse_generation_response(text: str) -> tuple[str, str]:
    """Extract the (question, answer) pair from a generation response."""
    m = _RESPONSE_RE.search(text)
    if not m:
        raise SynthesisError(f"cannot parse generation response: {text[:120]!r}")
    return m.group(1).strip(), m.group(2).strip()


def _retrieve_ranked(
    question: str,
    store: Collection,
    client: ModelClient,
    top_n: int,
    scope: Sequence[str] | None,
) -> list[ContextChunk]:
    qvec = client.embed([question], side="query", instruction="")[0]
    hits = store.search(qvec.values, top_n=top_n, score_threshold=None, scope=scope)
    return [
        ContextChunk(
            role=CONTEXT_DISTRACTOR,
            chunk_id=h.chunk_id,
            text=str(h.payload.get("text", "")),
        )
        for h in hits
    ]


def assemble_contexts(
    question: str,
    positive: ContextChunk,
    store: Collection,
    client: ModelClient,
    distractor_count: int = DEFAULT_DISTRACTORS,
    rng: Random | None = None,
    scope: Sequence[str] | None = None,
) -> list[ContextChunk]:
    """Positive chunk plus retrieved distractors, in seeded shuffled order."""
    rng = rng or Random(0)
    ranked = _retrieve_ranked(
        question, store, client, top_n=distractor_count + 8, scope=scope
    )
    distractors = [
        c
        for c in ranked
        if c.chunk_id != positive.chunk_id and c.text != positive.text
    ][:distractor_count]
    if len(distractors) < distractor_count:
        raise SynthesisError(
            f"store supplied {len(distractors)} distractors, need {distractor_count}"
        )
    contexts = [
        ContextChunk(role=CONTEXT_POSITIVE, chunk_id=positive.chunk_id, text=positive.text)
    ] + distractors
    rng.shuffle(contexts)
    return contexts


def build_unanswerable(
    example: SynthExample,
    store: Collection,
    client: ModelClient,
    rng: Random,
    context_count: int,
    rank_cutoff: int = LOW_RELEVANCE_RANK,
    scope: Sequence[str] | None = None,
) -> SynthExample:
    """Refusal twin of an answerable example.

    Contexts are drawn from chunks the weak retriever ranks at or beyond
    ``rank_cutoff`` for the question (or, in a store smaller than the
    cutoff, from the bottom of the ranking), never including the
    example's positive chunk.
    """
    positive_ids = {c.chunk_id for c in example.positive_contexts()}
    ranked = _retrieve_ranked(
        example.question, store, client, top_n=rank_cutoff + 4 * context_count, scope=scope
    )
    low = [c for c in ranked[rank_cutoff:] if c.chunk_id not in positive_ids]
    if len(low) < context_count:
        tail = [c for c in ranked if c.chunk_id not in positive_ids]
        low = tail[-max(context_count, len(tail) // 4) :]
    if len(low) < context_count:
        raise SynthesisError(
            f"store supplied {len(low)} low-relevance chunks, need {context_count}"
        )
    picked = rng.sample(low, context_count)
    return SynthExample(
        question=example.question,
        answer=REFUSAL_ANSWER,
        contexts=picked,
        answerable=False,
        query_type=example.query_type,
        doc_id=example.doc_id,
    )


def mix_unanswerable(
    stream: Iterable[SynthExample],
    store: Collection,
    client: ModelClient,
    seed: int = 0,
    ratio: int = DEFAULT_RATIO,
    rank_cutoff: int = LOW_RELEVANCE_RANK,
    scope: Sequence[str] | None = None,
) -> Iterator[SynthExample]:
    """Insert one refusal example after every ``ratio`` answerable ones.

    The schedule is a fixed 1-in-``ratio`` counter, not a random draw;
    randomness only picks which low-relevance chunks fill the contexts.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    count = 0
    for example in stream:
        yield example
        if not example.answerable:
            continue
        count += 1
        if count % ratio == 0:
            rng = Random(derive_seed(seed, count))
            yield build_unanswerable(
                example,
                store,
                client,
                rng,
                context_count=max(1, len(example.contexts)),
                rank_cutoff=rank_cutoff,
                scope=scope,
            )


def synthesize_example(
    chunk_id: str,
    doc_id: str,
    text: str,
    store: Collection,
    client: ModelClient,
    few_shots: dict[str, list[FewShotExample]] | None = None,
    rng: Random | None = None,
    distractor_count: int = DEFAULT_DISTRACTORS,
    scope: Sequence[str] | None = None,
) -> SynthExample:
    """One answerable example from one positive chunk.

    Generates a typed (question, short answer) pair from the chunk,
    assembles a noisy context set around it, then expands the short
    answer against those contexts.
    """
    rng = rng or Random(0)
    query_type = sample_query_type(rng)
    shots = pick_few_shots(query_type, few_shots, rng)
    prompt = build_generation_prompt(text, query_type, shots)
    question, short_answer = parse_generation_response(client.generate(prompt))
    if not question or not short_answer:
        raise SynthesisError(f"degenerate generation for chunk {chunk_id}")

    positive = ContextChunk(role=CONTEXT_POSITIVE, chunk_id=chunk_id, text=text)
    contexts = assemble_contexts(
        question, positive, store, client, distractor_count, rng, scope
    )
    references = "\n".join(c.text for c in contexts)
    long_answer = client.generate(
        build_rewrite_prompt(references, question, short_answer)
    )
    return SynthExample(
        question=question,
        answer=long_answer,
        contexts=contexts,
        answerable=True,
        query_type=query_type,
        doc_id=doc_id,
    )


def synthesize_examples(
    sources: Sequence[tuple[str, str, str]],
    store: Collection,
    client: ModelClient,
    few_shots: dict[str, list[FewShotExample]] | None = None,
    seed: int = 0,
    distractor_count: int = DEFAULT_DISTRACTORS,
    ratio: int = DEFAULT_RATIO,
    rank_cutoff: int = LOW_RELEVANCE_RANK,
    scope: Sequence[str] | None = None,
) -> list[SynthExample]:
    """Full synthesis run over (chunk_id, doc_id, text) sources."""

    def answerable_stream() -> Iterator[SynthExample]:
        for i, (chunk_id, doc_id, text) in enumerate(sources):
            yield synthesize_example(
                chunk_id,
                doc_id,
                text,
                store,
                client,
                few_shots=few_shots,
                rng=Random(derive_seed(seed, i)),
                distractor_count=distractor_count,
                scope=scope,
            )

    return list(
        mix_unanswerable(
            answerable_stream(),
            store,
            client,
            seed=seed + 1,
            ratio=ratio,
            rank_cutoff=rank_cutoff,
            scope=scope,
        )
    )


@dataclass
class QualityFilterResult:
    """Partition of judged examples; parked ones hit a judge failure."""

    kept: list[SynthExample] = field(default_factory=list)
    dropped: list[SynthExample] = field(default_factory=list)
    parked: list[SynthExample] = field(default_factory=list)


def quality_filter(
    examples: Sequence[SynthExample], judge: ModelClient
) -> QualityFilterResult:
    """Label every example 0-3 and drop label 0.

    The judge grades the answer against the concatenated contexts. An
    example whose judge call fails is parked rather than silently kept.
    """
    result = QualityFilterResult()
    for example in examples:
        context = "\n".join(c.text for c in example.contexts)
        try:
            label = int(
                judge.judge(
                    JudgeKind.QUALITY_0_3,
                    {"answer": example.answer, "context": context},
                )
            )
        except Exception:
            result.parked.append(example)
            continue
        if not 0 <= label <= 3:
            result.parked.append(example)
            continue
        example.quality_label = label
        if label == 0:
            result.dropped.append(example)
        else:
            result.kept.append(example)
    return result


def build_dpo_pairs(
    items: Sequence[tuple[str, Sequence[ContextChunk]]],
    judge: ModelClient,
    threshold: float = DPO_THRESHOLD,
) -> list[DpoPair]:
    """Preference pairs gated by the relevance threshold.

    For each (question, candidate chunks) item the judge scores every
    chunk's relevance in [0, 1]. Chosen is the highest-scoring chunk with
    relevance strictly greater than the threshold (ties break to the
    smallest chunk_id); rejected is the lowest-scoring chunk with
    relevance strictly below the chosen's. Items without both produce no
    pair.
    """
    pairs: list[DpoPair] = []
    for question, chunks in items:
        scored: list[tuple[float, ContextChunk]] = []
        for chunk in chunks:
            value = float(
                judge.judge(
                    JudgeKind.RELEVANCE_0_1,
                    {"text_a": question, "text_b": chunk.text},
                )
            )
            scored.append((value, chunk))
        eligible = [(v, c) for v, c in scored if v > threshold]
        if not eligible:
            continue
        chosen_score, chosen = min(eligible, key=lambda vc: (-vc[0], vc[1].chunk_id))
        lower = [(v, c) for v, c in scored if v < chosen_score]
        if not lower:
            continue
        rejected_score, rejected = min(lower, key=lambda vc: (vc[0], vc[1].chunk_id))
        pairs.append(
            DpoPair(
                question=question,
                chosen=chosen,
                rejected=rejected,
                relevance_chosen=chosen_score,
                relevance_rejected=rejected_score,
            )
        )
    return pairs
