"""Hard-negative mining.

Candidates come from a weak retriever (embedder cosine over the corpus
store); each candidate is weighted by closeness of its weak score to the
positive's score, w = exp(-sigma * (neg_score - pos_score)^2), and
negatives are drawn without replacement with probability proportional to
weight. Dataset-provided negatives are always retained first; mining only
fills the remainder up to the configured minimum.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, replace
from hashlib import blake2b
from itertools import accumulate
from random import Random
from typing import Sequence

import numpy as np

from ragforge.clients.base import ModelClient, QUERY_SIDE, DEFAULT_INSTRUCTIONS
from ragforge.records import ScoredNegative, TrainingPair
from ragforge.vectorstore import Collection

# Candidate role in the sampling pool; same record shape as a stored
# negative.
ScoredCandidate = ScoredNegative

DEFAULT_MIN_NEGATIVES = 16
DEFAULT_POOL_SIZE = 128

# Sampling sharpness per task: question answering mines close to the
# positive, reranking and similarity use a relaxed distribution.
SIGMA_BY_TASK = {"qa": 1.0, "rerank": 3.0, "sts": 3.0}


class NegativeShortfallError(RuntimeError):
    """Candidate pool cannot supply the required negative count."""

    def __init__(self, needed: int, available: int, context: str = ""):
        detail = f" ({context})" if context else ""
        super().__init__(
            f"need {needed} negatives but only {available} candidates are "
            f"available; short by {needed - available}{detail}"
        )
        self.needed = needed
        self.available = available
        self.shortfall = needed - available


@dataclass
class SimANSConfig:
    """Sampling parameters for one task type."""

    sigma: float = 1.0
    min_negatives: int = DEFAULT_MIN_NEGATIVES
    candidate_pool_size: int = DEFAULT_POOL_SIZE

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.min_negatives < 1:
            raise ValueError("min_negatives must be >= 1")
        if self.candidate_pool_size < self.min_negatives:
            raise ValueError("candidate_pool_size must be >= min_negatives")


def default_configs() -> dict[str, SimANSConfig]:
    return {task: SimANSConfig(sigma=sigma) for task, sigma in SIGMA_BY_TASK.items()}


def simans_weight(neg_score: float, pos_score: float, sigma: float) -> float:
    """exp(-sigma * (neg_score - pos_score)^2); 1.0 at equal scores."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not (math.isfinite(neg_score) and math.isfinite(pos_score)):
        raise ValueError("scores must be finite")
    return math.exp(-sigma * (neg_score - pos_score) ** 2)


def derive_seed(seed: int, index: int) -> int:
    """Stable per-item sub-seed."""
    digest = blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def sample_negatives(
    positive: tuple[str, str, float],
    candidates: Sequence[ScoredNegative],
    config: SimANSConfig,
    rng_seed: int,
) -> list[ScoredNegative]:
    """Draw ``config.min_negatives`` candidates without replacement.

    Each draw picks proportionally to the remaining candidates'
    simans_weight values (weights renormalize as the pool shrinks).
    Candidates matching the positive's exact text are dropped first. A
    pool smaller than the requirement raises
    :class:`NegativeShortfallError` so the caller can widen the weak
    retrieval.
    """
    _query, pos_text, pos_score = positive
    pool = [c for c in candidates if c.text != pos_text]
    k = config.min_negatives
    if len(pool) < k:
        raise NegativeShortfallError(k, len(pool))
    if len(pool) == k:
        return list(pool)

    weights = [simans_weight(c.weak_score, pos_score, config.sigma) for c in pool]
    rng = Random(rng_seed)
    chosen: list[ScoredNegative] = []
    items = list(range(len(pool)))
    for _ in range(k):
        cumulative = list(accumulate(weights[i] for i in items))
        total = cumulative[-1]
        if total <= 0.0:
            # All remaining weights underflowed to zero; fall back to
            # uniform over what is left.
            pick = rng.randrange(len(items))
        else:
            pick = bisect_left(cumulative, rng.random() * total)
            pick = min(pick, len(items) - 1)
        chosen.append(pool[items.pop(pick)])
    return chosen


def weak_retrieve(
    query: str,
    store: Collection,
    client: ModelClient,
    pool_size: int,
    instruction: str,
    scope: Sequence[str] | None = None,
) -> tuple[list[ScoredNegative], "_QueryVector"]:
    """Weak-retriever candidate pool for one query, widest first."""
    qvec = client.embed([query], side=QUERY_SIDE, instruction=instruction)[0]
    hits = store.search(qvec.values, top_n=pool_size, score_threshold=None, scope=scope)
    out = [
        ScoredNegative(
            chunk_id=h.chunk_id,
            text=str(h.payload.get("text", "")),
            weak_score=h.similarity,
        )
        for h in hits
    ]
    return out, qvec


def positive_weak_score(pair: TrainingPair, client: ModelClient, qvec) -> float:
    """Weak score of the true positive: cosine of query and positive."""
    pvec = client.embed([pair.positive])[0].values.astype(np.float64)
    q = qvec.values.astype(np.float64)
    denom = float(np.linalg.norm(q) * np.linalg.norm(pvec))
    if denom == 0.0:
        return 0.0
    return float(np.dot(q, pvec) / denom)


def mine_pair(
    pair: TrainingPair,
    store: Collection,
    client: ModelClient,
    config: SimANSConfig,
    rng_seed: int,
    scope: Sequence[str] | None = None,
) -> TrainingPair:
    """Fill one pair's negatives up to ``config.min_negatives``.

    Dataset negatives are kept verbatim at the head of the list; mined
    negatives never duplicate the positive or a retained negative (by
    chunk_id or exact text).
    """
    retained = list(pair.negatives)
    missing = config.min_negatives - len(retained)
    if missing <= 0:
        return pair

    instruction = DEFAULT_INSTRUCTIONS.get(pair.task_type, DEFAULT_INSTRUCTIONS["qa"])
    candidates, qvec = weak_retrieve(
        pair.query, store, client, config.candidate_pool_size, instruction, scope
    )
    seen_ids = {n.chunk_id for n in retained if n.chunk_id}
    seen_texts = {n.text for n in retained}
    seen_texts.add(pair.positive)
    pool = [
        c
        for c in candidates
        if c.text not in seen_texts
        and (not c.chunk_id or c.chunk_id not in seen_ids)
        and (not pair.positive_id or c.chunk_id != pair.positive_id)
    ]
    if len(pool) < missing:
        raise NegativeShortfallError(missing, len(pool), context=f"query {pair.query!r}")

    pos_score = positive_weak_score(pair, client, qvec)
    fill_config = replace(config, min_negatives=missing)
    mined = sample_negatives(
        (pair.query, pair.positive, pos_score), pool, fill_config, rng_seed
    )
    return replace(pair, negatives=retained + mined)


def mine_for_dataset(
    pairs: Sequence[TrainingPair],
    store: Collection,
    client: ModelClient,
    seed: int = 0,
    configs: dict[str, SimANSConfig] | None = None,
    scope: Sequence[str] | None = None,
) -> list[TrainingPair]:
    """Mine negatives for a whole dataset, sigma chosen by task type."""
    configs = configs or default_configs()
    out: list[TrainingPair] = []
    for i, pair in enumerate(pairs):
        if pair.task_type not in configs:
            raise ValueError(f"pair {i}: unknown task type {pair.task_type!r}")
        out.append(
            mine_pair(
                pair,
                store,
                client,
                configs[pair.task_type],
                rng_seed=derive_seed(seed, i),
                scope=scope,
            )
        )
    return out
