"""Contrastive training objectives with analytic gradients.

Implements temperature-scaled cosine InfoNCE, its multi-dimension
(prefix-truncated) variant, and the multiple-negatives softmax
cross-entropy used for reranker training, plus two desk-scale
differentiable models to train with them: a linear encoder over hashed
lexical features and a linear pairwise scorer. Gradients are derived by
hand and checked against central finite differences in the tests.

Note on the ranking loss: it is the standard softmax cross-entropy of the
positive among positive-plus-negatives over raw scores,
``-log(exp(s_pos) / (exp(s_pos) + sum_i exp(s_neg_i)))``, averaged over
query groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ragforge.features import unit_features
from ragforge.records import TrainingPair

DEFAULT_TAU = 0.05


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, value: float):
        super().__init__(f"loss diverged at step {step}: {value}")
        self.step = step


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine is undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


def phi(q_embedding: np.ndarray, d_embedding: np.ndarray, tau: float) -> float:
    """exp(cos(h_q, h_d) / tau)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return math.exp(cosine(q_embedding, d_embedding) / tau)


@dataclass
class ContrastiveBatch:
    """Embeddings for one query group: h_q, h_d+, and negatives."""

    query: np.ndarray
    positive: np.ndarray
    negatives: list[np.ndarray] = field(default_factory=list)
    temperature: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def infonce_loss(batch: ContrastiveBatch) -> float:
    """-log( phi(q,d+) / (phi(q,d+) + sum_i phi(q,n_i)) ).

    Computed in log space; exactly 0.0 when there are no negatives.
    """
    tau = batch.temperature
    s_pos = cosine(batch.query, batch.positive) / tau
    if not batch.negatives:
        return 0.0
    scores = [s_pos] + [cosine(batch.query, n) / tau for n in batch.negatives]
    m = max(scores)
    return m + math.log(sum(math.exp(s - m) for s in scores)) - s_pos


def matryoshka_infonce(batch: ContrastiveBatch, dims: Sequence[int]) -> float:
    """Mean InfoNCE over prefix-truncated, renormalized embeddings.

    ``dims`` must be strictly increasing positive prefix lengths bounded
    by the embedding dimension. Renormalization is implicit: cosine of
    truncated vectors already ignores scale.
    """
    d = int(batch.query.shape[0])
    _validate_dims(dims, d)
    losses = []
    for k in dims:
        sub = ContrastiveBatch(
            query=batch.query[:k],
            positive=batch.positive[:k],
            negatives=[n[:k] for n in batch.negatives],
            temperature=batch.temperature,
        )
        losses.append(infonce_loss(sub))
    return sum(losses) / len(losses)


def _validate_dims(dims: Sequence[int], d: int) -> None:
    if not dims:
        raise ValueError("dims must be non-empty")
    prev = 0
    for k in dims:
        if k <= prev:
            raise ValueError("dims must be strictly increasing and positive")
        prev = k
    if prev > d:
        raise ValueError(f"prefix {prev} exceeds embedding dimension {d}")


@dataclass
class RerankBatch:
    """Raw scores for one query group: the positive and C >= 1 negatives."""

    query: str
    pos_score: float
    neg_scores: list[float]

    def __post_init__(self) -> None:
        if not self.neg_scores:
            raise ValueError("a rerank group needs at least one negative")


def mnr_loss(batch: RerankBatch) -> float:
    """Softmax cross-entropy of the positive among all candidates."""
    scores = [batch.pos_score] + list(batch.neg_scores)
    m = max(scores)
    return m + math.log(sum(math.exp(s - m) for s in scores)) - batch.pos_score


def mnr_loss_mean(batches: Sequence[RerankBatch]) -> float:
    """Dataset-level ranking loss: mean over query groups."""
    if not batches:
        raise ValueError("no rerank groups")
    return sum(mnr_loss(b) for b in batches) / len(batches)


@dataclass
class TextBatch:
    """One query group as raw texts, for gradient computation."""

    query: str
    positive: str
    negatives: list[str] = field(default_factory=list)
    temperature: float = DEFAULT_TAU


class ToyEncoder:
    """Linear map over L2-normalized hashed n-gram features.

    Forward pass: h = W x with W of shape (embed_dim, feature_dim) and x
    = unit_features(text). Deterministic given (text, W).
    """

    def __init__(self, feature_dim: int = 512, embed_dim: int = 32, seed: int = 0):
        if feature_dim < 1 or embed_dim < 1:
            raise ValueError("dimensions must be positive")
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((embed_dim, feature_dim)) / math.sqrt(
            feature_dim
        )

    def features(self, text: str) -> np.ndarray:
        return unit_features(text, self.feature_dim).astype(np.float64)

    def encode(self, text: str) -> np.ndarray:
        return self.weights @ self.features(text)

    def encode_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.empty((0, self.embed_dim))
        feats = np.stack([self.features(t) for t in texts])
        return feats @ self.weights.T


def encode_batch(batch: TextBatch, encoder: ToyEncoder) -> ContrastiveBatch:
    return ContrastiveBatch(
        query=encoder.encode(batch.query),
        positive=encoder.encode(batch.positive),
        negatives=[encoder.encode(n) for n in batch.negatives],
        temperature=batch.temperature,
    )


def _cosine_grad_parts(
    u: np.ndarray, v: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """cos(u, v) and its gradients d cos/du, d cos/dv.

    d cos/du = (v_hat - cos * u_hat) / ||u||, symmetrically for v.
    """
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine is undefined for zero vectors")
    u_hat = u / nu
    v_hat = v / nv
    c = float(np.dot(u_hat, v_hat))
    return c, (v_hat - c * u_hat) / nu, (u_hat - c * v_hat) / nv


def infonce_gradient(
    batch: TextBatch, encoder: ToyEncoder, dims: Sequence[int] | None = None
) -> tuple[float, np.ndarray]:
    """Loss and its analytic gradient w.r.t. the encoder weights.

    Both the query and document embeddings flow through the shared
    weights, so each cosine contributes two outer-product terms. With
    ``dims`` set, returns the mean over prefix-truncated losses instead
    (the prefix loss only touches the first k weight rows).
    """
    tau = batch.temperature
    x_q = encoder.features(batch.query)
    x_docs = [encoder.features(batch.positive)] + [
        encoder.features(n) for n in batch.negatives
    ]
    u_full = encoder.weights @ x_q
    v_full = [encoder.weights @ x for x in x_docs]

    d = encoder.embed_dim
    prefix_dims = list(dims) if dims is not None else [d]
    _validate_dims(prefix_dims, d)

    grad = np.zeros_like(encoder.weights)
    total_loss = 0.0
    for k in prefix_dims:
        u = u_full[:k]
        cos_parts = [_cosine_grad_parts(u, v[:k]) for v in v_full]
        scores = np.array([c / tau for c, _, _ in cos_parts])
        if len(scores) == 1:
            # No negatives: loss identically 0, flat in the weights.
            continue
        m = float(scores.max())
        exp = np.exp(scores - m)
        p = exp / exp.sum()
        loss = m + math.log(float(exp.sum())) - float(scores[0])
        total_loss += loss
        for j, (c, du, dv) in enumerate(cos_parts):
            coeff = (p[j] - (1.0 if j == 0 else 0.0)) / tau
            if coeff == 0.0:
                continue
            grad[:k] += coeff * (np.outer(du, x_q) + np.outer(dv, x_docs[j]))
    n = len(prefix_dims)
    return total_loss / n, grad / n


class ToyScorer:
    """Linear scorer over pairwise features for ranking-loss training.

    Raw score s(q, d) = w . (x_q * x_d) with elementwise-product features;
    the smallest model whose score depends jointly on both texts.
    """

    def __init__(self, feature_dim: int = 512, seed: int = 0):
        if feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        self.feature_dim = feature_dim
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal(feature_dim) / math.sqrt(feature_dim)

    def pair_features(self, query: str, doc: str) -> np.ndarray:
        return unit_features(query, self.feature_dim).astype(np.float64) * unit_features(
            doc, self.feature_dim
        ).astype(np.float64)

    def score(self, query: str, doc: str) -> float:
        return float(self.weights @ self.pair_features(query, doc))


def mnr_gradient(batch: TextBatch, scorer: ToyScorer) -> tuple[float, np.ndarray]:
    """Ranking loss and analytic gradient w.r.t. the scorer weights.

    With p = softmax(scores), dL/dw = sum_j (p_j - [j == positive]) *
    pair_features_j.
    """
    if not batch.negatives:
        raise ValueError("ranking gradient needs at least one negative")
    feats = [scorer.pair_features(batch.query, batch.positive)] + [
        scorer.pair_features(batch.query, n) for n in batch.negatives
    ]
    scores = np.array([float(scorer.weights @ x) for x in feats])
    m = float(scores.max())
    exp = np.exp(scores - m)
    p = exp / exp.sum()
    loss = m + math.log(float(exp.sum())) - float(scores[0])
    grad = np.zeros_like(scorer.weights)
    for j, x in enumerate(feats):
        grad += (p[j] - (1.0 if j == 0 else 0.0)) * x
    return loss, grad


@dataclass
class ToyTrainConfig:
    """Hyperparameters for the desk-scale trainer."""

    loss: str = "infonce"
    feature_dim: int = 512
    embed_dim: int = 32
    temperature: float = DEFAULT_TAU
    dims: tuple[int, ...] | None = None
    batch_size: int = 8
    in_batch_negatives: bool = True

    def validate(self) -> None:
        if self.loss not in ("infonce", "matryoshka", "mnr"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "matryoshka" and not self.dims:
            raise ValueError("matryoshka loss requires dims")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train_toy(
    pairs: Sequence[TrainingPair],
    steps: int = 500,
    lr: float = 0.2,
    seed: int = 0,
    config: ToyTrainConfig | None = None,
) -> tuple[ToyEncoder | ToyScorer, list[float]]:
    """Plain gradient descent over shuffled mini-batches.

    Returns the trained model and the per-step mean loss curve. With
    in-batch negatives on, every other pair's positive in the mini-batch
    joins a pair's negative set (skipping exact-text duplicates of its
    own positive). A non-finite loss aborts with the step index.
    """
    config = config or ToyTrainConfig()
    config.validate()
    if not pairs:
        raise ValueError("no training pairs")

    model: ToyEncoder | ToyScorer
    if config.loss == "mnr":
        model = ToyScorer(feature_dim=config.feature_dim, seed=seed)
    else:
        model = ToyEncoder(
            feature_dim=config.feature_dim, embed_dim=config.embed_dim, seed=seed
        )
    dims = config.dims if config.loss == "matryoshka" else None

    rng = np.random.default_rng(seed + 1)
    order = np.arange(len(pairs))
    curve: list[float] = []
    cursor = len(pairs)

    for step in range(steps):
        batch_pairs: list[TrainingPair] = []
        for _ in range(min(config.batch_size, len(pairs))):
            if cursor >= len(pairs):
                rng.shuffle(order)
                cursor = 0
            batch_pairs.append(pairs[order[cursor]])
            cursor += 1

        loss_sum = 0.0
        grad = np.zeros_like(model.weights)
        for pair in batch_pairs:
            negatives = [n.text for n in pair.negatives]
            if config.in_batch_negatives:
                negatives += [
                    other.positive
                    for other in batch_pairs
                    if other is not pair and other.positive != pair.positive
                ]
            text_batch = TextBatch(
                query=pair.query,
                positive=pair.positive,
                negatives=negatives,
                temperature=config.temperature,
            )
            if config.loss == "mnr":
                if not negatives:
                    continue
                loss, g = mnr_gradient(text_batch, model)
            else:
                loss, g = infonce_gradient(text_batch, model, dims=dims)
            loss_sum += loss
            grad += g

        mean_loss = loss_sum / len(batch_pairs)
        if not math.isfinite(mean_loss):
            raise TrainingDivergedError(step, mean_loss)
        curve.append(mean_loss)
        model.weights -= (lr / len(batch_pairs)) * grad
    return model, curve


def nearest_positive_recall(encoder: ToyEncoder, pairs: Sequence[TrainingPair]) -> float:
    """recall@1 of each query against the set of all distinct positives."""
    corpus: list[str] = []
    seen: set[str] = set()
    for p in pairs:
        if p.positive not in seen:
            seen.add(p.positive)
            corpus.append(p.positive)
    docs = encoder.encode_many(corpus)
    norms = np.linalg.norm(docs, axis=1)
    norms[norms == 0.0] = 1.0
    docs = docs / norms[:, None]
    index_of = {text: i for i, text in enumerate(corpus)}
    hits = 0
    for p in pairs:
        q = encoder.encode(p.query)
        qn = float(np.linalg.norm(q))
        if qn == 0.0:
            continue
        sims = docs @ (q / qn)
        if int(np.argmax(sims)) == index_of[p.positive]:
            hits += 1
    return hits / len(pairs)
