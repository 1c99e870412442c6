"""Pluggable clients for every neural capability.

One interface (:class:`~ragforge.clients.base.ModelClient`) covers the
embedder, reranker, next-sentence scorer, generator and judge. Two
implementations ship: a deterministic in-process stub and an HTTP remote.
"""

from ragforge.clients.base import (
    ClientConfig,
    ClientError,
    DimensionDriftError,
    EmbeddingVector,
    InstructedQuery,
    JudgeKind,
    ModelClient,
    RerankScore,
    parse_instructed_query,
    render_instructed_query,
    sigmoid,
)
from ragforge.clients.remote import RemoteClient
from ragforge.clients.stub import StubClient


def make_client(config: ClientConfig | None = None) -> ModelClient:
    """Stub client for ``endpoint == "stub"``, HTTP client otherwise."""
    config = config or ClientConfig()
    if config.endpoint == "stub":
        return StubClient(config)
    return RemoteClient(config)


__all__ = [
    "ClientConfig",
    "ClientError",
    "DimensionDriftError",
    "EmbeddingVector",
    "InstructedQuery",
    "JudgeKind",
    "ModelClient",
    "RemoteClient",
    "RerankScore",
    "StubClient",
    "make_client",
    "parse_instructed_query",
    "render_instructed_query",
    "sigmoid",
]
