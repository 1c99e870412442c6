import pytest

from ragforge.clients import ClientConfig, StubClient
from ragforge.vectorstore import Collection, VectorRecord


@pytest.fixture
def stub():
    return StubClient(ClientConfig())


@pytest.fixture
def build_store(stub):
    """Factory: (partition, chunk_id, text) triples -> populated Collection."""

    def build(triples, name="test", dimension=None):
        dim = dimension or stub.config.embed_dim
        store = Collection(name, dimension=dim, model_tag=stub.config.model_tag)
        texts = [t[2] for t in triples]
        vectors = stub.embed(texts, side="document")
        by_partition = {}
        for (partition, chunk_id, text), vec in zip(triples, vectors):
            by_partition.setdefault(partition, []).append(
                VectorRecord(chunk_id=chunk_id, vector=vec.values,
                             payload={"text": text}, partition=partition)
            )
        for partition, records in by_partition.items():
            store.insert(partition, records)
        return store

    return build
