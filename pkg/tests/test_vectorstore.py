"""Exact-search store: full-sort oracles, isolation, persistence."""

import threading

import numpy as np
import pytest

from ragforge.vectorstore import (
    Collection,
    DimensionMismatchError,
    StoreFormatError,
    VectorRecord,
)


def unit(v):
    arr = np.asarray(v, dtype=np.float64)
    return arr / np.linalg.norm(arr)


def make_records(n, dim, rng, prefix="c", partition="public"):
    out = []
    for i in range(n):
        vec = rng.standard_normal(dim)
        out.append(VectorRecord(chunk_id=f"{prefix}{i:05d}", vector=unit(vec),
                                payload={"i": i}, partition=partition))
    return out


def full_scan_oracle(records, query, top_n, threshold=None):
    """Independent float64 cosine ranking with the documented tie-break."""
    query = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(query)
    scored = []
    for rec in records:
        v = np.asarray(rec.vector, dtype=np.float32).astype(np.float64)
        sim = float(v @ query / (np.linalg.norm(v) * qn))
        if threshold is None or sim >= threshold:
            scored.append((-sim, rec.chunk_id, rec.partition))
    scored.sort()
    return [(cid, -negsim) for negsim, cid, _ in scored[:top_n]]


class TestBasics:
    def test_insert_and_find_all(self):
        rng = np.random.default_rng(0)
        store = Collection("t", dimension=8)
        records = make_records(3, 8, rng)
        assert store.insert("public", records) == 3
        assert store.count() == 3
        hits = store.search(records[0].vector, top_n=3)
        assert {h.chunk_id for h in hits} == {r.chunk_id for r in records}

    def test_self_similarity_first(self):
        rng = np.random.default_rng(1)
        store = Collection("t", dimension=16)
        records = make_records(10, 16, rng)
        store.insert("public", records)
        hits = store.search(records[4].vector, top_n=1)
        assert hits[0].chunk_id == records[4].chunk_id
        assert hits[0].similarity == pytest.approx(1.0, abs=1e-6)

    def test_upsert_replaces(self):
        store = Collection("t", dimension=4)
        store.insert("public", [VectorRecord("a", unit([1, 0, 0, 0]))])
        assert store.insert("public", [VectorRecord("a", unit([0, 1, 0, 0]),
                                                    payload={"v": 2})]) == 1
        assert store.count() == 1
        hit = store.search(unit([0, 1, 0, 0]), top_n=1)[0]
        assert hit.similarity == pytest.approx(1.0, abs=1e-6)
        assert hit.payload == {"v": 2}

    def test_payload_returned(self):
        store = Collection("t", dimension=4)
        store.insert("p1", [VectorRecord("a", unit([1, 1, 0, 0]), payload={"text": "x"})])
        hit = store.search(unit([1, 1, 0, 0]), top_n=1)[0]
        assert hit.payload == {"text": "x"}
        assert hit.partition == "p1"

    def test_get(self):
        store = Collection("t", dimension=4)
        store.insert("public", [VectorRecord("a", unit([1, 0, 0, 0]))])
        assert store.get("public", "a") is not None
        assert store.get("public", "b") is None
        assert store.get("other", "a") is None


class TestSearchExactness:
    def test_top3_of_10_matches_full_sort(self):
        rng = np.random.default_rng(2)
        store = Collection("t", dimension=32)
        records = make_records(10, 32, rng)
        store.insert("public", records)
        query = unit(rng.standard_normal(32))
        got = [(h.chunk_id, h.similarity) for h in store.search(query, top_n=3)]
        want = full_scan_oracle(records, query, 3)
        assert [g[0] for g in got] == [w[0] for w in want]
        for (_, gs), (_, ws) in zip(got, want):
            assert gs == pytest.approx(ws, abs=1e-9)

    def test_randomized_oracle(self):
        rng = np.random.default_rng(3)
        store = Collection("t", dimension=24)
        records = make_records(500, 24, rng)
        store.insert("public", records)
        for _ in range(25):
            query = unit(rng.standard_normal(24))
            got = [h.chunk_id for h in store.search(query, top_n=7)]
            want = [w[0] for w in full_scan_oracle(records, query, 7)]
            assert got == want

    def test_threshold_filters(self):
        store = Collection("t", dimension=4)
        store.insert("public", [
            VectorRecord("hi", unit([1, 0.1, 0, 0])),
            VectorRecord("lo", unit([-1, 0, 0, 0])),
        ])
        query = unit([1, 0, 0, 0])
        hits = store.search(query, top_n=10, score_threshold=0.35)
        assert [h.chunk_id for h in hits] == ["hi"]
        for h in hits:
            assert h.similarity >= 0.35

    def test_threshold_monotone_subset(self):
        rng = np.random.default_rng(4)
        store = Collection("t", dimension=16)
        store.insert("public", make_records(100, 16, rng))
        query = unit(rng.standard_normal(16))
        loose = {h.chunk_id for h in store.search(query, top_n=100, score_threshold=-0.5)}
        tight = {h.chunk_id for h in store.search(query, top_n=100, score_threshold=0.2)}
        assert tight <= loose

    def test_tie_break_ascending_chunk_id(self):
        store = Collection("t", dimension=4)
        same = unit([1, 1, 0, 0])
        store.insert("public", [
            VectorRecord("zzz", same), VectorRecord("aaa", same), VectorRecord("mmm", same),
        ])
        hits = store.search(same, top_n=3)
        assert [h.chunk_id for h in hits] == ["aaa", "mmm", "zzz"]

    def test_top_n_larger_than_store(self):
        rng = np.random.default_rng(5)
        store = Collection("t", dimension=8)
        store.insert("public", make_records(4, 8, rng))
        assert len(store.search(unit(rng.standard_normal(8)), top_n=50)) == 4


class TestPartitions:
    def test_isolation(self):
        rng = np.random.default_rng(6)
        store = Collection("t", dimension=8)
        store.insert("alice", make_records(5, 8, rng, prefix="a", partition="alice"))
        store.insert("bob", make_records(5, 8, rng, prefix="b", partition="bob"))
        query = unit(rng.standard_normal(8))
        only_alice = store.search(query, top_n=10, scope=["alice"])
        assert only_alice and all(h.partition == "alice" for h in only_alice)

    def test_empty_scope_returns_nothing(self):
        rng = np.random.default_rng(7)
        store = Collection("t", dimension=8)
        store.insert("public", make_records(3, 8, rng))
        assert store.search(unit(rng.standard_normal(8)), top_n=5, scope=[]) == []

    def test_none_scope_searches_all(self):
        rng = np.random.default_rng(8)
        store = Collection("t", dimension=8)
        store.insert("alice", make_records(2, 8, rng, prefix="a", partition="alice"))
        store.insert("public", make_records(2, 8, rng, prefix="p"))
        hits = store.search(unit(rng.standard_normal(8)), top_n=10)
        assert {h.partition for h in hits} == {"alice", "public"}

    def test_unknown_scope_partition_ignored(self):
        rng = np.random.default_rng(9)
        store = Collection("t", dimension=8)
        store.insert("public", make_records(2, 8, rng))
        assert store.search(unit(rng.standard_normal(8)), top_n=5, scope=["ghost"]) == []

    def test_partitions_listing(self):
        rng = np.random.default_rng(10)
        store = Collection("t", dimension=8)
        store.insert("bob", make_records(1, 8, rng, partition="bob"))
        store.insert("public", make_records(1, 8, rng, prefix="p"))
        assert store.partitions == ["bob", "public"]


class TestValidation:
    def test_dimension_mismatch_rejects_whole_batch(self):
        store = Collection("t", dimension=4)
        batch = [
            VectorRecord("ok", unit([1, 0, 0, 0])),
            VectorRecord("bad", unit([1, 0, 0])),
        ]
        with pytest.raises(DimensionMismatchError) as err:
            store.insert("public", batch)
        assert "1" in str(err.value)  # names the offending record index
        assert store.count() == 0

    def test_zero_vector_rejected_under_cosine(self):
        store = Collection("t", dimension=4)
        with pytest.raises(DimensionMismatchError):
            store.insert("public", [VectorRecord("z", np.zeros(4))])

    def test_empty_partition_key_rejected(self):
        store = Collection("t", dimension=4)
        with pytest.raises(Exception):
            store.insert("", [VectorRecord("a", unit([1, 0, 0, 0]))])


class TestPersistence:
    def test_round_trip_preserves_top10(self, tmp_path):
        rng = np.random.default_rng(11)
        store = Collection("kb", dimension=16, model_tag="stub-v1")
        store.insert("public", make_records(700, 16, rng))
        store.insert("alice", make_records(300, 16, rng, prefix="a", partition="alice"))
        queries = [unit(rng.standard_normal(16)) for _ in range(20)]
        before = [
            [(h.chunk_id, h.similarity) for h in store.search(q, top_n=10)]
            for q in queries
        ]
        path = tmp_path / "kb.rfvs"
        store.persist(path)
        loaded = Collection.load(path)
        assert loaded.name == "kb"
        assert loaded.model_tag == "stub-v1"
        assert loaded.count() == 1000
        after = [
            [(h.chunk_id, h.similarity) for h in loaded.search(q, top_n=10)]
            for q in queries
        ]
        assert after == before

    def test_empty_collection_round_trip(self, tmp_path):
        store = Collection("empty", dimension=8)
        path = tmp_path / "e.rfvs"
        store.persist(path)
        loaded = Collection.load(path)
        assert loaded.count() == 0
        assert loaded.dimension == 8

    def test_truncated_file_rejected(self, tmp_path):
        rng = np.random.default_rng(12)
        store = Collection("t", dimension=8)
        store.insert("public", make_records(10, 8, rng))
        path = tmp_path / "t.rfvs"
        store.persist(path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(StoreFormatError):
            Collection.load(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        store = Collection("t", dimension=8)
        path = tmp_path / "t.rfvs"
        store.persist(path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(StoreFormatError):
            Collection.load(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.rfvs"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(StoreFormatError):
            Collection.load(path)

    def test_payload_survives_round_trip(self, tmp_path):
        store = Collection("t", dimension=4)
        store.insert("public", [VectorRecord(
            "a", unit([1, 2, 0, 0]), payload={"text": "ünïcode", "n": 3})])
        path = tmp_path / "p.rfvs"
        store.persist(path)
        rec = Collection.load(path).get("public", "a")
        assert rec.payload == {"text": "ünïcode", "n": 3}


def test_searches_never_see_partial_batches():
    rng = np.random.default_rng(13)
    store = Collection("t", dimension=8)
    batches = [make_records(50, 8, rng, prefix=f"b{k}x") for k in range(20)]
    query = unit(rng.standard_normal(8))
    seen = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            seen.append(len(store.search(query, top_n=10_000, score_threshold=-1.0)))

    thread = threading.Thread(target=reader)
    thread.start()
    for batch in batches:
        store.insert("public", batch)
    stop.set()
    thread.join()
    # every observed size is a whole multiple of the batch size
    assert all(n % 50 == 0 for n in seen), sorted(set(seen))
