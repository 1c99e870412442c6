"""Embedded partitioned vector store with exact search.

Vectors live in per-partition contiguous float32 matrices; search is an
exact full scan scored in float64 blocks. Partitions are keyed by user id
with ``"public"`` reserved for the shared library. Writes are serialized
and publish fully built partition snapshots, so a concurrent search never
observes a partially applied batch.

On-disk format (single file, little-endian):

* magic ``b"RFVS"``, version u32 (currently 1)
* dimension u32, metric u8 (0 = cosine, 1 = inner product)
* name: u16 length + utf-8; model_tag: u16 length + utf-8 (0 = unset)
* partition count u32, then per partition:
  key (u16 + utf-8), record count u32, then per record:
  chunk_id (u16 + utf-8), payload JSON (u32 + utf-8), dimension * f32.

Writes go to a temp file in the target directory and are renamed into
place, so a crash never leaves a partially written store behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Iterator, Sequence

import numpy as np

PUBLIC_PARTITION = "public"

MAGIC = b"RFVS"
FORMAT_VERSION = 1

# Rows scored per float64 block during a scan.
SCORE_BLOCK_ROWS = 8192


class Metric:
    COSINE = "cosine"
    INNER_PRODUCT = "inner_product"

    ALL = (COSINE, INNER_PRODUCT)

    _CODES = {COSINE: 0, INNER_PRODUCT: 1}
    _NAMES = {0: COSINE, 1: INNER_PRODUCT}


class StoreError(Exception):
    """Vector store failure."""


class DimensionMismatchError(StoreError):
    """A record's vector length disagrees with the collection dimension."""

    def __init__(self, message: str, record_index: int):
        super().__init__(f"record {record_index}: {message}")
        self.record_index = record_index


class StoreFormatError(StoreError):
    """On-disk data is not a readable store file."""


def validate_partition_key(value: str) -> str:
    if not isinstance(value, str) or not value:
        raise StoreError("partition key must be a non-empty string")
    return value


@dataclass
class VectorRecord:
    """One stored embedding plus its chunk payload."""

    chunk_id: str
    vector: np.ndarray
    payload: dict[str, Any] = field(default_factory=dict)
    partition: str = PUBLIC_PARTITION


@dataclass
class RetrievalResult:
    """One search hit; similarity is cosine or inner product per metric."""

    chunk_id: str
    similarity: float
    partition: str
    payload: dict[str, Any]


class _Partition:
    """Immutable-after-publish snapshot of one partition's records."""

    __slots__ = ("ids", "matrix", "payloads", "row_of", "inv_norms")

    def __init__(
        self,
        ids: list[str],
        matrix: np.ndarray,
        payloads: list[dict[str, Any]],
        metric: str,
    ):
        self.ids = ids
        self.matrix = matrix
        self.payloads = payloads
        self.row_of = {cid: i for i, cid in enumerate(ids)}
        if metric == Metric.COSINE and len(ids):
            norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
            self.inv_norms = 1.0 / norms
        else:
            self.inv_norms = np.ones(len(ids), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.ids)


def _empty_partition(dimension: int, metric: str) -> _Partition:
    return _Partition([], np.empty((0, dimension), dtype=np.float32), [], metric)


class Collection:
    """Named set of partitioned vectors under one metric and dimension."""

    def __init__(
        self,
        name: str,
        dimension: int,
        metric: str = Metric.COSINE,
        model_tag: str = "",
    ):
        if dimension <= 0:
            raise StoreError("dimension must be positive")
        if metric not in Metric.ALL:
            raise StoreError(f"unknown metric {metric!r}")
        self.name = name
        self.dimension = int(dimension)
        self.metric = metric
        self.model_tag = model_tag
        self._partitions: dict[str, _Partition] = {}
        self._write_lock = threading.Lock()

    @property
    def partitions(self) -> list[str]:
        return sorted(self._partitions)

    def __len__(self) -> int:
        return sum(len(p) for p in self._partitions.values())

    def count(self, partition: str | None = None) -> int:
        if partition is None:
            return len(self)
        part = self._partitions.get(partition)
        return len(part) if part else 0

    def insert(self, partition: str, records: Sequence[VectorRecord]) -> int:
        """Insert (or replace, by chunk_id) records into one partition.

        The whole batch is validated before anything is published: a
        dimension mismatch or, under cosine, a zero vector rejects the
        batch citing the offending record index. Duplicate chunk_ids
        within the batch resolve to the last occurrence.
        """
        validate_partition_key(partition)
        prepared: list[tuple[str, np.ndarray, dict[str, Any]]] = []
        for i, rec in enumerate(records):
            vec = np.asarray(rec.vector, dtype=np.float32)
            if vec.ndim != 1 or vec.shape[0] != self.dimension:
                raise DimensionMismatchError(
                    f"vector has shape {tuple(vec.shape)}, expected ({self.dimension},)",
                    record_index=i,
                )
            if self.metric == Metric.COSINE and not np.any(vec):
                raise DimensionMismatchError(
                    "zero vector is not allowed under the cosine metric",
                    record_index=i,
                )
            prepared.append((rec.chunk_id, vec, dict(rec.payload)))

        with self._write_lock:
            old = self._partitions.get(partition) or _empty_partition(
                self.dimension, self.metric
            )
            ids = list(old.ids)
            payloads = list(old.payloads)
            rows = [old.matrix]
            row_of = dict(old.row_of)
            replaced_rows: dict[int, np.ndarray] = {}
            appended: list[np.ndarray] = []
            for cid, vec, payload in prepared:
                if cid in row_of:
                    row = row_of[cid]
                    replaced_rows[row] = vec
                    payloads[row] = payload
                else:
                    row_of[cid] = len(ids)
                    ids.append(cid)
                    payloads.append(payload)
                    appended.append(vec)
            matrix = old.matrix
            if replaced_rows:
                matrix = matrix.copy()
                for row, vec in replaced_rows.items():
                    matrix[row] = vec
            if appended:
                matrix = np.vstack([matrix, np.stack(appended)])
            self._partitions[partition] = _Partition(ids, matrix, payloads, self.metric)
        return len(prepared)

    def search(
        self,
        query_vector: np.ndarray,
        top_n: int,
        score_threshold: float | None = None,
        scope: Sequence[str] | None = None,
    ) -> list[RetrievalResult]:
        """Exact top-N scan over the scoped partitions.

        Results are filtered to similarity >= score_threshold, sorted by
        similarity descending with ties broken by ascending chunk_id
        (then partition key). ``scope=None`` means all partitions; an
        empty scope, or scope naming only absent partitions, yields an
        empty result.
        """
        if top_n < 1:
            raise StoreError("top_n must be >= 1")
        q = np.asarray(query_vector, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dimension:
            raise StoreError(
                f"query has shape {tuple(q.shape)}, expected ({self.dimension},)"
            )
        if self.metric == Metric.COSINE:
            qn = float(np.linalg.norm(q))
            if qn == 0.0:
                raise StoreError("zero query vector is undefined under cosine")
            q = q / qn

        snapshot = self._partitions
        # Scope names a set of partitions; repeated keys must not
        # duplicate results.
        keys = sorted(snapshot) if scope is None else list(dict.fromkeys(scope))

        sim_parts: list[np.ndarray] = []
        id_parts: list[np.ndarray] = []
        key_parts: list[np.ndarray] = []
        sources: list[tuple[_Partition, int]] = []
        for key in keys:
            part = snapshot.get(key)
            if not part or not len(part):
                continue
            sims = np.empty(len(part), dtype=np.float64)
            for start in range(0, len(part), SCORE_BLOCK_ROWS):
                block = part.matrix[start : start + SCORE_BLOCK_ROWS]
                sims[start : start + block.shape[0]] = block.astype(np.float64) @ q
            if self.metric == Metric.COSINE:
                sims *= part.inv_norms
            if score_threshold is not None:
                keep = np.flatnonzero(sims >= score_threshold)
            else:
                keep = np.arange(len(part))
            if not keep.size:
                continue
            sim_parts.append(sims[keep])
            id_parts.append(np.asarray(part.ids, dtype=object)[keep])
            key_parts.append(np.full(keep.size, key, dtype=object))
            sources.append((part, keep.size))

        if not sim_parts:
            return []
        sims = np.concatenate(sim_parts)
        ids = np.concatenate(id_parts)
        part_keys = np.concatenate(key_parts)
        order = np.lexsort((part_keys, ids, -sims))[:top_n]

        results: list[RetrievalResult] = []
        for idx in order:
            key = part_keys[idx]
            part = snapshot[key]
            row = part.row_of[ids[idx]]
            results.append(
                RetrievalResult(
                    chunk_id=str(ids[idx]),
                    similarity=float(sims[idx]),
                    partition=str(key),
                    payload=part.payloads[row],
                )
            )
        return results

    def iter_records(self, scope: Sequence[str] | None = None) -> Iterator[VectorRecord]:
        """Yield stored records, partition by partition, insertion order."""
        snapshot = self._partitions
        keys = sorted(snapshot) if scope is None else list(dict.fromkeys(scope))
        for key in keys:
            part = snapshot.get(key)
            if not part:
                continue
            for i, cid in enumerate(part.ids):
                yield VectorRecord(
                    chunk_id=cid,
                    vector=part.matrix[i].copy(),
                    payload=part.payloads[i],
                    partition=key,
                )

    def get(self, partition: str, chunk_id: str) -> VectorRecord | None:
        part = self._partitions.get(partition)
        if not part or chunk_id not in part.row_of:
            return None
        row = part.row_of[chunk_id]
        return VectorRecord(
            chunk_id=chunk_id,
            vector=part.matrix[row].copy(),
            payload=part.payloads[row],
            partition=partition,
        )

    def persist(self, path: str | Path) -> None:
        """Write the collection to ``path`` atomically."""
        path = Path(path)
        snapshot = dict(self._partitions)
        fd, tmp_name = tempfile.mkstemp(
            prefix=path.name + ".", suffix=".tmp", dir=path.parent or Path(".")
        )
        try:
            with os.fdopen(fd, "wb") as fh:
                self._write_file(fh, snapshot)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp_name, path)
        except BaseException:
            try:
                os.unlink(tmp_name)
            except OSError:
                pass
            raise

    def _write_file(self, fh: BinaryIO, snapshot: dict[str, _Partition]) -> None:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIB", FORMAT_VERSION, self.dimension, Metric._CODES[self.metric]))
        _write_str16(fh, self.name)
        _write_str16(fh, self.model_tag)
        fh.write(struct.pack("<I", len(snapshot)))
        for key in sorted(snapshot):
            part = snapshot[key]
            _write_str16(fh, key)
            fh.write(struct.pack("<I", len(part)))
            for i, cid in enumerate(part.ids):
                _write_str16(fh, cid)
                payload = json.dumps(
                    part.payloads[i], ensure_ascii=False, separators=(",", ":")
                ).encode("utf-8")
                fh.write(struct.pack("<I", len(payload)))
                fh.write(payload)
                fh.write(part.matrix[i].astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Collection":
        """Read a persisted collection; any truncation or corruption raises
        :class:`StoreFormatError` and nothing partial is returned."""
        path = Path(path)
        try:
            fh = open(path, "rb")
        except OSError as exc:
            raise StoreError(f"cannot open {path}: {exc}") from exc
        with fh:
            magic = _read_exact(fh, 4)
            if magic != MAGIC:
                raise StoreFormatError(f"{path} is not a vector store file")
            version, dimension, metric_code = struct.unpack("<IIB", _read_exact(fh, 9))
            if version != FORMAT_VERSION:
                raise StoreFormatError(
                    f"unsupported format version {version} (supported: {FORMAT_VERSION})"
                )
            if metric_code not in Metric._NAMES:
                raise StoreFormatError(f"unknown metric code {metric_code}")
            name = _read_str16(fh)
            model_tag = _read_str16(fh)
            coll = cls(
                name=name,
                dimension=dimension,
                metric=Metric._NAMES[metric_code],
                model_tag=model_tag,
            )
            (partition_count,) = struct.unpack("<I", _read_exact(fh, 4))
            vec_bytes = dimension * 4
            for _ in range(partition_count):
                key = _read_str16(fh)
                (record_count,) = struct.unpack("<I", _read_exact(fh, 4))
                ids: list[str] = []
                payloads: list[dict[str, Any]] = []
                vectors = np.empty((record_count, dimension), dtype=np.float32)
                for i in range(record_count):
                    ids.append(_read_str16(fh))
                    (plen,) = struct.unpack("<I", _read_exact(fh, 4))
                    try:
                        payloads.append(json.loads(_read_exact(fh, plen)))
                    except ValueError as exc:
                        raise StoreFormatError(f"bad payload JSON: {exc}") from exc
                    vectors[i] = np.frombuffer(_read_exact(fh, vec_bytes), dtype="<f4")
                coll._partitions[key] = _Partition(
                    ids, vectors, payloads, coll.metric
                )
            if fh.read(1):
                raise StoreFormatError(f"{path} has trailing bytes")
        return coll


def _write_str16(fh: BinaryIO, value: str) -> None:
    data = value.encode("utf-8")
    if len(data) > 0xFFFF:
        raise StoreError("string field exceeds 65535 bytes")
    fh.write(struct.pack("<H", len(data)))
    fh.write(data)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise StoreFormatError("unexpected end of file")
    return data


def _read_str16(fh: BinaryIO) -> str:
    (length,) = struct.unpack("<H", _read_exact(fh, 2))
    try:
        return _read_exact(fh, length).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise StoreFormatError(f"bad utf-8 in string field: {exc}") from exc
