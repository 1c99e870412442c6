"""HTTP client speaking the model-server wire protocol.

Endpoints, all POST, all JSON:

* ``/embed``    request ``{"texts": [...], "side": "...", "instruction": "..."}``
                response ``{"vectors": [[...], ...], "dim": int, "model": "..."}``
* ``/rerank``   request ``{"query": "...", "documents": [...]}``
                response ``{"raw_scores": [...]}``
* ``/nsp``      request ``{"pairs": [["a", "b"], ...]}``
                response ``{"logits": [...]}``
* ``/generate`` request ``{"prompt": "..."}``
                response ``{"text": "..."}``
* ``/judge``    request ``{"kind": "...", "inputs": {...}}``
                response ``{"value": ...}``

Each call retries ``config.retries`` times on connection errors,
timeouts, and 5xx responses, sleeping ``backoff * 2**attempt`` between
attempts. 4xx responses and malformed payloads fail immediately.
"""

from __future__ import annotations

import time
from typing import Any, Sequence

import numpy as np
import requests

from ragforge.clients.base import ClientConfig, ClientError, JudgeKind, ModelClient

_RETRIABLE_STATUS = range(500, 600)


class RemoteClient(ModelClient):
    """Talks to a model server at ``config.endpoint``."""

    def __init__(self, config: ClientConfig, session: requests.Session | None = None):
        if config.endpoint == "stub":
            raise ValueError("RemoteClient requires an http(s) endpoint")
        super().__init__(config)
        self._session = session or requests.Session()

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        url = self.config.endpoint.rstrip("/") + path
        last_error: Exception | None = None
        for attempt in range(self.config.retries):
            if attempt:
                time.sleep(self.config.backoff * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(url, json=payload, timeout=self.config.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code in _RETRIABLE_STATUS:
                last_error = ClientError(f"{url} returned {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ClientError(
                    f"{url} returned {resp.status_code}: {resp.text[:200]}",
                    retriable=False,
                )
            try:
                body = resp.json()
            except ValueError as exc:
                raise ClientError(f"{url} returned non-JSON body", retriable=False) from exc
            if not isinstance(body, dict):
                raise ClientError(f"{url} returned non-object JSON", retriable=False)
            return body
        raise ClientError(f"{url} failed after {self.config.retries} attempts: {last_error}")

    @staticmethod
    def _require(body: dict[str, Any], key: str, url_hint: str) -> Any:
        if key not in body:
            raise ClientError(f"{url_hint} response missing {key!r}", retriable=False)
        return body[key]

    def _embed_batch(
        self, texts: Sequence[str], side: str, instruction: str
    ) -> tuple[list[np.ndarray], str]:
        body = self._post(
            "/embed",
            {"texts": list(texts), "side": side, "instruction": instruction},
        )
        vectors = self._require(body, "vectors", "/embed")
        dim = self._require(body, "dim", "/embed")
        model = self._require(body, "model", "/embed")
        if len(vectors) != len(texts):
            raise ClientError(
                f"/embed returned {len(vectors)} vectors for {len(texts)} texts",
                retriable=False,
            )
        out = []
        for vec in vectors:
            arr = np.asarray(vec, dtype=np.float32)
            if arr.ndim != 1 or arr.shape[0] != dim:
                raise ClientError("/embed vector shape disagrees with dim", retriable=False)
            out.append(arr)
        return out, str(model)

    def _rerank_raw(self, query: str, documents: Sequence[str]) -> list[float]:
        body = self._post("/rerank", {"query": query, "documents": list(documents)})
        scores = self._require(body, "raw_scores", "/rerank")
        if len(scores) != len(documents):
            raise ClientError(
                f"/rerank returned {len(scores)} scores for {len(documents)} documents",
                retriable=False,
            )
        return [float(s) for s in scores]

    def nsp_batch(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        body = self._post("/nsp", {"pairs": [[a, b] for a, b in pairs]})
        logits = self._require(body, "logits", "/nsp")
        if len(logits) != len(pairs):
            raise ClientError(
                f"/nsp returned {len(logits)} logits for {len(pairs)} pairs",
                retriable=False,
            )
        return [float(x) for x in logits]

    def generate(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        body = self._post("/generate", {"prompt": prompt})
        return str(self._require(body, "text", "/generate"))

    def judge(self, kind: str, inputs: dict[str, Any]) -> Any:
        if kind not in JudgeKind.ALL:
            raise ValueError(f"unknown judge kind {kind!r}")
        body = self._post("/judge", {"kind": kind, "inputs": inputs})
        return self._require(body, "value", "/judge")
