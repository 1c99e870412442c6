"""Deterministic hashed lexical features.

Shared by the stub embedder and the toy encoder. Uses blake2b so feature
buckets are stable across runs, platforms and interpreter restarts (the
built-in ``hash`` is randomized per process and unusable here).
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

_WORD_RE = re.compile(r"[a-z0-9]+")


def word_tokens(text: str) -> list[str]:
    """Lowercase alphanumeric word tokens of ``text``."""
    return _WORD_RE.findall(text.lower())


def char_trigrams(text: str) -> list[str]:
    """Character trigrams of ``#`` + lowercased text + ``#``."""
    s = "#" + text.lower() + "#"
    return [s[i : i + 3] for i in range(len(s) - 2)]


def _bucket(feature: str, dim: int) -> tuple[int, float]:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
    index = int.from_bytes(digest[:4], "little") % dim
    sign = 1.0 if digest[4] & 1 else -1.0
    return index, sign


def hashed_features(text: str, dim: int) -> np.ndarray:
    """Signed hashed bag of word tokens and character trigrams.

    Each feature string ``f`` (word tokens prefixed ``w=``, trigrams
    prefixed ``c=``) contributes ``sign`` to component ``index`` where
    ``digest = blake2b(f, digest_size=8)``, ``index = digest[:4]
    (little-endian) mod dim`` and ``sign = +1 if digest[4] is odd else -1``.
    Word features carry weight 1.0, trigram features 0.5.
    """
    v = np.zeros(dim, dtype=np.float64)
    for tok in word_tokens(text):
        index, sign = _bucket("w=" + tok, dim)
        v[index] += sign
    for gram in char_trigrams(text):
        index, sign = _bucket("c=" + gram, dim)
        v[index] += 0.5 * sign
    return v


def unit_features(text: str, dim: int) -> np.ndarray:
    """L2-normalized :func:`hashed_features`; featureless text maps to e_0."""
    v = hashed_features(text, dim)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        v[0] = 1.0
        return v
    return v / norm
