"""Frozen dialogue-embedding providers: hashed n-gram fallback and HTTP client."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import requests


class EncoderError(RuntimeError):
    """The embedding provider failed; callers must not silently fall back."""


@dataclass(frozen=True)
class DialogueEmbedding:
    vector: np.ndarray
    provider_id: str
    text_hash: str


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _ngram_hash(gram: str) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def hashed_ngram_vector(text: str, dim: int) -> np.ndarray:
    """Bag of character n-grams (n = 3..5) hashed into dim signed buckets, L2-normalized.

    Deterministic across processes. Texts with no n-gram of length >= 3
    (including the empty string) map to the zero vector.
    """
    vec = np.zeros(dim, dtype=np.float64)
    lowered = text.lower()
    for n in (3, 4, 5):
        for i in range(len(lowered) - n + 1):
            value = _ngram_hash(lowered[i : i + n])
            bucket = (value >> 1) % dim
            sign = 1.0 if value & 1 else -1.0
            vec[bucket] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def ngram_buckets(text: str, dim: int) -> set[int]:
    """Bucket indices a text touches; used to reason about collisions."""
    lowered = text.lower()
    return {
        (_ngram_hash(lowered[i : i + n]) >> 1) % dim
        for n in (3, 4, 5)
        for i in range(len(lowered) - n + 1)
    }


class HashedNgramEncoder:
    """Deterministic offline encoder; the default when no provider is configured."""

    def __init__(self, dim: int, cache_size: int = 4096) -> None:
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.provider_id = f"hashed-ngram-{dim}"
        self._cache: dict[str, np.ndarray] = {}
        self._cache_size = cache_size

    def encode(self, text: str) -> np.ndarray:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        vec = hashed_ngram_vector(text, self.dim)
        vec.setflags(write=False)
        if len(self._cache) >= self._cache_size:
            self._cache.clear()
        self._cache[text] = vec
        return vec


@dataclass
class HttpEmbeddingClient:
    """Embedding endpoint client; configuration comes from the environment
    (DACRS_EMBED_BASE_URL, DACRS_EMBED_MODEL, DACRS_EMBED_API_KEY) unless given.

    The vector dimension is taken from the first response when not configured.
    """

    base_url: str = ""
    model: str = ""
    api_key: str = ""
    dim: Optional[int] = None
    timeout: float = 30.0
    session: Optional[requests.Session] = None

    def __post_init__(self) -> None:
        self.base_url = self.base_url or os.environ.get("DACRS_EMBED_BASE_URL", "")
        self.model = self.model or os.environ.get("DACRS_EMBED_MODEL", "")
        self.api_key = self.api_key or os.environ.get("DACRS_EMBED_API_KEY", "")
        self.provider_id = f"http:{self.model or 'default'}"

    def encode(self, text: str) -> np.ndarray:
        if not self.base_url:
            raise EncoderError("no embedding endpoint configured")
        url = self.base_url.rstrip("/") + "/embeddings"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        client = self.session or requests
        try:
            response = client.post(
                url,
                json={"model": self.model, "input": [text]},
                headers=headers,
                timeout=self.timeout,
            )
            response.raise_for_status()
            vector = np.asarray(response.json()["data"][0]["embedding"], dtype=np.float64)
        except EncoderError:
            raise
        except Exception as exc:
            raise EncoderError(f"embedding request failed: {exc}") from exc
        if vector.ndim != 1 or vector.size == 0:
            raise EncoderError("embedding response has unexpected shape")
        if self.dim is None:
            self.dim = int(vector.size)
        elif vector.size != self.dim:
            raise EncoderError(f"expected dimension {self.dim}, got {vector.size}")
        return vector


def encode_dialogue(text: str, encoder) -> DialogueEmbedding:
    """Embed one serialized dialogue with a frozen encoder."""
    if not text or not text.strip():
        raise ValueError("dialogue text must be non-empty")
    vector = encoder.encode(text)
    return DialogueEmbedding(
        vector=np.asarray(vector, dtype=np.float64),
        provider_id=getattr(encoder, "provider_id", "unknown"),
        text_hash=text_digest(text),
    )
