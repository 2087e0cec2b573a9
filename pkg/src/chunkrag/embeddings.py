"""Embedding providers and cosine similarity.

Vectors are 1-D float64 numpy arrays normalized to unit length. A raw
all-zero vector (e.g. the empty string under the local embedder) maps to
the first basis vector so every vector stays on the unit sphere.
"""
from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from functools import lru_cache
from typing import Literal, Protocol, Sequence

import numpy as np
import requests
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

EmbeddingVector = np.ndarray

_HASH_KEY = b"chunkrag-3gram-v1"
_RETRY_STATUS = {429, 500, 502, 503, 504}


class EmbeddingError(RuntimeError):
    """Raised when an embedding provider fails; the message names the batch range."""


class EmbeddingProviderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["remote", "deterministic-local"] = "deterministic-local"
    model_name: str = "text-embedding-3-small"
    endpoint_url: str = "https://api.openai.com/v1/embeddings"
    api_key_env: str = "EMBEDDING_API_KEY"
    dim: int = 256
    batch_size: int = Field(default=64, ge=1)
    timeout: float = Field(default=30.0, gt=0)
    max_retries: int = Field(default=3, ge=0)
    backoff_base: float = Field(default=1.0, ge=0)
    max_in_flight: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _check_dim(self) -> "EmbeddingProviderConfig":
        if self.kind == "deterministic-local" and self.dim < 8:
            raise ValueError("dim must be >= 8 for the local embedder")
        return self


def to_unit(values: Sequence[float] | np.ndarray) -> EmbeddingVector:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("embedding vector must have positive dimension")
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        e0 = np.zeros_like(v)
        e0[0] = 1.0
        return e0
    return v / norm


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1]."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return min(1.0, max(-1.0, float(np.dot(a, b))))


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


def _bucket(ngram: str, dim: int) -> int:
    digest = hashlib.blake2b(ngram.encode("utf-8"), digest_size=8, key=_HASH_KEY).digest()
    return int.from_bytes(digest, "little") % dim


class LocalEmbedder:
    """Hashed character 3-gram counts, L2-normalized.

    Lowercases and pads the text with one space on each side so short words
    still produce grams. Stable across processes and platforms.
    """

    def __init__(self, dim: int = 256):
        if dim < 8:
            raise ValueError("dim must be >= 8")
        self.dim = dim
        self._cached = lru_cache(maxsize=65536)(self._embed_one)

    def _embed_one(self, text: str) -> tuple[float, ...]:
        counts = np.zeros(self.dim, dtype=np.float64)
        padded = f" {text.lower()} "
        for i in range(len(padded) - 2):
            counts[_bucket(padded[i:i + 3], self.dim)] += 1.0
        return tuple(to_unit(counts).tolist())

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [np.array(self._cached(t), dtype=np.float64) for t in texts]


_SLOTS: dict[str, threading.BoundedSemaphore] = {}
_SLOTS_LOCK = threading.Lock()


def _slots_for(url: str, limit: int) -> threading.BoundedSemaphore:
    with _SLOTS_LOCK:
        key = f"{url}#{limit}"
        if key not in _SLOTS:
            _SLOTS[key] = threading.BoundedSemaphore(limit)
        return _SLOTS[key]


class RemoteEmbedder:
    """Client for an HTTP JSON embeddings API (``{"model", "input"}`` request shape)."""

    def __init__(self, cfg: EmbeddingProviderConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self.dim: int | None = None
        self._session = session or requests.Session()
        self._slots = _slots_for(cfg.endpoint_url, cfg.max_in_flight)

    def _post(self, batch: Sequence[str], lo: int, hi: int) -> list[list[float]]:
        cfg = self.cfg
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {"model": cfg.model_name, "input": list(batch)}
        last: str = ""
        for attempt in range(cfg.max_retries + 1):
            try:
                with self._slots:
                    resp = self._session.post(
                        cfg.endpoint_url, json=payload, headers=headers, timeout=cfg.timeout
                    )
            except requests.RequestException as e:
                last = f"{type(e).__name__}: {e}"
            else:
                if resp.status_code in (401, 403):
                    raise EmbeddingError(
                        f"batch [{lo}:{hi}): authentication failed (HTTP {resp.status_code})"
                    )
                if resp.status_code in _RETRY_STATUS:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise EmbeddingError(
                        f"batch [{lo}:{hi}): HTTP {resp.status_code}: {resp.text[:300]}"
                    )
                else:
                    try:
                        data = resp.json()["data"]
                        return [item["embedding"] for item in data]
                    except (ValueError, KeyError, TypeError) as e:
                        raise EmbeddingError(f"batch [{lo}:{hi}): malformed response ({e})") from e
            if attempt < cfg.max_retries:
                time.sleep(cfg.backoff_base * 2**attempt)
        raise EmbeddingError(
            f"batch [{lo}:{hi}): giving up after {cfg.max_retries + 1} attempts ({last})"
        )

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        out: list[EmbeddingVector] = []
        bs = self.cfg.batch_size
        for lo in range(0, len(texts), bs):
            hi = min(lo + bs, len(texts))
            rows = self._post(texts[lo:hi], lo, hi)
            if len(rows) != hi - lo:
                raise EmbeddingError(
                    f"batch [{lo}:{hi}): expected {hi - lo} embeddings, got {len(rows)}"
                )
            for row in rows:
                if self.dim is None:
                    self.dim = len(row)
                if len(row) != self.dim:
                    raise EmbeddingError(
                        f"batch [{lo}:{hi}): dimension mismatch ({len(row)} != {self.dim})"
                    )
                out.append(to_unit(row))
        return out


def make_embedder(cfg: EmbeddingProviderConfig) -> Embedder:
    if cfg.kind == "deterministic-local":
        return LocalEmbedder(cfg.dim)
    return RemoteEmbedder(cfg)


def embed_texts(texts: Sequence[str], cfg: EmbeddingProviderConfig) -> list[EmbeddingVector]:
    if not texts:
        return []
    return make_embedder(cfg).embed(texts)
