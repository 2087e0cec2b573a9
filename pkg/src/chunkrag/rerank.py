"""Final reordering of filtered chunks before generation."""
from __future__ import annotations

import logging
import os
from typing import Literal, Sequence

import requests
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .embeddings import EmbeddingVector, cosine_similarity
from .retrieval import ScoredChunk

logger = logging.getLogger(__name__)


class RerankError(RuntimeError):
    pass


class RerankConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["remote", "local-fallback", "none"] = "local-fallback"
    model_name: str = "rerank-english-v3.0"
    endpoint_url: str | None = None
    api_key_env: str = "RERANK_API_KEY"
    top_n: int | None = Field(default=None, ge=1)
    timeout: float = Field(default=30.0, gt=0)

    @model_validator(mode="after")
    def _check_remote(self) -> "RerankConfig":
        if self.kind == "remote" and not self.endpoint_url:
            raise ValueError("remote reranker requires endpoint_url")
        return self


def _remote_order(
    hits: Sequence[ScoredChunk], query: str, cfg: RerankConfig, session: requests.Session | None
) -> list[int]:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(cfg.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    payload = {
        "model": cfg.model_name,
        "query": query,
        "documents": [h.chunk.text for h in hits],
        "top_n": cfg.top_n or len(hits),
    }
    post = (session or requests).post
    resp = post(cfg.endpoint_url, json=payload, headers=headers, timeout=cfg.timeout)
    if resp.status_code >= 400:
        raise RerankError(f"HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        results = resp.json()["results"]
        scored = [(int(r["index"]), float(r["relevance_score"])) for r in results]
    except (ValueError, KeyError, TypeError) as e:
        raise RerankError(f"malformed rerank response ({e})") from e
    order: list[int] = []
    for idx, _ in sorted(scored, key=lambda p: (-p[1], p[0])):
        if not 0 <= idx < len(hits) or idx in order:
            raise RerankError(f"rerank response has invalid or repeated index {idx}")
        order.append(idx)
    return order


def _local_order(hits: Sequence[ScoredChunk], query_vec: EmbeddingVector) -> list[int]:
    keyed = [(-cosine_similarity(query_vec, h.chunk.embedding), h.id, i) for i, h in enumerate(hits)]
    return [i for _, _, i in sorted(keyed)]


def rerank(
    hits: Sequence[ScoredChunk],
    rewritten_query: str,
    cfg: RerankConfig,
    query_vec: EmbeddingVector | None = None,
    warnings: list[str] | None = None,
    session: requests.Session | None = None,
) -> list[ScoredChunk]:
    """Reorder ``hits`` for generation and truncate to ``cfg.top_n``.

    ``remote`` failures fall back to the local cosine ordering (which needs
    ``query_vec``) and record a warning instead of raising.
    """
    if not hits:
        return []
    if cfg.kind == "none":
        order = list(range(len(hits)))
    elif cfg.kind == "remote":
        try:
            order = _remote_order(hits, rewritten_query, cfg, session)
        except (RerankError, requests.RequestException) as e:
            msg = f"rerank: remote failed ({e}); using local fallback"
            logger.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            if query_vec is None:
                order = list(range(len(hits)))
            else:
                order = _local_order(hits, query_vec)
    else:
        if query_vec is None:
            raise ValueError("local-fallback rerank needs the query embedding")
        order = _local_order(hits, query_vec)
    if cfg.top_n is not None:
        order = order[: cfg.top_n]
    return [hits[i] for i in order]
