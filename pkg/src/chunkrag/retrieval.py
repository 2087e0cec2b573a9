"""Hybrid candidate retrieval, initial re-sorting, and redundancy removal."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Protocol, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .chunker import Chunk
from .embeddings import EmbeddingVector, cosine_similarity
from .index import tokenize

if TYPE_CHECKING:
    from .scoring import RelevanceScore


class HybridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    w_bm25: float = Field(default=0.5, ge=0.0)
    w_llm: float = Field(default=0.5, ge=0.0)
    k_per_arm: int = Field(default=20, ge=1)
    k_combined: int = Field(default=10, ge=1)
    lambda_dup: float = Field(default=0.9, ge=-1.0, le=1.0)

    @model_validator(mode="after")
    def _check(self) -> "HybridConfig":
        if abs(self.w_bm25 + self.w_llm - 1.0) > 1e-9:
            raise ValueError(f"w_bm25 + w_llm must equal 1 (got {self.w_bm25 + self.w_llm})")
        if self.k_combined > 2 * self.k_per_arm:
            raise ValueError("k_combined must be <= 2 * k_per_arm")
        return self


@dataclass
class ScoredChunk:
    chunk: Chunk
    retrieval_score: float
    bm25_component: float = 0.0
    dense_component: float = 0.0
    filter_key: float | None = None
    relevance: RelevanceScore | None = field(default=None)

    @property
    def id(self) -> str:
        return self.chunk.id


def _minmax(hits: Sequence[tuple[str, float]]) -> dict[str, float]:
    if not hits:
        return {}
    scores = [s for _, s in hits]
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return {cid: 1.0 for cid, _ in hits}
    return {cid: (s - lo) / (hi - lo) for cid, s in hits}


def combine_retrieval(
    bm25_hits: Sequence[tuple[str, float]],
    dense_hits: Sequence[tuple[str, float]],
    cfg: HybridConfig,
    chunks: Mapping[str, Chunk],
) -> list[ScoredChunk]:
    """Weighted sum of per-arm min-max normalized scores over the union of hits.

    A chunk missing from an arm gets 0 for that arm. Keeps the top
    ``cfg.k_combined``, ties broken by ascending chunk id.
    """
    bm = _minmax(bm25_hits)
    dense = _minmax(dense_hits)
    out = []
    for cid in set(bm) | set(dense):
        b, d = bm.get(cid, 0.0), dense.get(cid, 0.0)
        out.append(ScoredChunk(chunks[cid], cfg.w_bm25 * b + cfg.w_llm * d, b, d))
    out.sort(key=lambda h: (-h.retrieval_score, h.id))
    return out[: cfg.k_combined]


class CorpusStats(Protocol):
    @property
    def n_docs(self) -> int: ...

    def df(self, term: str) -> int: ...


def tfidf_vector(text: str, stats: CorpusStats) -> dict[str, float]:
    """Raw term frequency times ln(N/df); terms unseen in the corpus get weight 0."""
    n = stats.n_docs
    vec = {}
    for term, tf in Counter(tokenize(text)).items():
        df = stats.df(term)
        if df > 0:
            vec[term] = tf * math.log(n / df)
    return vec


def sparse_cosine(a: Mapping[str, float], b: Mapping[str, float]) -> float:
    if len(a) > len(b):
        a, b = b, a
    dot = math.fsum(w * b[t] for t, w in a.items() if t in b)
    na = math.sqrt(math.fsum(w * w for w in a.values()))
    nb = math.sqrt(math.fsum(w * w for w in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return min(1.0, max(-1.0, dot / (na * nb)))


def initial_filter(
    hits: Sequence[ScoredChunk],
    rewritten_query: str,
    query_vec: EmbeddingVector,
    stats: CorpusStats,
) -> list[ScoredChunk]:
    """Re-sort candidates by 0.5 * TF-IDF cosine + 0.5 * embedding cosine to the query.

    Nothing is dropped here. The sort is stable, so equal keys keep retrieval order.
    """
    q = tfidf_vector(rewritten_query, stats)
    for h in hits:
        lexical = sparse_cosine(q, tfidf_vector(h.chunk.text, stats))
        h.filter_key = 0.5 * lexical + 0.5 * cosine_similarity(query_vec, h.chunk.embedding)
    return sorted(hits, key=lambda h: -h.filter_key)


@dataclass(frozen=True)
class DedupDecision:
    chunk_id: str
    max_cosine: float | None  # vs chunks kept before it; None when nothing was kept yet
    nearest_id: str | None
    kept: bool


@dataclass
class DedupResult:
    kept: list[ScoredChunk]
    decisions: list[DedupDecision]

    @property
    def dropped(self) -> list[DedupDecision]:
        return [d for d in self.decisions if not d.kept]


def dedup_report(hits: Sequence[ScoredChunk], lambda_dup: float) -> DedupResult:
    kept: list[ScoredChunk] = []
    decisions = []
    for h in hits:
        best, nearest = None, None
        for k in kept:
            c = cosine_similarity(h.chunk.embedding, k.chunk.embedding)
            if best is None or c > best:
                best, nearest = c, k.id
        keep = best is None or best <= lambda_dup
        decisions.append(DedupDecision(h.id, best, nearest, keep))
        if keep:
            kept.append(h)
    return DedupResult(kept, decisions)


def dedup(hits: Sequence[ScoredChunk], lambda_dup: float) -> list[ScoredChunk]:
    """Greedy scan in rank order; keep a hit iff its max cosine to kept hits is <= lambda_dup."""
    return dedup_report(hits, lambda_dup).kept


def mean_pairwise_cosine(vectors: Sequence[EmbeddingVector]) -> float | None:
    """Mean cosine over unordered pairs; None for fewer than two vectors."""
    if len(vectors) < 2:
        return None
    sims = [
        cosine_similarity(vectors[i], vectors[j])
        for i in range(len(vectors))
        for j in range(i + 1, len(vectors))
    ]
    return math.fsum(sims) / len(sims)
