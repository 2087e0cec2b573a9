"""End-to-end orchestration: index building and filtered question answering."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from pydantic import BaseModel, ConfigDict, Field

from .chunker import ChunkerConfig, chunk_document, embed_chunks
from .embeddings import Embedder, EmbeddingProviderConfig, EmbeddingVector, make_embedder
from .index import ChunkIndex, save_index
from .llm_gateway import (
    ANSWER_GENERATION,
    CANNOT_ANSWER,
    Backend,
    LlmBackendConfig,
    LlmError,
    MockScript,
    make_backend,
    render,
    rewrite_query,
)
from .rerank import RerankConfig, rerank
from .retrieval import (
    DedupResult,
    HybridConfig,
    ScoredChunk,
    combine_retrieval,
    dedup_report,
    initial_filter,
)
from .scoring import (
    ScoringConfig,
    ThresholdConfig,
    ThresholdDecision,
    apply_threshold,
    score_chunk,
    threshold_decision,
)
from .segmentation import DEFAULT_ABBREVIATIONS, CorpusError, ingest_corpus, split_sentences

logger = logging.getLogger(__name__)

TRACE_VERSION = "chunkrag-trace-v1"
STAGES = ("rewrite", "score", "reflect", "critic", "threshold", "generate")


class PipelineError(RuntimeError):
    """A stage failed; ``trace`` holds everything recorded up to the failure."""

    def __init__(self, message: str, trace: "PipelineTrace | None" = None):
        super().__init__(message)
        self.trace = trace


class SegmentationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    abbreviations: list[str] = list(DEFAULT_ABBREVIATIONS)


class IndexConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k1: float = Field(default=1.5, gt=0)
    b: float = Field(default=0.75, ge=0, le=1)


class StageBackends(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rewrite: LlmBackendConfig = LlmBackendConfig()
    score: LlmBackendConfig = LlmBackendConfig()
    reflect: LlmBackendConfig = LlmBackendConfig()
    critic: LlmBackendConfig = LlmBackendConfig()
    threshold: LlmBackendConfig = LlmBackendConfig()
    generate: LlmBackendConfig = LlmBackendConfig()


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    segmentation: SegmentationConfig = SegmentationConfig()
    chunker: ChunkerConfig = ChunkerConfig()
    embedding: EmbeddingProviderConfig = EmbeddingProviderConfig()
    index: IndexConfig = IndexConfig()
    hybrid: HybridConfig = HybridConfig()
    scoring: ScoringConfig = ScoringConfig()
    threshold: ThresholdConfig = ThresholdConfig()
    rerank: RerankConfig = RerankConfig()
    llm: StageBackends = StageBackends()
    jobs: int = Field(default=4, ge=1)

    def with_mock_backends(self, script_path: str | None) -> "PipelineConfig":
        mock = {"kind": "mock", "mock_script_path": script_path}
        llm = {s: getattr(self.llm, s).model_copy(update=mock) for s in STAGES}
        return self.model_copy(update={"llm": StageBackends(**llm)})


@dataclass
class PipelineTrace:
    config: dict[str, Any]
    original_query: str
    rewritten_query: str | None = None
    bm25_hits: list[tuple[str, float]] = field(default_factory=list)
    dense_hits: list[tuple[str, float]] = field(default_factory=list)
    combined: list[dict[str, Any]] = field(default_factory=list)
    initial_filter: list[dict[str, Any]] = field(default_factory=list)
    dedup: list[dict[str, Any]] = field(default_factory=list)
    scores: list[dict[str, Any]] = field(default_factory=list)
    threshold: dict[str, Any] | None = None
    post_threshold: list[str] = field(default_factory=list)
    rerank: list[str] = field(default_factory=list)
    generation_prompt: str | None = None
    answer: str | None = None
    used_chunks: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": TRACE_VERSION,
            "config": self.config,
            "original_query": self.original_query,
            "rewritten_query": self.rewritten_query,
            "bm25_hits": [[cid, s] for cid, s in self.bm25_hits],
            "dense_hits": [[cid, s] for cid, s in self.dense_hits],
            "combined": self.combined,
            "initial_filter": self.initial_filter,
            "dedup": self.dedup,
            "scores": self.scores,
            "threshold": self.threshold,
            "post_threshold": self.post_threshold,
            "rerank": self.rerank,
            "generation_prompt": self.generation_prompt,
            "answer": self.answer,
            "used_chunks": self.used_chunks,
            "warnings": self.warnings,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


@dataclass
class Answer:
    text: str
    used_chunks: list[str]
    trace: PipelineTrace


@dataclass
class Candidates:
    """Output of the retrieval half of the pipeline (through redundancy removal)."""

    rewritten_query: str
    query_vec: EmbeddingVector
    bm25_hits: list[tuple[str, float]]
    dense_hits: list[tuple[str, float]]
    combined: list[ScoredChunk]
    filtered: list[ScoredChunk]
    dedup: DedupResult


@dataclass
class Filtered:
    candidates: Candidates
    decision: ThresholdDecision | None
    post_threshold: list[ScoredChunk]


def build_backends(
    cfg: PipelineConfig, script: MockScript | None = None
) -> dict[str, Backend]:
    """One backend per stage; mock stages sharing a script file share the parsed script."""
    scripts: dict[str | None, MockScript] = {}
    out: dict[str, Backend] = {}
    for stage in STAGES:
        bcfg: LlmBackendConfig = getattr(cfg.llm, stage)
        if bcfg.kind == "mock":
            s = script
            if s is None:
                if bcfg.mock_script_path not in scripts and bcfg.mock_script_path:
                    scripts[bcfg.mock_script_path] = MockScript.from_file(bcfg.mock_script_path)
                s = scripts.get(bcfg.mock_script_path)
            out[stage] = make_backend(bcfg, s)
        else:
            out[stage] = make_backend(bcfg)
    return out


def _detect_format(path: Path) -> str:
    return "plain-dir" if path.is_dir() else "jsonl"


def build_index(
    corpus_path: str | Path,
    cfg: PipelineConfig | None = None,
    index_path: str | Path | None = None,
    format: str | None = None,
    embedder: Embedder | None = None,
) -> tuple[ChunkIndex, dict[str, int]]:
    """Ingest, split, embed, chunk, and index a corpus; optionally save it.

    Returns:
        The index and corpus statistics (documents, sentences, chunks,
        oversize_chunks).
    """
    cfg = cfg or PipelineConfig()
    corpus_path = Path(corpus_path)
    docs = ingest_corpus(corpus_path, format or _detect_format(corpus_path))
    embedder = embedder or make_embedder(cfg.embedding)
    abbreviations = tuple(cfg.segmentation.abbreviations)

    index = ChunkIndex(k1=cfg.index.k1, b=cfg.index.b)
    stats = {"documents": len(docs), "sentences": 0, "chunks": 0, "oversize_chunks": 0}
    for doc in docs:
        try:
            sentences = split_sentences(doc, abbreviations)
            if not sentences:
                continue
            vectors = embedder.embed([s.text for s in sentences])
            chunks = embed_chunks(chunk_document(sentences, vectors, cfg.chunker), embedder)
            index.add_chunks(chunks)
        except (CorpusError, PipelineError):
            raise
        except Exception as e:
            raise PipelineError(f"document {doc.id!r}: {type(e).__name__}: {e}") from e
        stats["sentences"] += len(sentences)
        stats["chunks"] += len(chunks)
        stats["oversize_chunks"] += sum(c.oversize for c in chunks)
    logger.info("indexed %(documents)d documents into %(chunks)d chunks", stats)
    if index_path is not None:
        save_index(index, index_path)
    return index, stats


def format_context(hits: Sequence[ScoredChunk]) -> str:
    return "\n\n".join(f"[{i}] (source: {h.id})\n{h.chunk.text}" for i, h in enumerate(hits, start=1))


class ChunkRAG:
    """Runs the filtered retrieval pipeline over a loaded index."""

    def __init__(
        self,
        index: ChunkIndex,
        cfg: PipelineConfig | None = None,
        embedder: Embedder | None = None,
        backends: dict[str, Backend] | None = None,
        script: MockScript | None = None,
    ):
        self.index = index
        self.cfg = cfg or PipelineConfig()
        self.embedder = embedder or make_embedder(self.cfg.embedding)
        self.backends = backends or build_backends(self.cfg, script)

    def _embed_query(self, text: str) -> EmbeddingVector:
        vec = self.embedder.embed([text])[0]
        if self.index.dim is not None and vec.shape[0] != self.index.dim:
            raise PipelineError(
                f"query embedding has dim {vec.shape[0]} but the index was built with dim {self.index.dim}"
            )
        return vec

    def retrieve(self, query: str, lambda_dup: float | None = None) -> Candidates:
        h = self.cfg.hybrid
        rewritten = rewrite_query(query, self.backends["rewrite"], self.cfg.llm.rewrite.fail_open)
        qvec = self._embed_query(rewritten)
        bm25_hits = self.index.bm25_search(rewritten, h.k_per_arm)
        dense_hits = self.index.dense_search(qvec, h.k_per_arm)
        combined = combine_retrieval(bm25_hits, dense_hits, h, self.index.chunks)
        filtered = initial_filter(combined, rewritten, qvec, self.index.bm25)
        report = dedup_report(filtered, h.lambda_dup if lambda_dup is None else lambda_dup)
        return Candidates(rewritten, qvec, bm25_hits, dense_hits, combined, filtered, report)

    def score(self, hits: Sequence[ScoredChunk], query: str) -> list[str]:
        """Attach relevance scores in place; returns warnings in chunk order."""
        b = self.backends

        def one(hit: ScoredChunk):
            return score_chunk(hit.chunk, query, b["score"], b["reflect"], b["critic"], self.cfg.scoring)

        if self.cfg.jobs > 1 and len(hits) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.jobs) as pool:
                results = list(pool.map(one, hits))
        else:
            results = [one(hit) for hit in hits]
        warnings: list[str] = []
        for hit, (rel, w) in zip(hits, results):
            hit.relevance = rel
            warnings.extend(f"{hit.id}: {msg}" for msg in w)
        return warnings

    def filter(self, query: str, trace: PipelineTrace | None = None) -> Filtered:
        trace = trace or PipelineTrace(self.cfg.model_dump(mode="json"), query)
        cand = self.retrieve(query)
        trace.rewritten_query = cand.rewritten_query
        trace.bm25_hits = list(cand.bm25_hits)
        trace.dense_hits = list(cand.dense_hits)
        trace.combined = [
            {"id": c.id, "retrieval_score": c.retrieval_score, "bm25": c.bm25_component, "dense": c.dense_component}
            for c in cand.combined
        ]
        trace.initial_filter = [{"id": c.id, "key": c.filter_key} for c in cand.filtered]
        trace.dedup = [
            {"id": d.chunk_id, "kept": d.kept, "max_cosine": d.max_cosine, "nearest": d.nearest_id}
            for d in cand.dedup.decisions
        ]
        kept = cand.dedup.kept
        if not kept:
            return Filtered(cand, None, [])

        trace.warnings.extend(self.score(kept, cand.rewritten_query))
        trace.scores = [
            {"id": h.id, "base": h.relevance.base, "reflect": h.relevance.reflect,
             "critic": h.relevance.critic, "combined": h.relevance.combined}
            for h in kept
        ]
        decision = threshold_decision(
            [h.relevance.combined for h in kept], self.cfg.threshold, self.backends["threshold"], trace.warnings
        )
        trace.threshold = {
            "mode": decision.mode, "mean": decision.mean, "std": decision.std,
            "variance": decision.variance, "branch": decision.branch, "threshold": decision.threshold,
        }
        post = apply_threshold(kept, decision.threshold)
        trace.post_threshold = [h.id for h in post]
        return Filtered(cand, decision, post)

    def answer(self, query: str) -> Answer:
        """Run every stage for one query and generate an answer from the surviving chunks."""
        trace = PipelineTrace(self.cfg.model_dump(mode="json"), query)
        try:
            result = self.filter(query, trace)
            final = rerank(
                result.post_threshold, result.candidates.rewritten_query, self.cfg.rerank,
                result.candidates.query_vec, trace.warnings,
            )
            trace.rerank = [h.id for h in final]
            if not final:
                text, used = CANNOT_ANSWER, []
            else:
                prompt = render(ANSWER_GENERATION, {"context": format_context(final), "query": query})
                trace.generation_prompt = prompt
                text = self.backends["generate"].complete(prompt, ANSWER_GENERATION.name).strip()
                text = text or CANNOT_ANSWER
                used = [h.id for h in final]
        except PipelineError as e:
            trace.error = str(e)
            e.trace = trace
            raise
        except (LlmError, ValueError, OSError) as e:
            trace.error = f"{type(e).__name__}: {e}"
            raise PipelineError(trace.error, trace) from e
        trace.answer = text
        trace.used_chunks = used
        return Answer(text, used, trace)


def answer_query(
    q: str,
    index: ChunkIndex,
    cfg: PipelineConfig | None = None,
    script: MockScript | None = None,
    embedder: Embedder | None = None,
) -> Answer:
    return ChunkRAG(index, cfg, embedder=embedder, script=script).answer(q)
