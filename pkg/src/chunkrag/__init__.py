"""Chunk-level filtered retrieval-augmented generation."""
from .chunker import Chunk, ChunkerConfig, chunk_document, embed_chunks
from .embeddings import EmbeddingProviderConfig, LocalEmbedder, cosine_similarity, embed_texts
from .index import ChunkIndex, load_index, save_index
from .llm_gateway import LlmBackendConfig, MockRule, MockScript, parse_score, render, rewrite_query
from .pipeline import Answer, ChunkRAG, PipelineConfig, PipelineTrace, answer_query, build_index
from .segmentation import Document, Sentence, ingest_corpus, split_sentences

__all__ = [
    "Answer",
    "Chunk",
    "ChunkIndex",
    "ChunkRAG",
    "ChunkerConfig",
    "Document",
    "EmbeddingProviderConfig",
    "LlmBackendConfig",
    "LocalEmbedder",
    "MockRule",
    "MockScript",
    "PipelineConfig",
    "PipelineTrace",
    "Sentence",
    "answer_query",
    "build_index",
    "chunk_document",
    "cosine_similarity",
    "embed_chunks",
    "embed_texts",
    "ingest_corpus",
    "load_index",
    "parse_score",
    "render",
    "rewrite_query",
    "save_index",
    "split_sentences",
]
