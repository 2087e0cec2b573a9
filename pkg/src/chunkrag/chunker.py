"""Greedy semantic chunking of consecutive sentences."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Literal, Sequence

from pydantic import BaseModel, ConfigDict, Field

from .embeddings import (
    Embedder,
    EmbeddingProviderConfig,
    EmbeddingVector,
    cosine_similarity,
    make_embedder,
)
from .segmentation import Sentence

BoundaryReason = Literal["start", "similarity", "cap"]


class ChunkerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    theta: float = Field(default=0.8, ge=0.0, le=1.0)
    max_chars: int = Field(default=500, ge=1)


@dataclass(frozen=True)
class Chunk:
    id: str
    doc_id: str
    sentence_range: tuple[int, int]
    text: str
    char_len: int
    embedding: EmbeddingVector | None = field(default=None, compare=False, repr=False)
    # why this chunk was opened: first sentence, similarity drop, or size cap
    boundary: BoundaryReason = "start"
    oversize: bool = False

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "doc_id": self.doc_id,
            "sentence_range": list(self.sentence_range),
            "text": self.text,
            "char_len": self.char_len,
            "boundary": self.boundary,
            "oversize": self.oversize,
        }

    @classmethod
    def from_record(cls, rec: dict, embedding: EmbeddingVector | None = None) -> "Chunk":
        return cls(
            id=rec["id"],
            doc_id=rec["doc_id"],
            sentence_range=(int(rec["sentence_range"][0]), int(rec["sentence_range"][1])),
            text=rec["text"],
            char_len=int(rec["char_len"]),
            embedding=embedding,
            boundary=rec.get("boundary", "start"),
            oversize=bool(rec.get("oversize", False)),
        )


def chunk_id(doc_id: str, ordinal: int) -> str:
    return f"{doc_id}::{ordinal:04d}"


def chunk_document(
    sentences: Sequence[Sentence],
    sentence_embeddings: Sequence[EmbeddingVector],
    cfg: ChunkerConfig | None = None,
) -> list[Chunk]:
    """Group consecutive sentences into chunks.

    A new chunk starts when the cosine between the previous sentence and the
    candidate drops below ``cfg.theta``, or when appending the candidate
    (plus one joining space) would exceed ``cfg.max_chars``. A sentence that
    is longer than the cap on its own becomes a single oversize chunk.
    """
    cfg = cfg or ChunkerConfig()
    if len(sentences) != len(sentence_embeddings):
        raise ValueError(
            f"got {len(sentences)} sentences but {len(sentence_embeddings)} embeddings"
        )
    if not sentences:
        return []

    groups: list[tuple[int, int, BoundaryReason]] = []
    start, reason = 0, "start"
    length = len(sentences[0].text)
    for i in range(1, len(sentences)):
        sim = cosine_similarity(sentence_embeddings[i - 1], sentence_embeddings[i])
        if sim < cfg.theta:
            groups.append((start, i, reason))
            start, reason, length = i, "similarity", len(sentences[i].text)
        elif length + 1 + len(sentences[i].text) > cfg.max_chars:
            groups.append((start, i, reason))
            start, reason, length = i, "cap", len(sentences[i].text)
        else:
            length += 1 + len(sentences[i].text)
    groups.append((start, len(sentences), reason))

    doc_id = sentences[0].doc_id
    chunks = []
    for ordinal, (lo, hi, why) in enumerate(groups):
        text = " ".join(s.text for s in sentences[lo:hi])
        chunks.append(
            Chunk(
                id=chunk_id(doc_id, ordinal),
                doc_id=doc_id,
                sentence_range=(sentences[lo].index, sentences[hi - 1].index + 1),
                text=text,
                char_len=len(text),
                boundary=why,
                oversize=len(text) > cfg.max_chars,
            )
        )
    return chunks


def embed_chunks(
    chunks: Sequence[Chunk], provider: Embedder | EmbeddingProviderConfig
) -> list[Chunk]:
    """Attach an embedding of each chunk's full text, preserving order."""
    if not chunks:
        return []
    embedder = make_embedder(provider) if isinstance(provider, EmbeddingProviderConfig) else provider
    vectors = embedder.embed([c.text for c in chunks])
    return [dataclasses.replace(c, embedding=v) for c, v in zip(chunks, vectors)]
