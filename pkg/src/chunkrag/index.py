"""Chunk store with exact dense search, Okapi BM25, and JSON persistence."""
from __future__ import annotations

import bisect
import json
import math
import re
import threading
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chunker import Chunk
from .embeddings import EmbeddingVector

INDEX_VERSION = "chunkrag-index-v1"

_TOKEN_RE = re.compile(r"[^\W_]+")


class ChunkIndexError(Exception):
    """Base class for index failures."""


class DuplicateChunkError(ChunkIndexError):
    pass


class IndexFormatError(ChunkIndexError):
    """Raised for version mismatches and unreadable/truncated index files."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric characters, drop empties."""
    return _TOKEN_RE.findall(text.lower())


class VectorIndex:
    def __init__(self, dim: int | None = None):
        self.dim = dim
        self.ids: list[str] = []
        self._rows: list[EmbeddingVector] = []
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def add(self, chunk_id: str, vec: EmbeddingVector) -> None:
        if self.dim is None:
            self.dim = int(vec.shape[0])
        elif vec.shape != (self.dim,):
            raise ValueError(f"chunk {chunk_id}: dimension {vec.shape[0]} != index dim {self.dim}")
        self.ids.append(chunk_id)
        self._rows.append(np.asarray(vec, dtype=np.float64))
        self._matrix = None

    def search(self, query_vec: EmbeddingVector, k: int) -> list[tuple[str, float]]:
        """Exact top-k by cosine; ties broken by ascending chunk id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.ids:
            return []
        if query_vec.shape != (self.dim,):
            raise ValueError(f"query dimension {query_vec.shape[0]} != index dim {self.dim}")
        if self._matrix is None:
            self._matrix = np.vstack(self._rows)
        sims = np.clip(self._matrix @ query_vec, -1.0, 1.0)
        ranked = sorted(zip(self.ids, sims.tolist()), key=lambda p: (-p[1], p[0]))
        return ranked[:k]


class Bm25Index:
    def __init__(self, k1: float = 1.5, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_lengths: dict[str, int] = {}

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    @property
    def avgdl(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return math.fsum(self.doc_lengths.values()) / len(self.doc_lengths)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def add(self, chunk_id: str, text: str) -> None:
        tokens = tokenize(text)
        self.doc_lengths[chunk_id] = len(tokens)
        for term, tf in Counter(tokens).items():
            bisect.insort(self.postings.setdefault(term, []), (chunk_id, tf))

    def search(self, query_text: str, k: int) -> list[tuple[str, float]]:
        """Okapi BM25 over query tokens (repeats count); zero scores are omitted."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.doc_lengths:
            return []
        avgdl = self.avgdl
        scores: dict[str, float] = {}
        for term in tokenize(query_text):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for cid, tf in plist:
                dl = self.doc_lengths[cid]
                norm = self.k1 * (1.0 - self.b + self.b * dl / avgdl) if avgdl > 0 else self.k1
                scores[cid] = scores.get(cid, 0.0) + idf * tf * (self.k1 + 1.0) / (tf + norm)
        ranked = sorted(
            ((cid, s) for cid, s in scores.items() if s > 0.0), key=lambda p: (-p[1], p[0])
        )
        return ranked[:k]


class ChunkIndex:
    """Embedded chunks indexed for dense and lexical retrieval.

    Many concurrent readers or one writer: ``add_chunks`` takes a lock, reads don't.
    """

    def __init__(self, dim: int | None = None, k1: float = 1.5, b: float = 0.75):
        self.chunks: dict[str, Chunk] = {}
        self.vectors = VectorIndex(dim)
        self.bm25 = Bm25Index(k1, b)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def dim(self) -> int | None:
        return self.vectors.dim

    def add_chunks(self, chunks: Iterable[Chunk]) -> None:
        chunks = list(chunks)
        with self._lock:
            seen = set(self.chunks)
            for c in chunks:
                if c.embedding is None:
                    raise ValueError(f"chunk {c.id} has no embedding")
                if c.id in seen:
                    raise DuplicateChunkError(f"duplicate chunk id {c.id!r}")
                if self.vectors.dim is not None and c.embedding.shape != (self.vectors.dim,):
                    raise ValueError(
                        f"chunk {c.id}: dimension {c.embedding.shape[0]} != index dim {self.vectors.dim}"
                    )
                seen.add(c.id)
            for c in chunks:
                self.chunks[c.id] = c
                self.vectors.add(c.id, c.embedding)
                self.bm25.add(c.id, c.text)

    def dense_search(self, query_vec: EmbeddingVector, k: int) -> list[tuple[str, float]]:
        return self.vectors.search(query_vec, k)

    def bm25_search(self, query_text: str, k: int) -> list[tuple[str, float]]:
        return self.bm25.search(query_text, k)

    def get(self, chunk_id: str) -> Chunk:
        return self.chunks[chunk_id]

    def to_dict(self) -> dict:
        return {
            "version": INDEX_VERSION,
            "dim": self.vectors.dim,
            "chunks": [c.to_record() for c in self.chunks.values()],
            "vectors": {cid: self.chunks[cid].embedding.tolist() for cid in self.vectors.ids},
            "bm25": {
                "k1": self.bm25.k1,
                "b": self.bm25.b,
                "postings": {t: [[cid, tf] for cid, tf in pl] for t, pl in self.bm25.postings.items()},
                "doc_lengths": self.bm25.doc_lengths,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChunkIndex":
        if not isinstance(data, dict):
            raise IndexFormatError("index file must contain a JSON object")
        version = data.get("version")
        if version != INDEX_VERSION:
            raise IndexFormatError(f"index version {version!r} is not {INDEX_VERSION!r}")
        try:
            bm = data["bm25"]
            index = cls(data["dim"], float(bm["k1"]), float(bm["b"]))
            for rec in data["chunks"]:
                vec = np.asarray(data["vectors"][rec["id"]], dtype=np.float64)
                chunk = Chunk.from_record(rec, embedding=vec)
                index.chunks[chunk.id] = chunk
                index.vectors.add(chunk.id, vec)
            index.bm25.postings = {
                t: [(cid, int(tf)) for cid, tf in pl] for t, pl in bm["postings"].items()
            }
            index.bm25.doc_lengths = {cid: int(n) for cid, n in bm["doc_lengths"].items()}
        except (KeyError, TypeError, ValueError) as e:
            raise IndexFormatError(f"malformed index file ({type(e).__name__}: {e})") from e
        if set(index.bm25.doc_lengths) != set(index.chunks):
            raise IndexFormatError("bm25 doc_lengths do not match the chunk store")
        return index


def save_index(index: ChunkIndex, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(index.to_dict()), encoding="utf-8")
    tmp.replace(path)


def load_index(path: str | Path) -> ChunkIndex:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise IndexFormatError(f"{path}: truncated or invalid JSON ({e.msg} at char {e.pos})") from e
    except (OSError, UnicodeDecodeError) as e:
        raise IndexFormatError(f"{path}: unreadable ({e})") from e
    return ChunkIndex.from_dict(data)


def build_chunk_index(chunks: Sequence[Chunk], dim: int | None = None) -> ChunkIndex:
    index = ChunkIndex(dim)
    index.add_chunks(chunks)
    return index
