"""Accuracy evaluation and ablation analyses."""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .chunker import Chunk
from .pipeline import ChunkRAG, PipelineError, PipelineTrace
from .retrieval import dedup_report, mean_pairwise_cosine
from .scoring import base_score

logger = logging.getLogger(__name__)

ABLATION_FIELDS = ("threshold", "chunks_removed", "avg_chunk_length", "sim_before", "sim_after")
_SAFE_RE = re.compile(r"[^A-Za-z0-9._-]+")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class QaExample:
    id: str
    question: str
    gold_answers: tuple[str, ...]

    def __post_init__(self):
        if not self.gold_answers:
            raise DatasetError(f"example {self.id!r} has no gold answers")


def load_dataset(path: str | Path) -> list[QaExample]:
    """Read ``{"id", "question", "answers": [...]}`` JSONL records."""
    out = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(QaExample(str(rec["id"]), rec["question"], tuple(rec["answers"])))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DatasetError(f"{path}:{lineno}: bad record ({type(e).__name__}: {e})") from e
    return out


def normalize(text: str) -> str:
    return " ".join(text.casefold().split())


def is_correct(answer: str, gold_answers: Sequence[str]) -> bool:
    """Any gold answer appears in the answer after casefolding and whitespace collapse."""
    norm = normalize(answer)
    return any(normalize(g) in norm for g in gold_answers)


@dataclass
class ExampleResult:
    id: str
    question: str
    answer: str
    gold_answers: list[str]
    correct: bool
    used_chunks: list[str]
    error: str | None = None


@dataclass
class EvalReport:
    accuracy: float
    results: list[ExampleResult]
    traces: list[PipelineTrace | None] = field(default_factory=list)

    @property
    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": sum(r.correct for r in self.results),
            "total": len(self.results),
            "failures": sum(r.error is not None for r in self.results),
        }


def evaluate_accuracy(
    dataset: Sequence[QaExample],
    rag: ChunkRAG,
    jobs: int | None = None,
    scorer: Callable[[str, Sequence[str]], bool] = is_correct,
) -> EvalReport:
    """Answer every example; pipeline failures count as incorrect and never abort the run.

    ``scorer`` judges one answer against its gold strings. Swap it for a
    long-form metric when substring matching is too blunt.
    """
    if not dataset:
        raise DatasetError("dataset is empty")

    def run(ex: QaExample) -> tuple[ExampleResult, PipelineTrace | None]:
        try:
            ans = rag.answer(ex.question)
        except PipelineError as e:
            logger.error("example %s failed: %s", ex.id, e)
            return ExampleResult(ex.id, ex.question, "", list(ex.gold_answers), False, [], str(e)), e.trace
        ok = scorer(ans.text, ex.gold_answers)
        return ExampleResult(ex.id, ex.question, ans.text, list(ex.gold_answers), ok, ans.used_chunks), ans.trace

    workers = jobs or rag.cfg.jobs
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, dataset))
    else:
        outcomes = [run(ex) for ex in dataset]
    results = [r for r, _ in outcomes]
    accuracy = sum(r.correct for r in results) / len(results)
    return EvalReport(accuracy, results, [t for _, t in outcomes])


def write_eval_outputs(report: EvalReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "w", encoding="utf-8") as f:
        for r in report.results:
            f.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")
    (out / "summary.json").write_text(json.dumps(report.summary, indent=2) + "\n", encoding="utf-8")
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for i, (r, t) in enumerate(zip(report.results, report.traces)):
        if t is not None:
            t.write(traces / f"{i:04d}_{_SAFE_RE.sub('_', r.id)}.json")


@dataclass(frozen=True)
class AblationRow:
    threshold: float
    chunks_removed: int
    avg_chunk_length: float
    sim_before: float
    sim_after: float


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else 0.0


def ablate_dedup(rag: ChunkRAG, thresholds: Sequence[float], queries: Sequence[str]) -> list[AblationRow]:
    """Redundancy-removal sweep over ``thresholds`` for a fixed query set.

    Candidates are retrieved once per query; each threshold re-runs only the
    greedy dedup over them. ``avg_chunk_length`` counts whitespace tokens of
    kept chunks. Similarities are per-query mean pairwise cosines averaged
    over queries with at least two chunks (0.0 when none qualify).
    """
    for t in thresholds:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"threshold {t} outside [0, 1]")
    candidates = [rag.retrieve(q).filtered for q in queries]
    rows = []
    for lam in thresholds:
        removed = 0
        lengths: list[float] = []
        before: list[float] = []
        after: list[float] = []
        for hits in candidates:
            kept = dedup_report(hits, lam).kept
            removed += len(hits) - len(kept)
            lengths.extend(len(h.chunk.text.split()) for h in kept)
            b = mean_pairwise_cosine([h.chunk.embedding for h in hits])
            a = mean_pairwise_cosine([h.chunk.embedding for h in kept])
            if b is not None:
                before.append(b)
            if a is not None:
                after.append(a)
        rows.append(AblationRow(float(lam), removed, _mean(lengths), _mean(before), _mean(after)))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for r in rows:
            w.writerow([repr(r.threshold), r.chunks_removed, repr(r.avg_chunk_length), repr(r.sim_before), repr(r.sim_after)])


def read_ablation_csv(path: str | Path) -> list[AblationRow]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            AblationRow(
                float(rec["threshold"]), int(rec["chunks_removed"]), float(rec["avg_chunk_length"]),
                float(rec["sim_before"]), float(rec["sim_after"]),
            )
            for rec in csv.DictReader(f)
        ]


@dataclass(frozen=True)
class RetrieverComparison:
    naive_mean: float
    chunkrag_mean: float
    per_query: list[tuple[str, float, float]]


def naive_chunks(rag: ChunkRAG, query: str) -> list[Chunk]:
    """Dense top-k for the raw query with no rewriting or filtering."""
    qvec = rag.embedder.embed([query])[0]
    hits = rag.index.dense_search(qvec, rag.cfg.hybrid.k_combined)
    return [rag.index.get(cid) for cid, _ in hits]


def chunkrag_chunks(rag: ChunkRAG, query: str) -> list[Chunk]:
    """Full filtering through dynamic thresholding."""
    return [h.chunk for h in rag.filter(query).post_threshold]


def compare_retrievers(
    rag: ChunkRAG,
    queries: Sequence[str],
    naive: Callable[[ChunkRAG, str], list[Chunk]] = naive_chunks,
    filtered: Callable[[ChunkRAG, str], list[Chunk]] = chunkrag_chunks,
) -> RetrieverComparison:
    """Mean base relevance of naive vs filtered chunk sets, scored by the same backend.

    A query whose set is empty contributes 0 to that side's mean.
    """
    if not queries:
        raise ValueError("query set is empty")
    backend = rag.backends["score"]

    def mean_rel(q: str, chunks: list[Chunk]) -> float:
        return _mean([base_score(c, q, backend) for c in chunks])

    per_query = []
    for q in queries:
        per_query.append((q, mean_rel(q, naive(rag, q)), mean_rel(q, filtered(rag, q))))
    return RetrieverComparison(
        _mean([n for _, n, _ in per_query]), _mean([c for _, _, c in per_query]), per_query
    )
