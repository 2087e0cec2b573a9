"""Multi-stage LLM relevance scoring and dynamic thresholding."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .llm_gateway import (
    CRITIC,
    RELEVANCE_SCORE,
    SELF_REFLECT,
    THRESHOLD_DETERMINATION,
    Backend,
    ScoreParseError,
    parse_score,
    render,
)
from .retrieval import ScoredChunk

logger = logging.getLogger(__name__)

# absolute slack on `score >= T`; mean/std round-off can push T an ulp past a score it equals
THRESHOLD_ATOL = 1e-12

_YEAR_RE = re.compile(r"\b(?:1[0-9]|20)\d{2}\b")

Heuristic = Callable[[float, str, str], float]


@dataclass(frozen=True)
class RelevanceScore:
    base: float
    reflect: float
    critic: float
    combined: float


class ThresholdConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["statistical", "llm"] = "statistical"
    epsilon: float = Field(default=0.01, gt=0.0)


class ScoringConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    combine_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    critic_heuristics: list[str] = ["temporal_consistency"]

    @field_validator("combine_weights")
    @classmethod
    def _weights(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(w < 0 for w in v) or sum(v) <= 0:
            raise ValueError("combine_weights must be nonnegative with a positive sum")
        return v

    @field_validator("critic_heuristics")
    @classmethod
    def _known(cls, v: list[str]) -> list[str]:
        unknown = [h for h in v if h not in HEURISTICS]
        if unknown:
            raise ValueError(f"unknown critic heuristics {unknown}; known: {sorted(HEURISTICS)}")
        return v


def temporal_consistency(score: float, chunk_text: str, query: str) -> float:
    """Halve the score when the query names a year the chunk never mentions."""
    years = set(_YEAR_RE.findall(query))
    if years - set(_YEAR_RE.findall(chunk_text)):
        return score * 0.5
    return score


HEURISTICS: dict[str, Heuristic] = {"temporal_consistency": temporal_consistency}


def _text(chunk) -> str:
    return chunk if isinstance(chunk, str) else chunk.text


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def _scored_call(backend: Backend, prompt: str, template: str, warnings: list[str] | None) -> float:
    raw = backend.complete(prompt, template)
    try:
        return parse_score(raw)
    except ScoreParseError:
        pass
    raw = backend.complete(prompt, template)
    try:
        return parse_score(raw)
    except ScoreParseError:
        msg = f"{template}: unparseable score {raw[:60]!r} after retry; using 0"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return 0.0


def base_score(chunk, rewritten_query: str, backend: Backend, warnings: list[str] | None = None) -> float:
    prompt = render(RELEVANCE_SCORE, {"chunk": _text(chunk), "query": rewritten_query})
    return _scored_call(backend, prompt, RELEVANCE_SCORE.name, warnings)


def self_reflect(
    chunk, query: str, base: float, backend: Backend, warnings: list[str] | None = None
) -> float:
    prompt = render(SELF_REFLECT, {"score": f"{base:.2f}", "chunk": _text(chunk), "query": query})
    return _scored_call(backend, prompt, SELF_REFLECT.name, warnings)


def critic_eval(
    chunk,
    query: str,
    base: float,
    reflect: float,
    backend: Backend,
    heuristics: Sequence[Heuristic] = (),
    warnings: list[str] | None = None,
) -> float:
    """Critic pass, then each heuristic in order; every step is clamped to [0, 1]."""
    text = _text(chunk)
    prompt = render(
        CRITIC, {"base": f"{base:.2f}", "reflect": f"{reflect:.2f}", "chunk": text, "query": query}
    )
    score = _scored_call(backend, prompt, CRITIC.name, warnings)
    for h in heuristics:
        score = _clamp(h(score, text, query))
    return score


def combine_scores(
    base: float, reflect: float, critic: float, weights: Sequence[float] = (1.0, 1.0, 1.0)
) -> float:
    """Weighted mean of the three stage scores (unweighted by default)."""
    if base == reflect == critic:
        return base
    wb, wr, wc = weights
    return math.fsum((wb * base, wr * reflect, wc * critic)) / math.fsum(weights)


def score_chunk(
    chunk,
    query: str,
    score_backend: Backend,
    reflect_backend: Backend,
    critic_backend: Backend,
    cfg: ScoringConfig | None = None,
) -> tuple[RelevanceScore, list[str]]:
    cfg = cfg or ScoringConfig()
    warnings: list[str] = []
    base = base_score(chunk, query, score_backend, warnings)
    reflect = self_reflect(chunk, query, base, reflect_backend, warnings)
    heuristics = [HEURISTICS[name] for name in cfg.critic_heuristics]
    critic = critic_eval(chunk, query, base, reflect, critic_backend, heuristics, warnings)
    combined = combine_scores(base, reflect, critic, cfg.combine_weights)
    return RelevanceScore(base, reflect, critic, combined), warnings


@dataclass(frozen=True)
class ThresholdDecision:
    mode: str
    mean: float
    std: float
    variance: float
    branch: Literal["mean+std", "mean", "llm"]
    threshold: float


def statistical_threshold(scores: Sequence[float], epsilon: float) -> ThresholdDecision:
    """T = mean + std if the population variance is below epsilon, else mean."""
    if not scores:
        raise ValueError("cannot threshold an empty score list")
    n = len(scores)
    mu = math.fsum(scores) / n
    mu = min(max(mu, min(scores)), max(scores))
    var = math.fsum((s - mu) ** 2 for s in scores) / n
    sigma = math.sqrt(var)
    if var < epsilon:
        return ThresholdDecision("statistical", mu, sigma, var, "mean+std", mu + sigma)
    return ThresholdDecision("statistical", mu, sigma, var, "mean", mu)


def threshold_decision(
    scores: Sequence[float],
    cfg: ThresholdConfig | None = None,
    backend: Backend | None = None,
    warnings: list[str] | None = None,
) -> ThresholdDecision:
    cfg = cfg or ThresholdConfig()
    stat = statistical_threshold(scores, cfg.epsilon)
    if cfg.mode == "statistical":
        return stat
    if backend is None:
        raise ValueError("llm threshold mode needs a backend")
    prompt = render(THRESHOLD_DETERMINATION, {"scores": ", ".join(f"{s:.2f}" for s in scores)})
    raw = backend.complete(prompt, THRESHOLD_DETERMINATION.name)
    try:
        t = parse_score(raw)
    except ScoreParseError:
        msg = f"threshold_determination: unparseable {raw[:60]!r}; using statistical threshold"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return stat
    return ThresholdDecision("llm", stat.mean, stat.std, stat.variance, "llm", t)


def dynamic_threshold(
    scores: Sequence[float], cfg: ThresholdConfig | None = None, backend: Backend | None = None
) -> float:
    return threshold_decision(scores, cfg, backend).threshold


def apply_threshold(hits: Sequence[ScoredChunk], threshold: float) -> list[ScoredChunk]:
    """Keep hits whose combined score is >= threshold, in their current order."""
    for h in hits:
        if h.relevance is None:
            raise ValueError(f"chunk {h.id} has not been scored")
    return [h for h in hits if h.relevance.combined >= threshold - THRESHOLD_ATOL]
