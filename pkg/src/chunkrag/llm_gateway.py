"""Prompt templates and chat-completion backends (remote HTTP or scripted mock)."""
from __future__ import annotations

import collections
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping, Protocol

import requests
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

TemplateName = Literal[
    "query_rewrite",
    "relevance_score",
    "self_reflect",
    "critic",
    "threshold_determination",
    "answer_generation",
]

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
_NUMBER_RE = re.compile(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)")
_RETRY_STATUS = {429, 500, 502, 503, 504}


class TemplateError(ValueError):
    pass


class ScoreParseError(ValueError):
    pass


class LlmError(RuntimeError):
    pass


class LlmAuthError(LlmError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.text))


QUERY_REWRITE = PromptTemplate(
    "query_rewrite",
    "You are an AI assistant that improves user queries for better search results.\n"
    "Rewrite the following query to be more effective for document retrieval without changing its meaning.\n"
    "\n"
    'Original Query: "{query}"\n'
    "\n"
    "Rewritten Query:",
)

RELEVANCE_SCORE = PromptTemplate(
    "relevance_score",
    "You are an AI assistant tasked with determining the relevance of a text chunk to a user query.\n"
    "Analyze the provided chunk and query, then assign a relevance score between 0 and 1, "
    "where 1 means highly relevant and 0 means not relevant at all.\n"
    "\n"
    "Chunk: {chunk}\n"
    "\n"
    "User Query: {query}\n"
    "\n"
    "A single decimal number between 0 and 1, representing the final relevance score. No other text.\n"
    "\n"
    "Relevance Score (between 0 and 1):",
)

SELF_REFLECT = PromptTemplate(
    "self_reflect",
    "You have assigned a relevance score to a text chunk based on a user query.\n"
    "Your initial score was: {score}\n"
    "\n"
    "Reflect on your scoring and adjust the score if necessary. Provide the final score.\n"
    "\n"
    "Chunk: {chunk}\n"
    "\n"
    "User Query: {query}\n"
    "\n"
    "A single decimal number between 0 and 1, representing the final relevance score. No other text.\n"
    "Final Relevance Score (between 0 and 1):",
)

THRESHOLD_DETERMINATION = PromptTemplate(
    "threshold_determination",
    "Based on the user query and the following set of relevance scores, "
    "determine the optimal threshold to filter out irrelevant chunks.\n"
    "\n"
    "Relevance Scores: {scores}\n"
    "\n"
    "A single decimal number between 0 and 1, representing the final relevance score. No other text.\n"
    "Provide the optimal threshold (between 0 and 1):",
)

CRITIC = PromptTemplate(
    "critic",
    "You are a strict critic reviewing a prior relevance assessment of {base} "
    "and a reflection score of {reflect}.\n" + RELEVANCE_SCORE.text,
)

CANNOT_ANSWER = "I cannot answer from the provided context."

ANSWER_GENERATION = PromptTemplate(
    "answer_generation",
    "Answer the question using ONLY the context below. If the context is insufficient, "
    f"say '{CANNOT_ANSWER}'\n\nContext:\n{{context}}\n\nQuestion: {{query}}\n\nAnswer:",
)

TEMPLATES: dict[str, PromptTemplate] = {
    t.name: t
    for t in (QUERY_REWRITE, RELEVANCE_SCORE, SELF_REFLECT, CRITIC, THRESHOLD_DETERMINATION, ANSWER_GENERATION)
}


def render(template: PromptTemplate | str, bindings: Mapping[str, str]) -> str:
    """Substitute ``{name}`` slots exactly; no escaping, no trimming.

    Bound values are inserted verbatim and never re-scanned, so braces in a
    chunk's text are safe.
    """
    if isinstance(template, str):
        template = TEMPLATES[template]
    expected = template.placeholders
    missing = expected - set(bindings)
    extra = set(bindings) - expected
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing {sorted(missing)}")
        if extra:
            parts.append(f"unexpected {sorted(extra)}")
        raise TemplateError(f"template {template.name!r}: {', '.join(parts)}")
    return _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template.text)


class LlmBackendConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["remote", "mock"] = "remote"
    model_name: str = "gpt-4o"
    endpoint_url: str | None = "https://api.openai.com/v1/chat/completions"
    api_key_env: str = "LLM_API_KEY"
    temperature: float = Field(default=0.0, ge=0.0)
    max_retries: int = Field(default=3, ge=0)
    timeout: float = Field(default=60.0, gt=0)
    backoff_base: float = Field(default=1.0, ge=0)
    max_in_flight: int = Field(default=4, ge=1)
    requests_per_minute: int = Field(default=0, ge=0)  # 0 disables the budget
    mock_script_path: str | None = None
    fail_open: bool = True

    @model_validator(mode="after")
    def _check_remote(self) -> "LlmBackendConfig":
        if self.kind == "remote" and not self.endpoint_url:
            raise ValueError("remote backend requires endpoint_url")
        return self


class Backend(Protocol):
    def complete(self, prompt: str, template: str | None = None) -> str: ...


@dataclass(frozen=True)
class MockRule:
    response: str
    template: str | None = None
    pattern: str = ""
    regex: bool = False

    def match(self, prompt: str, template: str | None) -> str | None:
        if self.template is not None and self.template != template:
            return None
        if not self.regex:
            return self.response if self.pattern in prompt else None
        m = re.search(self.pattern, prompt)
        # regex rules may echo capture groups, e.g. response "\\1"
        return m.expand(self.response) if m else None


class MockScript:
    """Ordered rules; the first rule whose template and pattern both match wins."""

    def __init__(self, rules: list[MockRule], default_response: str | None = None):
        self.rules = list(rules)
        self.default_response = default_response

    @classmethod
    def from_obj(cls, obj: list | dict) -> "MockScript":
        if isinstance(obj, dict):
            rules_raw, default = obj.get("rules", []), obj.get("default_response")
        else:
            rules_raw, default = obj, None
        rules = []
        for i, r in enumerate(rules_raw):
            unknown = set(r) - {"response", "template", "pattern", "regex"}
            if "response" not in r or unknown:
                raise ValueError(f"mock rule {i}: needs 'response', unknown keys {sorted(unknown)}")
            rules.append(MockRule(str(r["response"]), r.get("template"), r.get("pattern", ""), bool(r.get("regex", False))))
        return cls(rules, default)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockScript":
        return cls.from_obj(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_obj(self) -> dict:
        return {
            "rules": [
                {"template": r.template, "pattern": r.pattern, "regex": r.regex, "response": r.response}
                for r in self.rules
            ],
            "default_response": self.default_response,
        }

    def respond(self, prompt: str, template: str | None = None) -> str:
        for rule in self.rules:
            out = rule.match(prompt, template)
            if out is not None:
                return out
        if self.default_response is None:
            raise LlmError(f"mock script has no rule for template {template!r} and no default")
        return self.default_response


class MockBackend:
    def __init__(self, script: MockScript):
        self.script = script
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str, template: str | None = None) -> str:
        if not prompt:
            raise ValueError("prompt must be nonempty")
        with self._lock:
            self.calls += 1
        return self.script.respond(prompt, template)


class _RateLimiter:
    def __init__(self, per_minute: int):
        self.per_minute = per_minute
        self._stamps: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.per_minute <= 0:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            time.sleep(wait)


_GLOBAL_LOCK = threading.Lock()
_GLOBAL_SLOTS: dict[int, threading.BoundedSemaphore] = {}
_GLOBAL_BUDGETS: dict[int, _RateLimiter] = {}


class RemoteChatBackend:
    """OpenAI-compatible chat completions client with exponential backoff on 429/5xx."""

    def __init__(self, cfg: LlmBackendConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self._session = session or requests.Session()
        with _GLOBAL_LOCK:
            self._slots = _GLOBAL_SLOTS.setdefault(
                cfg.max_in_flight, threading.BoundedSemaphore(cfg.max_in_flight)
            )
            self._budget = _GLOBAL_BUDGETS.setdefault(
                cfg.requests_per_minute, _RateLimiter(cfg.requests_per_minute)
            )

    def complete(self, prompt: str, template: str | None = None) -> str:
        if not prompt:
            raise ValueError("prompt must be nonempty")
        cfg = self.cfg
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": cfg.model_name,
            "temperature": cfg.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        last = ""
        for attempt in range(cfg.max_retries + 1):
            self._budget.acquire()
            try:
                with self._slots:
                    resp = self._session.post(cfg.endpoint_url, json=payload, headers=headers, timeout=cfg.timeout)
            except requests.RequestException as e:
                last = f"{type(e).__name__}: {e}"
            else:
                if resp.status_code in (401, 403):
                    raise LlmAuthError(f"authentication failed (HTTP {resp.status_code})")
                if resp.status_code in _RETRY_STATUS:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise LlmError(f"HTTP {resp.status_code}: {resp.text[:300]}")
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError) as e:
                        raise LlmError(f"malformed chat response ({e})") from e
            if attempt < cfg.max_retries:
                delay = cfg.backoff_base * 2**attempt
                logger.warning("chat completion failed (%s); retrying in %.2fs", last, delay)
                time.sleep(delay)
        raise LlmError(f"chat completion failed after {cfg.max_retries + 1} attempts ({last})")


def make_backend(cfg: LlmBackendConfig, script: MockScript | None = None) -> Backend:
    if cfg.kind == "mock":
        if script is None:
            if not cfg.mock_script_path:
                raise ValueError("mock backend requires mock_script_path or an explicit script")
            script = MockScript.from_file(cfg.mock_script_path)
        return MockBackend(script)
    return RemoteChatBackend(cfg)


def complete(prompt: str, backend: Backend | LlmBackendConfig, template: str | None = None) -> str:
    if isinstance(backend, LlmBackendConfig):
        backend = make_backend(backend)
    return backend.complete(prompt, template)


def rewrite_query(q: str, backend: Backend, fail_open: bool = True) -> str:
    """Rewrite a query for retrieval; falls back to ``q`` on an empty reply.

    With ``fail_open`` set, backend errors also fall back to ``q``.
    """
    if not q:
        raise ValueError("query must be nonempty")
    prompt = render(QUERY_REWRITE, {"query": q})
    try:
        raw = backend.complete(prompt, QUERY_REWRITE.name)
    except (LlmError, requests.RequestException) as e:
        if not fail_open:
            raise
        logger.warning("query rewrite failed, using original query: %s", e)
        return q
    cleaned = raw.strip().strip("\"'“”").strip()
    return cleaned or q


def parse_score(raw: str) -> float:
    """First decimal number in ``raw``, clamped to [0, 1]."""
    m = _NUMBER_RE.search(raw)
    if not m:
        raise ScoreParseError(f"no number in {raw[:80]!r}")
    return min(1.0, max(0.0, float(m.group(0))))
