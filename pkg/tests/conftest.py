from __future__ import annotations

import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from chunkrag.llm_gateway import MockScript

ACCEPTANCE_RESULTS: dict[str, bool] = {}


def pytest_runtest_makereport(item, call):
    if call.when == "call" and item.get_closest_marker("acceptance"):
        name = item.get_closest_marker("acceptance").args[0]
        ACCEPTANCE_RESULTS[name] = call.excinfo is None


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): exit criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")


class StubServer:
    """Local HTTP server replaying scripted (status, json body) responses."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                outer.requests.append(json.loads(body))
                outer.headers.append(dict(self.headers))
                status, payload = outer.responses.pop(0) if len(outer.responses) > 1 else outer.responses[0]
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def make(responses):
        s = StubServer(responses)
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.close()


def unit2(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([math.cos(a), math.sin(a)])


class TableEmbedder:
    """Embedder returning preset vectors by exact text; unknown texts map to ``fallback``."""

    def __init__(self, table: dict[str, np.ndarray], fallback: np.ndarray | None = None):
        self.table = table
        self.fallback = fallback
        self.dim = len(fallback) if fallback is not None else len(next(iter(table.values())))

    def embed(self, texts):
        out = []
        for t in texts:
            v = self.table.get(t, self.fallback)
            if v is None:
                raise KeyError(t)
            out.append(np.asarray(v, dtype=np.float64) / np.linalg.norm(v))
        return out


HENRY_QUERY = "What is Henry Feilden's occupation?"
HENRY_REWRITE = "Henry Feilden occupation details biography"
HENRY_ANSWER = "Henry Feilden is a prominent industrialist, as detailed in his biography."

HENRY_CORPUS = [
    {
        "id": "feilden",
        "text": (
            "Henry Feilden was a prominent industrialist in Lancashire.\n\n"
            "He owned cotton mills and ran a large textile business.\n\n"
            "Feilden also served as a Member of Parliament for the county."
        ),
        "meta": {"title": "Henry Feilden"},
    },
    {
        "id": "feilden-mirror",
        "text": "Henry Feilden was a prominent industrialist in Lancashire.",
    },
    {
        "id": "blackburn",
        "text": "Blackburn is a town in Lancashire, England. It has a cathedral and a market.",
    },
    {
        "id": "weather",
        "text": "The weather in Berlin is often cloudy in November.",
    },
]


def henry_script() -> MockScript:
    return MockScript.from_obj(
        {
            "rules": [
                {"template": "query_rewrite", "response": HENRY_REWRITE},
                {"template": "relevance_score", "pattern": "industrialist", "response": "0.95"},
                {"template": "relevance_score", "pattern": "cotton mills", "response": "0.6"},
                {"template": "relevance_score", "response": "0.1"},
                {"template": "self_reflect", "pattern": "industrialist", "response": "0.95"},
                {"template": "self_reflect", "pattern": "Your initial score was: ([0-9.]+)", "regex": True, "response": "\\1"},
                {"template": "critic", "pattern": "industrialist", "response": "0.9"},
                {"template": "critic", "pattern": "reflection score of ([0-9.]+)", "regex": True, "response": "\\1"},
                {"template": "answer_generation", "pattern": "industrialist", "response": HENRY_ANSWER},
            ],
            "default_response": "I cannot answer from the provided context.",
        }
    )


@pytest.fixture
def henry_corpus(tmp_path):
    path = tmp_path / "henry.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in HENRY_CORPUS) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def henry_script_path(tmp_path):
    path = tmp_path / "henry_mock.json"
    path.write_text(json.dumps(henry_script().to_obj()), encoding="utf-8")
    return path


# Redundancy clusters sized so removals at 0.5..0.9 come to 36, 24, 18, 16, 12:
# a cluster of size s and pairwise cosine c loses s - 1 chunks exactly when c > lambda.
TABLE_CLUSTERS = [(0.95, 4)] * 4 + [(0.85, 3)] * 2 + [(0.75, 3)] + [(0.65, 4)] * 2 + [(0.55, 5)] * 3
TABLE_SINGLETONS = 12
TABLE_LAMBDAS = (0.5, 0.6, 0.7, 0.8, 0.9)
TABLE_REMOVED = (36, 24, 18, 16, 12)


def planted_cluster_vectors(rng, dim, clusters, singletons=0):
    """Unit vectors with pairwise cosine exactly c within each cluster and 0 across clusters."""
    need = sum(1 + size for _, size in clusters) + singletons
    if need > dim:
        raise ValueError(f"need {need} orthogonal axes, have {dim}")
    axes = iter(np.linalg.qr(rng.normal(size=(dim, dim)))[0].T)
    vecs = []
    for c, size in clusters:
        hub = next(axes)
        vecs.extend(math.sqrt(c) * hub + math.sqrt(1 - c) * next(axes) for _ in range(size))
    vecs.extend(next(axes) for _ in range(singletons))
    order = rng.permutation(len(vecs))
    return [vecs[i] for i in order]


def index_from_vectors(vectors, texts=None):
    from chunkrag.chunker import Chunk
    from chunkrag.index import build_chunk_index

    chunks = []
    for i, v in enumerate(vectors):
        text = texts[i] if texts else f"chunk number {i}"
        chunks.append(Chunk(f"p::{i:04d}", "p", (i, i + 1), text, len(text), np.asarray(v), "start", False))
    return build_chunk_index(chunks)


def echo_rewrite_script(rules=(), default="0.5"):
    base = [
        {"template": "query_rewrite", "pattern": r'Original Query: "(.*)"', "regex": True, "response": r"\1"},
        {"template": "self_reflect", "pattern": r"Your initial score was: (\S+)", "regex": True, "response": r"\1"},
        {"template": "critic", "pattern": r"reflection score of (\d\.\d+)", "regex": True, "response": r"\1"},
    ]
    return MockScript.from_obj({"rules": base + list(rules), "default_response": default})


NOISE_SIGNAL_QUERIES = ["apple orchard harvest", "pruning apple trees", "apple varieties for cider"]


def noise_signal_corpus():
    signal = [
        "Apple orchards are harvested in autumn when the apples are ripe.",
        "Pruning apple trees in late winter improves the next harvest.",
        "Cider makers prefer sharp apple varieties with high tannin.",
        "An apple orchard needs pollinators during blossom.",
        "Dwarf apple rootstocks make orchards easier to harvest.",
    ]
    noise = [
        "The stock market closed higher on Tuesday.",
        "Penguins live mostly in the southern hemisphere.",
        "A new bridge opened across the river last spring.",
        "The violin has four strings tuned in fifths.",
        "Granite is an igneous rock rich in quartz.",
        "The train to the coast leaves every hour.",
        "Chess openings are studied by serious players.",
        "Volcanic ash can disrupt air travel for days.",
        "Copper wiring carries current in most houses.",
        "The library extended its opening hours.",
        "Marathon runners train for months before a race.",
        "Solar eclipses happen a few times each year.",
        "Bread dough rises as yeast ferments sugars.",
        "Harbour seals rest on rocks at low tide.",
        "Old maps often show sea monsters at the edges.",
    ]
    rows = [{"id": f"sig{i}", "text": t} for i, t in enumerate(signal)]
    rows += [{"id": f"noise{i:02d}", "text": t} for i, t in enumerate(noise)]
    return rows


def noise_signal_script():
    # relevance depends only on the chunk text: signal chunks mention apples
    return echo_rewrite_script(
        [
            {"template": "relevance_score", "pattern": r"Chunk: [^\n]*[Aa]pple", "regex": True, "response": "0.9"},
            {"template": "relevance_score", "response": "0.1"},
        ],
        default="unused",
    )
