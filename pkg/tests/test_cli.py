import csv
import json

import pytest

from chunkrag.cli import OVERRIDES, ConfigError, build_parser, load_config, main
from chunkrag.llm_gateway import CANNOT_ANSWER
from chunkrag.pipeline import TRACE_VERSION

from conftest import echo_rewrite_script


@pytest.fixture
def henry_index(henry_corpus, tmp_path):
    path = tmp_path / "henry.idx.json"
    assert main(["ingest", "--corpus", str(henry_corpus), "--index", str(path)]) == 0
    return path


def mock_args(script):
    return ["--backend", "mock", "--mock-script", str(script)]


def test_ingest_missing_corpus_flag(tmp_path, capsys):
    assert main(["ingest", "--index", str(tmp_path / "i.json")]) == 2
    assert "--corpus" in capsys.readouterr().err


def test_ingest_nonexistent_corpus(tmp_path, capsys):
    assert main(["ingest", "--corpus", str(tmp_path / "nope.jsonl"), "--index", str(tmp_path / "i")]) == 2
    assert "nope.jsonl" in capsys.readouterr().err


def test_ingest_prints_stats(henry_corpus, tmp_path, capsys):
    idx = tmp_path / "i.json"
    assert main(["ingest", "--corpus", str(henry_corpus), "--index", str(idx)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["documents"] == 4 and stats["chunks"] >= 4
    assert idx.exists()


def test_unknown_config_key(henry_corpus, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"chunker": {"thetaa": 0.5}}))
    code = main(["ingest", "--corpus", str(henry_corpus), "--index", str(tmp_path / "i"), "--config", str(cfg)])
    assert code == 2
    assert "chunker.thetaa" in capsys.readouterr().err


def test_invalid_value_names_path(henry_corpus, tmp_path, capsys):
    code = main(["ingest", "--corpus", str(henry_corpus), "--index", str(tmp_path / "i"), "--theta", "3"])
    assert code == 2 and "chunker.theta" in capsys.readouterr().err


def test_mock_backend_needs_script(henry_index, capsys):
    assert main(["query", "--index", str(henry_index), "--query", "q", "--backend", "mock"]) == 2
    assert "--mock-script" in capsys.readouterr().err


def test_query_henry_with_trace(henry_index, henry_script_path, tmp_path, capsys):
    trace = tmp_path / "t.json"
    argv = ["query", "--index", str(henry_index), "--query", "What is Henry Feilden's occupation?",
            "--trace", str(trace), *mock_args(henry_script_path)]
    assert main(argv) == 0
    assert "industrialist" in capsys.readouterr().out
    data = json.loads(trace.read_text())
    assert data["version"] == TRACE_VERSION and data["used_chunks"]


def test_query_cannot_answer(tmp_path, capsys):
    corpus = tmp_path / "empty.jsonl"
    corpus.write_text("")
    idx = tmp_path / "i.json"
    assert main(["ingest", "--corpus", str(corpus), "--index", str(idx)]) == 0
    capsys.readouterr()
    script = tmp_path / "s.json"
    script.write_text(json.dumps(echo_rewrite_script().to_obj()))
    assert main(["query", "--index", str(idx), "--query", "anything?", *mock_args(script)]) == 0
    assert capsys.readouterr().out.strip() == CANNOT_ANSWER


def test_query_missing_index(tmp_path, henry_script_path):
    argv = ["query", "--index", str(tmp_path / "none.json"), "--query", "q", *mock_args(henry_script_path)]
    assert main(argv) == 2


def test_query_runtime_failure_exit_one(henry_index, tmp_path):
    script = tmp_path / "s.json"
    script.write_text(json.dumps([{"template": "query_rewrite", "response": "x"}]))
    assert main(["query", "--index", str(henry_index), "--query", "q", *mock_args(script)]) == 1


def write_dataset(tmp_path):
    rows = [
        {"id": "q1", "question": "Who ran the cotton mills?", "answers": ["cotton"]},
        {"id": "q2", "question": "Where is Blackburn?", "answers": ["Blackburn"]},
        {"id": "q3", "question": "What about Berlin weather?", "answers": ["berlin"]},
        {"id": "q4", "question": "Who was Henry Feilden?", "answers": ["politician"]},
    ]
    path = tmp_path / "qa.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def echo_script_file(tmp_path):
    rule = {"template": "answer_generation", "pattern": r"Question: (.*)\n", "regex": True, "response": r"Echo: \1"}
    path = tmp_path / "echo.json"
    path.write_text(json.dumps(echo_rewrite_script([rule], default="0.7").to_obj()))
    return path


def test_eval_writes_summary(henry_index, tmp_path, capsys):
    out = tmp_path / "out"
    argv = ["eval", "--index", str(henry_index), "--dataset", str(write_dataset(tmp_path)),
            "--out", str(out), *mock_args(echo_script_file(tmp_path))]
    assert main(argv) == 0
    assert json.loads((out / "summary.json").read_text())["accuracy"] == 0.75
    assert len((out / "results.jsonl").read_text().splitlines()) == 4
    assert json.loads(capsys.readouterr().out)["correct"] == 3


def test_ablate_five_rows(henry_index, tmp_path):
    out = tmp_path / "ab"
    argv = ["ablate", "--index", str(henry_index), "--thresholds", "0.5,0.6,0.7,0.8,0.9",
            "--query", "Henry Feilden", "--dataset", str(write_dataset(tmp_path)),
            "--out", str(out), *mock_args(echo_script_file(tmp_path))]
    assert main(argv) == 0
    with open(out / "ablation.csv") as f:
        rows = list(csv.DictReader(f))
    assert [float(r["threshold"]) for r in rows] == [0.5, 0.6, 0.7, 0.8, 0.9]


def test_ablate_bad_thresholds(henry_index, tmp_path):
    argv = ["ablate", "--index", str(henry_index), "--thresholds", "a,b", "--query", "q",
            "--out", str(tmp_path), *mock_args(echo_script_file(tmp_path))]
    assert main(argv) == 2


@pytest.mark.parametrize("command", ["eval", "ablate"])
def test_unwritable_out_dir(henry_index, tmp_path, command):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    argv = [command, "--index", str(henry_index), "--dataset", str(write_dataset(tmp_path)),
            "--out", str(blocker / "sub"), *mock_args(echo_script_file(tmp_path))]
    assert main(argv) == 1


# flag, value on the command line, value in the config file, default
PRECEDENCE = [
    ("--theta", "0.3", 0.6, 0.8),
    ("--max-chars", "123", 321, 500),
    ("--embed-dim", "64", 128, 256),
    ("--lambda-dup", "0.7", 0.8, 0.9),
    ("--k-per-arm", "7", 9, 20),
    ("--k-combined", "5", 6, 10),
    ("--epsilon", "0.05", 0.02, 0.01),
    ("--threshold-mode", "llm", "statistical", "statistical"),
    ("--rerank", "none", "remote", "local-fallback"),
    ("--jobs", "2", 3, 4),
]


def _get(cfg, dotted):
    for part in dotted.split("."):
        cfg = getattr(cfg, part)
    return cfg


def _file_cfg(tmp_path, dotted, value):
    raw = {}
    node = raw
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value
    if dotted == "rerank.kind":
        node["endpoint_url"] = "http://127.0.0.1:9/rerank"
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


@pytest.mark.parametrize("flag,cli_value,file_value,default", PRECEDENCE, ids=[p[0] for p in PRECEDENCE])
def test_flag_precedence(tmp_path, flag, cli_value, file_value, default):
    dotted = OVERRIDES[flag.lstrip("-").replace("-", "_")]
    parser = build_parser()
    base = ["query", "--query", "q"]
    assert _get(load_config(parser.parse_args(base)), dotted) == default
    cfg_path = _file_cfg(tmp_path, dotted, file_value)
    assert _get(load_config(parser.parse_args([*base, "--config", str(cfg_path)])), dotted) == file_value
    both = load_config(parser.parse_args([*base, "--config", str(cfg_path), flag, cli_value]))
    assert str(_get(both, dotted)) == cli_value


def test_w_bm25_flag_sets_both_weights():
    cfg = load_config(build_parser().parse_args(["query", "--query", "q", "--w-bm25", "0.25"]))
    assert (cfg.hybrid.w_bm25, cfg.hybrid.w_llm) == (0.25, 0.75)


def test_paths_from_config(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"paths": {"index": "from-file.json"}}))
    args = build_parser().parse_args(["query", "--query", "q", "--config", str(cfg_path)])
    assert load_config(args).paths.index == "from-file.json"
    args = build_parser().parse_args(["query", "--query", "q", "--config", str(cfg_path), "--index", "flag.json"])
    assert load_config(args).paths.index == "flag.json"


def test_bad_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(build_parser().parse_args(["query", "--query", "q", "--config", str(path)]))
