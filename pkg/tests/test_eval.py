import json
import random

import numpy as np
import pytest

from chunkrag.eval import (
    AblationRow,
    DatasetError,
    QaExample,
    ablate_dedup,
    chunkrag_chunks,
    compare_retrievers,
    evaluate_accuracy,
    is_correct,
    load_dataset,
    read_ablation_csv,
    write_ablation_csv,
    write_eval_outputs,
)
from chunkrag.pipeline import ChunkRAG, PipelineConfig, build_index

from conftest import (
    NOISE_SIGNAL_QUERIES,
    TABLE_CLUSTERS,
    TABLE_LAMBDAS,
    TABLE_REMOVED,
    TABLE_SINGLETONS,
    TableEmbedder,
    echo_rewrite_script,
    index_from_vectors,
    noise_signal_corpus,
    noise_signal_script,
    planted_cluster_vectors,
)


def mock_cfg(**updates):
    return PipelineConfig.model_validate(updates).with_mock_backends(None)


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def test_is_correct():
    assert is_correct("The capital of France is Paris.", ["Paris"])
    assert not is_correct("I cannot answer from the provided context.", ["Paris"])
    assert is_correct("it is  NEW\nyork", ["new York"])


def test_example_needs_gold():
    with pytest.raises(DatasetError):
        QaExample("x", "q", ())


def test_load_dataset(tmp_path):
    p = write_jsonl(tmp_path / "d.jsonl", [{"id": 1, "question": "q?", "answers": ["a", "b"]}])
    assert load_dataset(p) == [QaExample("1", "q?", ("a", "b"))]
    p.write_text('{"id": "x", "question": "q"}\n')
    with pytest.raises(DatasetError, match=":1:"):
        load_dataset(p)


# answers echo the question back, so gold strings decide correctness
ECHO_ANSWER = {"template": "answer_generation", "pattern": r"Question: (.*)\n", "regex": True, "response": r"Echo: \1"}

DATASET = [
    QaExample("q1", "Who ran the cotton mills?", ("cotton",)),
    QaExample("q2", "Where is Blackburn?", ("Blackburn",)),
    QaExample("q3", "What about Berlin weather?", ("berlin",)),
    QaExample("q4", "Who was Henry Feilden?", ("politician",)),
]


def echo_rag(henry_corpus, **cfg):
    index, _ = build_index(henry_corpus)
    return ChunkRAG(index, mock_cfg(**cfg), script=echo_rewrite_script([ECHO_ANSWER], default="0.7"))


def test_accuracy_three_of_four(henry_corpus):
    report = evaluate_accuracy(DATASET, echo_rag(henry_corpus))
    assert report.accuracy == 0.75
    assert [r.correct for r in report.results] == [True, True, True, False]
    assert report.summary == {"accuracy": 0.75, "correct": 3, "total": 4, "failures": 0}


def test_accuracy_permutation_invariant(henry_corpus):
    rag = echo_rag(henry_corpus)
    shuffled = DATASET[:]
    random.Random(3).shuffle(shuffled)
    assert evaluate_accuracy(shuffled, rag).accuracy == evaluate_accuracy(DATASET, rag).accuracy


def test_failures_count_as_incorrect(henry_corpus):
    index, _ = build_index(henry_corpus)
    # no scoring rules and no default: every example fails inside the pipeline
    rag = ChunkRAG(index, mock_cfg(jobs=1), script=echo_rewrite_script([], default=None))
    report = evaluate_accuracy(DATASET[:2], rag)
    assert report.accuracy == 0.0
    assert all(r.error for r in report.results) and report.summary["failures"] == 2
    assert all(t is not None and t.error for t in report.traces)


def test_custom_scorer_hook(henry_corpus):
    report = evaluate_accuracy(DATASET, echo_rag(henry_corpus), scorer=lambda a, g: a.startswith("Echo"))
    assert report.accuracy == 1.0


def test_empty_dataset(henry_corpus):
    with pytest.raises(DatasetError):
        evaluate_accuracy([], echo_rag(henry_corpus))


def test_write_outputs(henry_corpus, tmp_path):
    report = evaluate_accuracy(DATASET, echo_rag(henry_corpus))
    write_eval_outputs(report, tmp_path / "out")
    lines = (tmp_path / "out" / "results.jsonl").read_text().splitlines()
    assert [json.loads(l)["id"] for l in lines] == ["q1", "q2", "q3", "q4"]
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["accuracy"] == 0.75
    traces = sorted(p.name for p in (tmp_path / "out" / "traces").iterdir())
    assert traces == ["0000_q1.json", "0001_q2.json", "0002_q3.json", "0003_q4.json"]


def test_parallel_eval_matches_serial(henry_corpus):
    par = evaluate_accuracy(DATASET, echo_rag(henry_corpus), jobs=4)
    ser = evaluate_accuracy(DATASET, echo_rag(henry_corpus), jobs=1)
    assert par.results == ser.results
    assert [t.to_json() for t in par.traces] == [t.to_json() for t in ser.traces]


# ---- ablation -------------------------------------------------------------

def planted_rag(vectors, k):
    index = index_from_vectors(vectors)
    cfg = mock_cfg(hybrid={"k_per_arm": k, "k_combined": k})
    embedder = TableEmbedder({"x": vectors[0]}, fallback=np.ones(len(vectors[0])))
    return ChunkRAG(index, cfg, embedder=embedder, script=echo_rewrite_script())


def test_lambda_one_removes_nothing(henry_corpus):
    rows = ablate_dedup(echo_rag(henry_corpus), [1.0], ["Henry Feilden"])
    assert rows[0].chunks_removed == 0


def test_identical_chunks_leave_one():
    k = 6
    rag = planted_rag([np.eye(8)[0]] * k, k)
    rows = ablate_dedup(rag, [0.0, 0.5, 0.99], ["q one", "q two"])
    assert [r.chunks_removed for r in rows] == [2 * (k - 1)] * 3
    assert all(r.sim_after == 0.0 and r.sim_before == pytest.approx(1.0) for r in rows)


def test_planted_clusters_reproduce_table_counts():
    vectors = planted_cluster_vectors(np.random.default_rng(7), 72, TABLE_CLUSTERS, TABLE_SINGLETONS)
    assert len(vectors) == 60
    rows = ablate_dedup(planted_rag(vectors, 60), TABLE_LAMBDAS, ["planted"])
    assert tuple(r.chunks_removed for r in rows) == TABLE_REMOVED
    for r in rows:
        assert r.sim_after <= r.sim_before
        assert r.avg_chunk_length == 3.0


def test_ablation_rejects_bad_threshold(henry_corpus):
    with pytest.raises(ValueError):
        ablate_dedup(echo_rag(henry_corpus), [1.5], ["q"])


def test_ablation_csv_round_trip(tmp_path):
    rows = [AblationRow(0.5, 36, 35.6, 0.1 + 0.2, 1 / 3), AblationRow(0.9, 12, 20.0, 0.0, -0.25)]
    p = tmp_path / "a.csv"
    write_ablation_csv(rows, p)
    assert read_ablation_csv(p) == rows
    assert p.read_text().splitlines()[0] == "threshold,chunks_removed,avg_chunk_length,sim_before,sim_after"


# ---- retriever comparison -------------------------------------------------

def test_compare_control_equal(henry_corpus):
    rag = echo_rag(henry_corpus)
    cmp = compare_retrievers(rag, ["Henry Feilden", "Blackburn"], naive=chunkrag_chunks)
    assert cmp.naive_mean == cmp.chunkrag_mean


def test_compare_noise_signal(tmp_path):
    corpus = write_jsonl(tmp_path / "c.jsonl", noise_signal_corpus())
    index, _ = build_index(corpus)
    rag = ChunkRAG(index, mock_cfg(), script=noise_signal_script())
    cmp = compare_retrievers(rag, NOISE_SIGNAL_QUERIES)
    assert cmp.chunkrag_mean >= cmp.naive_mean
    assert len(cmp.per_query) == 3


def test_compare_needs_queries(henry_corpus):
    with pytest.raises(ValueError):
        compare_retrievers(echo_rag(henry_corpus), [])
