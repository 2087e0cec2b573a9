"""Command-line entry point: ``chunkrag {ingest,query,eval,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.
Logs go to stderr; machine-readable output goes to stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from pydantic import BaseModel, ConfigDict, ValidationError

from .eval import ablate_dedup, evaluate_accuracy, load_dataset, write_ablation_csv, write_eval_outputs
from .index import load_index
from .pipeline import ChunkRAG, PipelineConfig, PipelineError, build_index

logger = logging.getLogger("chunkrag")


class ConfigError(Exception):
    pass


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    corpus: str | None = None
    index: str | None = None
    dataset: str | None = None
    out: str | None = None


class CliConfigFile(PipelineConfig):
    paths: PathsConfig = PathsConfig()


# flag dest -> dotted config path
OVERRIDES: dict[str, str] = {
    "theta": "chunker.theta",
    "max_chars": "chunker.max_chars",
    "embed_dim": "embedding.dim",
    "lambda_dup": "hybrid.lambda_dup",
    "k_per_arm": "hybrid.k_per_arm",
    "k_combined": "hybrid.k_combined",
    "epsilon": "threshold.epsilon",
    "threshold_mode": "threshold.mode",
    "rerank": "rerank.kind",
    "jobs": "jobs",
    "corpus": "paths.corpus",
    "index": "paths.index",
    "dataset": "paths.dataset",
    "out": "paths.out",
}


def _set(d: dict, dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    for p in parents:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"config key {p!r} must be an object")
    d[leaf] = value


def _format_validation(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"{loc}: {err['msg']}" if loc else err["msg"])
    return "; ".join(lines)


def load_config(args: argparse.Namespace) -> CliConfigFile:
    """Defaults, overlaid by the ``--config`` file, overlaid by command-line flags."""
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"--config {args.config}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"--config {args.config}: expected a JSON object")
    for dest, dotted in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set(raw, dotted, value)
    w_bm25 = getattr(args, "w_bm25", None)
    if w_bm25 is not None:
        _set(raw, "hybrid.w_bm25", w_bm25)
        _set(raw, "hybrid.w_llm", 1.0 - w_bm25)
    try:
        cfg = CliConfigFile.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {_format_validation(e)}") from e

    if getattr(args, "backend", None) == "mock":
        script = args.mock_script
        if not script:
            raise ConfigError("--backend mock requires --mock-script")
        cfg = cfg.with_mock_backends(script)
    elif getattr(args, "mock_script", None):
        raise ConfigError("--mock-script is only valid with --backend mock")
    return cfg


def _require(value: str | None, flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required (or set it under 'paths' in --config)")
    return value


def _make_rag(cfg: CliConfigFile) -> ChunkRAG:
    index_path = _require(cfg.paths.index, "--index")
    if not Path(index_path).exists():
        raise ConfigError(f"--index {index_path}: no such file")
    return ChunkRAG(load_index(index_path), cfg)


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    corpus = _require(cfg.paths.corpus, "--corpus")
    index_path = _require(cfg.paths.index, "--index")
    if not Path(corpus).exists():
        raise ConfigError(f"--corpus {corpus}: no such file or directory")
    _, stats = build_index(corpus, cfg, index_path=index_path, format=args.format)
    print(json.dumps(stats))
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    rag = _make_rag(cfg)
    try:
        answer = rag.answer(args.query)
    except PipelineError as e:
        if args.trace and e.trace is not None:
            e.trace.write(args.trace)
        raise
    print(answer.text)
    if args.trace:
        answer.trace.write(args.trace)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    dataset_path = _require(cfg.paths.dataset, "--dataset")
    out = _require(cfg.paths.out, "--out")
    rag = _make_rag(cfg)
    report = evaluate_accuracy(load_dataset(dataset_path), rag)
    write_eval_outputs(report, out)
    print(json.dumps(report.summary))
    return 0


def _parse_thresholds(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigError(f"--thresholds: {e}") from e
    if not values:
        raise ConfigError("--thresholds: empty list")
    return values


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = Path(_require(cfg.paths.out, "--out"))
    thresholds = _parse_thresholds(args.thresholds)
    queries = list(args.query or [])
    if cfg.paths.dataset:
        queries += [ex.question for ex in load_dataset(cfg.paths.dataset)]
    if not queries:
        raise ConfigError("ablate needs --query or --dataset")
    rag = _make_rag(cfg)
    rows = ablate_dedup(rag, thresholds, queries)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, out / "ablation.csv")
    print(json.dumps({"rows": len(rows), "path": str(out / "ablation.csv")}))
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (full pipeline config plus 'paths')")
    p.add_argument("--backend", choices=["remote", "mock"], help="LLM backend for every stage")
    p.add_argument("--mock-script", help="mock rules JSON (with --backend mock)")
    p.add_argument("--jobs", type=int, help="worker cap for scoring/evaluation fan-out")
    p.add_argument("--theta", type=float, help="chunk boundary similarity threshold")
    p.add_argument("--max-chars", type=int, help="chunk size cap in characters")
    p.add_argument("--embed-dim", type=int, help="local embedder dimension")
    p.add_argument("--lambda-dup", type=float, help="redundancy cosine threshold")
    p.add_argument("--w-bm25", type=float, help="BM25 weight (dense weight = 1 - this)")
    p.add_argument("--k-per-arm", type=int)
    p.add_argument("--k-combined", type=int)
    p.add_argument("--epsilon", type=float, help="variance cutoff for the dynamic threshold")
    p.add_argument("--threshold-mode", choices=["statistical", "llm"])
    p.add_argument("--rerank", choices=["remote", "local-fallback", "none"])
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkrag", description="Chunk-filtered retrieval-augmented generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build and save an index from a corpus")
    p.add_argument("--corpus", help="JSONL file or directory of .txt files")
    p.add_argument("--index", help="output index file")
    p.add_argument("--format", choices=["jsonl", "plain-dir"], help="default: by path type")
    _common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="answer one query")
    p.add_argument("--index")
    p.add_argument("--query", required=True)
    p.add_argument("--trace", help="write the pipeline trace JSON here")
    _common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="accuracy over a QA dataset")
    p.add_argument("--index")
    p.add_argument("--dataset")
    p.add_argument("--out", help="output directory")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="redundancy-threshold sweep")
    p.add_argument("--index")
    p.add_argument("--thresholds", default="0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--dataset", help="questions to sweep over")
    p.add_argument("--query", action="append", help="extra query (repeatable)")
    p.add_argument("--out", help="output directory")
    _common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"chunkrag {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level boundary maps failures to exit 1
        print(f"chunkrag {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
