"""Command-line entry point wiring every module together.

Subcommands: ingest, segment, index, search, chat, mine, synth (gen/dpo),
train-toy, eval. Config precedence is flags > environment > file >
defaults; one ``--seed`` feeds all randomness and unseeded runs record the
seed they generated. ``--json`` prints one machine-readable document to
stdout (timings excluded, so equal runs give equal bytes); ``--trace``
streams stage events as line-delimited JSON to stderr. Exit codes: 0 ok,
1 runtime error, 2 usage.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from ragforge import evaluation, plots, synthesis, training
from ragforge.clients import ClientError, make_client
from ragforge.clients.base import QUERY_SIDE
from ragforge.config import AppConfig, ConfigError, load_config
from ragforge.corpus import (
    CorpusError,
    Document,
    clean_document,
    load_corpus,
    write_corpus,
)
from ragforge.mining import NegativeShortfallError, SimANSConfig, default_configs, mine_for_dataset
from ragforge.pipeline import PipelineConfig, PipelineError, answer_query
from ragforge.records import TrainingPair, read_jsonl, write_jsonl
from ragforge.segmentation import BoundaryScoringError, get_tokenizer, segment
from ragforge.training import ToyEncoder, ToyTrainConfig, TrainingDivergedError
from ragforge.vectorstore import Collection, StoreError, VectorRecord

PROG = "ragforge"

# Exceptions that turn into an `error: ...` line and exit 1 instead of a
# traceback. Everything else is a genuine bug and should crash loudly.
_RUNTIME_ERRORS = (
    ConfigError,
    CorpusError,
    ClientError,
    StoreError,
    PipelineError,
    BoundaryScoringError,
    NegativeShortfallError,
    TrainingDivergedError,
    synthesis.SynthesisError,
    evaluation.EvalError,
    OSError,
    ValueError,
    KeyError,
)


class Output:
    """Routes human lines, the JSON document and trace events."""

    def __init__(self, as_json: bool, trace: bool):
        self.as_json = as_json
        self.trace = trace

    def say(self, line: str) -> None:
        """Human-readable progress; suppressed under --json."""
        if not self.as_json:
            print(line)

    def emit(self, payload: dict[str, Any]) -> None:
        """The single machine-readable result document."""
        if self.as_json:
            print(json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2))

    def event(self, stage: str, **fields: Any) -> None:
        if self.trace:
            obj = {"stage": stage}
            obj.update(fields)
            print(json.dumps(obj, sort_keys=True, ensure_ascii=False), file=sys.stderr)


def _parse_int_list(raw: str) -> list[int]:
    try:
        values = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("common options")
    group.add_argument("--config", metavar="PATH", help="TOML config file")
    group.add_argument("--json", action="store_true", help="machine-readable stdout")
    group.add_argument("--trace", action="store_true", help="stage events on stderr")
    group.add_argument("--seed", type=int, help="seed for all randomness")
    group.add_argument("--jobs", type=int, help="parallel workers (default: logical CPUs)")
    group.add_argument("--store", metavar="PATH", help="vector store file")
    group.add_argument("--endpoint", help="model endpoint URL, or 'stub'")
    group.add_argument("--top-k", dest="top_k", type=int, help="chunks kept after rerank")
    group.add_argument("--retrieve-n", dest="retrieve_n", type=int, help="candidates retrieved")
    group.add_argument(
        "--threshold", dest="score_threshold", type=float, help="pre-rerank similarity floor"
    )
    group.add_argument("--tokenizer", help="token counter name")
    group.add_argument("--max-tokens", dest="max_tokens", type=int, help="chunk token budget")
    group.add_argument("--instruction", help="query-side embedding instruction")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Offline-testable RAG pipeline and training-data factory.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="clean a raw corpus file")
    p.add_argument("--docs", required=True, help="raw corpus (JSONL)")
    p.add_argument("--out", required=True, help="cleaned corpus (JSONL)")
    p.add_argument("--library", default="public", help="default partition for records without user_id")
    p.add_argument("--min-tokens", type=int, default=20, help="discard docs shorter than this")

    p = sub.add_parser("segment", parents=[common], help="split documents into chunks")
    p.add_argument("--docs", required=True, help="cleaned corpus (JSONL)")
    p.add_argument("--out", required=True, help="chunk records (JSONL)")

    p = sub.add_parser("index", parents=[common], help="embed chunks into the vector store")
    p.add_argument("--chunks", required=True, help="chunk records (JSONL)")
    p.add_argument("--partition", help="force all records into this partition")

    p = sub.add_parser("search", parents=[common], help="raw vector search, no rerank")
    p.add_argument("--query", required=True)
    p.add_argument("--partition", action="append", help="scope (repeatable); default: all")
    p.add_argument("--top-n", dest="top_n", type=int, default=10)

    p = sub.add_parser("chat", parents=[common], help="retrieve, rerank and answer")
    p.add_argument("--query", required=True)
    p.add_argument("--partition", action="append", help="scope (repeatable); default: all")

    p = sub.add_parser("mine", parents=[common], help="mine hard negatives for training pairs")
    p.add_argument("--pairs", required=True, help="training pairs (JSONL)")
    p.add_argument("--out", required=True, help="mined pairs (JSONL)")
    p.add_argument("--partition", action="append", help="scope (repeatable); default: all")
    p.add_argument("--sigma", type=float, help="override sampling sharpness for all task types")
    p.add_argument("--min-negatives", dest="min_negatives", type=int, default=16)
    p.add_argument("--pool", type=int, default=128, help="weak-retrieval candidate pool size")

    p = sub.add_parser("synth", parents=[common], help="synthesize training data")
    action = p.add_subparsers(dest="action", metavar="ACTION")
    g = action.add_parser("gen", parents=[common], help="generate QA examples from chunks")
    g.add_argument("--chunks", required=True, help="chunk records (JSONL)")
    g.add_argument("--out", required=True, help="examples (JSONL)")
    g.add_argument("--partition", action="append", help="scope (repeatable); default: all")
    g.add_argument("--ratio", type=int, default=synthesis.DEFAULT_RATIO,
                   help="answerable examples per unanswerable one")
    g.add_argument("--distractors", type=int, default=synthesis.DEFAULT_DISTRACTORS)
    g.add_argument("--limit", type=int, help="use at most this many source chunks")
    g.add_argument("--keep-dropped", action="store_true",
                   help="keep quality-label-0 examples instead of dropping them")
    d = action.add_parser("dpo", parents=[common], help="build preference pairs from examples")
    d.add_argument("--items", required=True, help="synthesized examples (JSONL)")
    d.add_argument("--out", required=True, help="preference pairs (JSONL)")
    d.add_argument("--dpo-threshold", dest="dpo_threshold", type=float,
                   default=synthesis.DPO_THRESHOLD,
                   help="chosen context must score strictly above this")

    p = sub.add_parser("train-toy", parents=[common], help="train the toy encoder or scorer")
    p.add_argument("--pairs", required=True, help="training pairs (JSONL)")
    p.add_argument("--out-dir", required=True, help="loss curve CSV/PNG and metrics go here")
    p.add_argument("--loss", choices=("infonce", "mnr"), default="infonce")
    p.add_argument("--dims", type=_parse_int_list,
                   help="nested prefix dims, e.g. 8,16,32 (infonce only)")
    p.add_argument("--tau", type=float, default=training.DEFAULT_TAU)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    p.add_argument("--embed-dim", dest="toy_embed_dim", type=int, default=32)

    p = sub.add_parser("eval", parents=[common], help="run the evaluation harness")
    p.add_argument("--set", dest="eval_set", required=True, help="eval items (JSONL)")
    p.add_argument("--report", required=True, help="output directory for report files")
    p.add_argument("--ks", type=_parse_int_list, default=list(evaluation.DEFAULT_KS))

    return parser


def _normalize_synth(argv: list[str]) -> list[str]:
    """`synth --chunks ...` means `synth gen --chunks ...`."""
    if "synth" in argv:
        i = argv.index("synth")
        if i + 1 >= len(argv) or argv[i + 1] not in ("gen", "dpo"):
            argv = argv[: i + 1] + ["gen"] + argv[i + 1 :]
    return argv


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    mapping = {
        "store": "store_path",
        "endpoint": "endpoint",
        "top_k": "top_k",
        "retrieve_n": "retrieve_n",
        "score_threshold": "score_threshold",
        "tokenizer": "tokenizer",
        "max_tokens": "max_tokens",
        "instruction": "instruction",
        "seed": "seed",
        "jobs": "jobs",
    }
    return {
        field: getattr(args, attr)
        for attr, field in mapping.items()
        if getattr(args, attr, None) is not None
    }


def _pipeline_config(config: AppConfig, scope: Sequence[str] | None) -> PipelineConfig:
    return PipelineConfig(
        retrieve_n=config.retrieve_n,
        top_k=config.top_k,
        score_threshold=config.score_threshold,
        scope=list(scope) if scope is not None else None,
        instruction=config.instruction,
    )


def _load_store(config: AppConfig) -> Collection:
    path = Path(config.store_path)
    if not path.exists():
        raise StoreError(f"vector store not found: {path}")
    return Collection.load(path)


def _result(command: str, config: AppConfig, **fields: Any) -> dict[str, Any]:
    payload: dict[str, Any] = {"command": command, "config": config.snapshot()}
    payload.update(fields)
    return payload


# --- subcommand handlers ------------------------------------------------


def cmd_ingest(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    record_errors: list[str] = []
    kept: list[Document] = []
    excluded = 0
    removed_segments = 0
    docs = load_corpus(args.docs, library=args.library,
                       on_record_error=lambda e: record_errors.append(str(e)))
    for doc in docs:
        cleaned, report = clean_document(doc, min_tokens=args.min_tokens)
        removed_segments += report.removed_segments
        if cleaned is None:
            excluded += 1
        else:
            kept.append(cleaned)
    write_corpus(args.out, kept)
    for err in record_errors:
        print(f"warning: {err}", file=sys.stderr)
    out.event("ingest", kept=len(kept), excluded=excluded, record_errors=len(record_errors))
    out.say(f"kept {len(kept)} documents ({excluded} excluded, "
            f"{len(record_errors)} bad records, {removed_segments} boilerplate lines) -> {args.out}")
    out.emit(_result("ingest", config, input=args.docs, output=args.out,
                     kept=len(kept), excluded=excluded,
                     removed_segments=removed_segments, record_errors=record_errors))
    return 0


def cmd_segment(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    client = make_client(config.client_config())
    tokenizer = get_tokenizer(config.tokenizer)
    docs = list(load_corpus(args.docs,
                            on_record_error=lambda e: print(f"warning: {e}", file=sys.stderr)))

    def one(doc: Document):
        return segment(doc.body, client, max_tokens=config.max_tokens,
                       tokenizer=tokenizer, doc_id=doc.doc_id)

    jobs = config.jobs or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        per_doc = list(pool.map(one, docs))

    records = []
    oversized = 0
    for doc, chunks in zip(docs, per_doc):
        for chunk in chunks:
            oversized += int(chunk.oversized)
            records.append({
                "chunk_id": chunk.chunk_id,
                "doc_id": chunk.doc_id,
                "ordinal": chunk.ordinal,
                "text": chunk.text,
                "token_count": chunk.token_count,
                "oversized": chunk.oversized,
                "sentence_start": chunk.sentence_start,
                "sentence_end": chunk.sentence_end,
                "partition": doc.library,
            })
    write_jsonl(args.out, records)
    out.event("segment", documents=len(docs), chunks=len(records), oversized=oversized)
    out.say(f"segmented {len(docs)} documents into {len(records)} chunks "
            f"({oversized} oversized) -> {args.out}")
    out.emit(_result("segment", config, input=args.docs, output=args.out,
                     documents=len(docs), chunks=len(records), oversized=oversized))
    return 0


def cmd_index(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    client = make_client(config.client_config())
    records = list(read_jsonl(args.chunks))
    if not records:
        raise ValueError(f"no chunk records in {args.chunks}")

    path = Path(config.store_path)
    if path.exists():
        store = Collection.load(path)
        if store.model_tag != client.config.model_tag:
            raise StoreError(
                f"store was built with model {store.model_tag!r}, "
                f"client is {client.config.model_tag!r}"
            )
    else:
        store = Collection(config.collection_name, dimension=config.embed_dim,
                           metric="cosine", model_tag=client.config.model_tag)

    texts = [str(r["text"]) for r in records]
    vectors = client.embed(texts, side="document")
    out.event("embed", count=len(vectors))

    by_partition: dict[str, list[VectorRecord]] = {}
    for record, vec in zip(records, vectors):
        partition = args.partition or str(record.get("partition", "public"))
        payload = {"text": str(record["text"]), "doc_id": str(record.get("doc_id", ""))}
        by_partition.setdefault(partition, []).append(
            VectorRecord(chunk_id=str(record["chunk_id"]), vector=vec.values,
                         payload=payload, partition=partition)
        )
    inserted = 0
    for partition, batch in sorted(by_partition.items()):
        inserted += store.insert(partition, batch)
        out.event("insert", partition=partition, count=len(batch))
    store.persist(path)
    out.say(f"indexed {inserted} chunks into {sorted(by_partition)} -> {path}")
    out.emit(_result("index", config, input=args.chunks, store=str(path),
                     inserted=inserted, partitions=sorted(by_partition),
                     total=store.count()))
    return 0


def cmd_search(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    client = make_client(config.client_config())
    store = _load_store(config)
    qvec = client.embed([args.query], side=QUERY_SIDE, instruction=config.instruction)[0]
    results = store.search(qvec.values, top_n=args.top_n,
                           score_threshold=config.score_threshold,
                           scope=args.partition)
    out.event("vector_search", count=len(results))
    for r in results:
        out.say(f"{r.similarity:+.4f}  {r.partition}/{r.chunk_id}  "
                f"{str(r.payload.get('text', ''))[:80]}")
    if not results:
        out.say("(no results)")
    out.emit(_result("search", config, query=args.query,
                     results=[{"chunk_id": r.chunk_id, "similarity": r.similarity,
                               "partition": r.partition, "text": r.payload.get("text", "")}
                              for r in results]))
    return 0


def cmd_chat(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    client = make_client(config.client_config())
    store = _load_store(config)
    pcfg = _pipeline_config(config, args.partition)
    answer = answer_query(args.query, pcfg, store, client)
    for event in answer.trace:
        out.event(event.stage, count=event.count)
    out.say(answer.text)
    if answer.citations:
        out.say("citations: " + ", ".join(answer.citations))
    out.emit(_result("chat", config, query=args.query, answer=answer.to_dict()))
    return 0


def cmd_mine(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    client = make_client(config.client_config())
    store = _load_store(config)
    pairs = [TrainingPair.from_dict(r) for r in read_jsonl(args.pairs)]
    if not pairs:
        raise ValueError(f"no training pairs in {args.pairs}")
    configs = {
        task: SimANSConfig(
            sigma=args.sigma if args.sigma is not None else base.sigma,
            min_negatives=args.min_negatives,
            candidate_pool_size=args.pool,
        )
        for task, base in default_configs().items()
    }
    mined = mine_for_dataset(pairs, store, client, seed=config.seed or 0,
                             configs=configs, scope=args.partition)
    write_jsonl(args.out, (p.to_dict() for p in mined))
    negatives = [len(p.negatives) for p in mined]
    out.event("mine", pairs=len(mined), negatives=sum(negatives))
    out.say(f"mined {sum(negatives)} negatives for {len(mined)} pairs "
            f"(min {min(negatives)} per pair) -> {args.out}")
    out.emit(_result("mine", config, input=args.pairs, output=args.out,
                     pairs=len(mined), negatives_total=sum(negatives),
                     negatives_min=min(negatives)))
    return 0


def cmd_synth_gen(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    client = make_client(config.client_config())
    store = _load_store(config)
    sources = [
        (str(r["chunk_id"]), str(r.get("doc_id", "")), str(r["text"]))
        for r in read_jsonl(args.chunks)
    ]
    if args.limit is not None:
        sources = sources[: args.limit]
    if not sources:
        raise ValueError(f"no chunk records in {args.chunks}")
    examples = synthesis.synthesize_examples(
        sources, store, client, seed=config.seed or 0,
        distractor_count=args.distractors, ratio=args.ratio,
        scope=args.partition,
    )
    out.event("synthesize", examples=len(examples))

    answerable = [e for e in examples if e.answerable]
    filtered = synthesis.quality_filter(answerable, client)
    keep = {id(e) for e in filtered.kept} | {id(e) for e in filtered.parked}
    if args.keep_dropped:
        keep |= {id(e) for e in filtered.dropped}
    final = [e for e in examples if not e.answerable or id(e) in keep]
    write_jsonl(args.out, (e.to_dict() for e in final))
    out.event("quality_filter", kept=len(filtered.kept), dropped=len(filtered.dropped),
              parked=len(filtered.parked))
    unanswerable = len(examples) - len(answerable)
    out.say(f"wrote {len(final)} examples ({len(answerable)} answerable, "
            f"{unanswerable} unanswerable; dropped {len(filtered.dropped)}, "
            f"parked {len(filtered.parked)}) -> {args.out}")
    out.emit(_result("synth gen", config, input=args.chunks, output=args.out,
                     examples=len(final), answerable=len(answerable),
                     unanswerable=unanswerable, dropped=len(filtered.dropped),
                     parked=len(filtered.parked), ratio=args.ratio))
    return 0


def cmd_synth_dpo(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    client = make_client(config.client_config())
    examples = [synthesis.SynthExample.from_dict(r) for r in read_jsonl(args.items)]
    items = [(e.question, e.contexts) for e in examples
             if e.answerable and len(e.contexts) >= 2]
    pairs = synthesis.build_dpo_pairs(items, client, threshold=args.dpo_threshold)
    write_jsonl(args.out, (p.to_dict() for p in pairs))
    out.event("dpo", candidates=len(items), pairs=len(pairs))
    out.say(f"built {len(pairs)} preference pairs from {len(items)} candidates -> {args.out}")
    out.emit(_result("synth dpo", config, input=args.items, output=args.out,
                     candidates=len(items), pairs=len(pairs),
                     threshold=args.dpo_threshold))
    return 0


def cmd_train_toy(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    pairs = [TrainingPair.from_dict(r) for r in read_jsonl(args.pairs)]
    if not pairs:
        raise ValueError(f"no training pairs in {args.pairs}")
    tcfg = ToyTrainConfig(
        loss=args.loss,
        temperature=args.tau,
        dims=args.dims,
        batch_size=args.batch_size,
        embed_dim=args.toy_embed_dim,
    )
    model, curve = training.train_toy(pairs, steps=args.steps, lr=args.lr,
                                      seed=config.seed or 0, config=tcfg)
    out.event("train", steps=len(curve), final_loss=curve[-1])

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "loss.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(curve):
            writer.writerow([step, f"{loss:.12g}"])
    png_path = plots.render_loss_curve(curve, out_dir / "loss.png")

    metrics: dict[str, Any] = {
        "loss": args.loss,
        "dims": args.dims,
        "steps": len(curve),
        "final_loss": curve[-1],
        "lr": args.lr,
        "seed": config.seed,
        "pairs": len(pairs),
    }
    if isinstance(model, ToyEncoder):
        metrics["recall_at_1"] = training.nearest_positive_recall(model, pairs)
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    summary = f"final loss {curve[-1]:.6f} after {len(curve)} steps"
    if "recall_at_1" in metrics:
        summary += f", recall@1 {metrics['recall_at_1']:.3f}"
    out.say(summary + f" -> {out_dir}")
    out.emit(_result("train-toy", config, input=args.pairs, metrics=metrics,
                     files={"csv": str(csv_path), "png": str(png_path),
                            "metrics": str(metrics_path)}))
    return 0


def cmd_eval(args: argparse.Namespace, config: AppConfig, out: Output) -> int:
    client = make_client(config.client_config())
    store = _load_store(config)
    eval_set = evaluation.load_eval_set(args.eval_set)
    pcfg = _pipeline_config(config, None)
    report = evaluation.evaluate(eval_set, store, client, config=pcfg, ks=args.ks)
    out.event("evaluate", items=len(eval_set.items), excluded=eval_set.excluded)
    paths = evaluation.emit_report(report, args.report)
    for k in sorted(report.recall):
        out.say(f"recall@{k}: {report.recall[k]:.4f}")
    out.say(f"answer_recall: {report.answer_recall_value:.4f}")
    out.say("report files: " + ", ".join(str(p) for p in paths.values()))
    out.emit(_result("eval", config, input=args.eval_set,
                     report=report.to_dict(),
                     files={k: str(v) for k, v in paths.items()}))
    return 0


_HANDLERS = {
    "ingest": cmd_ingest,
    "segment": cmd_segment,
    "index": cmd_index,
    "search": cmd_search,
    "chat": cmd_chat,
    "mine": cmd_mine,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _normalize_synth(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    try:
        config = load_config(config_path=args.config, overrides=_overrides(args))
        if config.seed is None:
            config.seed = int.from_bytes(os.urandom(4), "big")
            print(f"seed: {config.seed} (generated)", file=sys.stderr)

        out = Output(as_json=args.json, trace=args.trace)
        if args.command == "synth":
            handler = cmd_synth_gen if args.action == "gen" else cmd_synth_dpo
        else:
            handler = _HANDLERS[args.command]
        return handler(args, config, out)
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
