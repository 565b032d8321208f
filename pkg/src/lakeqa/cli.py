"""Command-line entrypoint: one subcommand per pipeline stage.

Every subcommand reads the config file (flags override), runs a single
stage, and writes machine-readable JSON artifacts so intermediate results
can be inspected and replayed. Identical config + seed + fixtures produce
byte-identical artifacts; wall-clock timestamps live in their own field.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .benchgen import (
    GoldFootprint,
    PerturbationConfig,
    generate_lake,
    make_external_pool,
    make_seed_database,
)
from .benchgen.pipeline import save_lake
from .config import AppConfig, load_config
from .corpus import MASK, load_corpus, save_corpus
from .decomposer import ColumnIndex, decompose
from .evaluation import DecompositionRecord, MetricReport, decomposition_quality
from .graph import RelationshipGraph, Thresholds, build_graph, connected, graph_stats
from .metainfer import discover_column_groups, header_f1, infer_missing_metadata
from .providers import (
    ProviderConfig,
    ScriptedChatProvider,
    make_chat_provider,
    make_embedder,
)
from .reasoner import RulePlanner, answer
from .retriever import CoverageScorer, GroupCaps, TrainingTriple, retrieve, train_scorer

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
STAGE_EXIT = {"decomposition": 3, "retrieval": 4, "reasoning": 5, "execution": 6}


def _write_json(path: str | Path, payload: dict | list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _providers(cfg: AppConfig):
    embed_cfg = ProviderConfig(**vars(cfg.embedding))
    embedder = make_embedder(embed_cfg)
    chat = None
    if cfg.chat.mode == "http" or cfg.chat.fixtures_path:
        chat = make_chat_provider(ProviderConfig(**vars(cfg.chat)))
    return embedder, chat


def _load_graph(cfg: AppConfig) -> RelationshipGraph:
    return RelationshipGraph.load(cfg.graph_file)


def _load_scorer(cfg: AppConfig) -> CoverageScorer:
    if cfg.scorer_file and Path(cfg.scorer_file).exists():
        return CoverageScorer.load(cfg.scorer_file)
    return CoverageScorer()


def cmd_ingest(args, cfg: AppConfig) -> int:
    from .corpus import ingest_csv_dir

    manifest = None
    if args.manifest:
        with open(args.manifest, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    corpus = (
        load_corpus(args.input)
        if manifest is None
        else ingest_csv_dir(args.input, manifest)
    )
    save_corpus(corpus, args.out)
    print(f"ingested {len(corpus)} tables into {args.out}")
    return EXIT_OK


def cmd_infer_metadata(args, cfg: AppConfig) -> int:
    corpus = load_corpus(args.input)
    embedder, chat = _providers(cfg)
    if args.fixtures:
        chat = ScriptedChatProvider.from_file(args.fixtures)
    if chat is None:
        print("infer-metadata needs a chat provider (http or fixtures)", file=sys.stderr)
        return EXIT_USAGE
    from .corpus import Corpus

    out = Corpus()
    repaired = 0
    for table in corpus:
        if not table.has_masks():
            out.add(table)
            continue
        partition = discover_column_groups(table, embedder)
        inferred = infer_missing_metadata(table, partition, chat, seed=cfg.seed)
        repaired += int(inferred.headers != table.headers or inferred.title != table.title)
        out.add(inferred)
    save_corpus(out, args.out)
    print(f"inferred metadata for {repaired} tables into {args.out}")

    if args.gold:
        with open(args.gold, "r", encoding="utf-8") as fh:
            gold = json.load(fh)
        scores = []
        per_header = []
        for tid, meta in gold.items():
            if tid not in out:
                continue
            table = out[tid]
            for idx, gold_header in enumerate(meta["headers"]):
                if corpus[tid].headers[idx] != MASK:
                    continue
                score = header_f1(table.headers[idx], gold_header, embedder)
                scores.append(score)
                per_header.append(
                    {
                        "table": tid,
                        "column": idx,
                        "predicted": table.headers[idx],
                        "gold": gold_header,
                        "f1": score,
                    }
                )
        report = {
            "mean_header_f1": sum(scores) / len(scores) if scores else None,
            "headers": per_header,
        }
        report_path = Path(args.out) / "metadata_report.json"
        _write_json(report_path, report)
        print(f"mean header F1: {report['mean_header_f1']}")
    return EXIT_OK


def cmd_graph(args, cfg: AppConfig) -> int:
    if args.action == "build":
        corpus = load_corpus(cfg.corpus_dir)
        embedder, _ = _providers(cfg)
        thresholds = Thresholds(cfg.thresholds.tau_u, cfg.thresholds.tau_j)
        graph = build_graph(corpus, thresholds, embedder)
        graph.save(cfg.graph_file)
        print(json.dumps(graph_stats(graph), indent=2, sort_keys=True))
        return EXIT_OK
    graph = _load_graph(cfg)
    print(json.dumps(graph_stats(graph), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_decompose(args, cfg: AppConfig) -> int:
    corpus = load_corpus(cfg.corpus_dir)
    graph = _load_graph(cfg)
    embedder, chat = _providers(cfg)
    index = ColumnIndex(corpus, embedder)
    decomposition = decompose(
        args.question, index, graph, corpus, chat=chat,
        depth=cfg.retrieval.match_depth,
    )
    payload = decomposition.to_json()
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train_scorer(args, cfg: AppConfig) -> int:
    with open(args.triples, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    triples = [
        TrainingTriple(rec["question"], rec["positive"], rec["negative"])
        for rec in raw
    ]
    embedder, _ = _providers(cfg)
    scorer = train_scorer(
        triples, embedder, epochs=args.epochs, step=args.step
    )
    scorer.save(args.out)
    print(
        f"trained on {len(triples)} triples; "
        f"loss {scorer.training_log[0]:.4f} -> {scorer.training_log[-1]:.4f}"
    )
    return EXIT_OK


def cmd_retrieve(args, cfg: AppConfig) -> int:
    corpus = load_corpus(cfg.corpus_dir)
    graph = _load_graph(cfg)
    embedder, chat = _providers(cfg)
    scorer = _load_scorer(cfg)
    index = ColumnIndex(corpus, embedder)
    decomposition = decompose(
        args.question, index, graph, corpus, chat=chat,
        depth=cfg.retrieval.match_depth,
    )
    result = retrieve(
        args.question,
        decomposition.subquestions,
        corpus,
        graph,
        scorer,
        embedder,
        chat=chat,
        k=args.k or cfg.retrieval.k,
        depth=cfg.retrieval.coarse_depth,
        caps=GroupCaps(
            cfg.retrieval.candidates,
            cfg.retrieval.probes,
            cfg.retrieval.scored_groups,
        ),
        gap_threshold=cfg.retrieval.gap_threshold,
        mapping=decomposition.mapping,
        needs_phrases={
            i: n.phrase for i, n in enumerate(decomposition.needs)
        },
    )
    payload = result.to_json()
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_answer(args, cfg: AppConfig) -> int:
    corpus = load_corpus(cfg.corpus_dir)
    graph = _load_graph(cfg)
    embedder, chat = _providers(cfg)
    scorer = _load_scorer(cfg)
    planner = None
    if args.plans:
        with open(args.plans, "r", encoding="utf-8") as fh:
            annotated = json.load(fh)
        planner = RulePlanner(annotated)
    outcome = answer(
        args.question,
        corpus,
        graph,
        scorer,
        embedder,
        chat=chat,
        planner=planner,
        k=args.k or cfg.retrieval.k,
        caps=GroupCaps(
            cfg.retrieval.candidates,
            cfg.retrieval.probes,
            cfg.retrieval.scored_groups,
        ),
        gap_threshold=cfg.retrieval.gap_threshold,
        max_retries=cfg.reasoner.max_retries,
    )
    trace = outcome.trace()
    trace["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    if args.trace:
        _write_json(args.trace, trace)
    print(json.dumps({"answer": outcome.answer, "failed_stage": outcome.failed_stage}, indent=2))
    if outcome.failed_stage:
        return STAGE_EXIT.get(outcome.failed_stage, EXIT_FAILURE)
    return EXIT_OK


def cmd_benchgen(args, cfg: AppConfig) -> int:
    seed_corpus = load_corpus(args.seed_db)
    embedder, chat = _providers(cfg)
    pcfg = PerturbationConfig(seed=args.seed)
    artifacts = generate_lake(
        seed_corpus,
        pcfg,
        embedder=embedder,
        chat=chat,
        external_dir=args.external,
        n_external=args.n,
        n_questions=args.questions,
    )
    save_lake(artifacts, args.out)
    print(
        f"lake: {len(artifacts.corpus)} tables "
        f"({len(artifacts.decomposed_ids)} decomposed, "
        f"{len(artifacts.external_ids)} external), "
        f"{len(artifacts.questions)} questions -> {args.out}"
    )
    return EXIT_OK


def cmd_synth_seed(args, cfg: AppConfig) -> int:
    corpus = make_seed_database(args.seed, n_sources=args.sources)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} seed tables to {args.out}")
    return EXIT_OK


def cmd_synth_external(args, cfg: AppConfig) -> int:
    make_external_pool(args.out, args.seed, count=args.count)
    print(f"wrote {args.count} external tables to {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg: AppConfig) -> int:
    with open(args.pred, "r", encoding="utf-8") as fh:
        predictions = {rec["id"]: rec for rec in json.load(fh)}
    with open(args.gold, "r", encoding="utf-8") as fh:
        gold = {rec["id"]: rec for rec in json.load(fh)}
    ks = args.k or [3, 5]
    report = MetricReport(ks=ks)
    for qid, gold_rec in sorted(gold.items()):
        pred = predictions.get(qid)
        if pred is None:
            continue
        report.add(
            qid,
            pred.get("retrieved", []),
            set(gold_rec["relevant_tables"]),
            pred.get("answer"),
            gold_rec.get("gold_answer"),
            complexity=gold_rec.get("complexity", "moderate"),
        )
    payload = report.to_json()

    decomposition_records = []
    embedder, _ = _providers(cfg)
    graph = None
    for qid, pred in predictions.items():
        if "subquestions" not in pred or qid not in gold:
            continue
        gold_rec = gold[qid]
        cluster_count = None
        if Path(cfg.graph_file).exists():
            graph = graph or _load_graph(cfg)
            try:
                cluster_count = len(
                    {
                        graph.cluster_id(tid)
                        for tid in gold_rec["relevant_tables"]
                    }
                )
            except KeyError:
                cluster_count = None
        decomposition_records.append(
            DecompositionRecord(
                question=gold_rec["question"],
                need_phrases=pred.get("needs", []),
                subquestions=pred["subquestions"],
                gold_cluster_count=cluster_count,
                gold_table_count=len(gold_rec["relevant_tables"]),
            )
        )
    if decomposition_records:
        payload["decomposition"] = decomposition_quality(
            decomposition_records, embedder
        )
    if args.out:
        _write_json(args.out, payload)
    print(report.text_table())
    if decomposition_records:
        d = payload["decomposition"]
        print(
            f"IRR={d['IRR']:.3f} SR={d['SR']:.3f} SAR={d['SAR']:.3f} "
            f"(tables {d['SAR_tables']:.3f})"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lakeqa",
        description="Numerical question answering over CSV table lakes",
    )
    parser.add_argument("--config", help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="ingest a CSV directory into a corpus")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("infer-metadata", help="fill masked titles/headers")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fixtures", help="scripted chat fixture file")
    p.add_argument("--gold", help="gold metadata sidecar for F1 report")
    p.set_defaults(func=cmd_infer_metadata)

    p = sub.add_parser("graph", help="build or inspect the relationship graph")
    p.add_argument("action", choices=["build", "stats"])
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("decompose", help="decompose one question")
    p.add_argument("--question", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train-scorer", help="train the coverage scorer")
    p.add_argument("--triples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--step", type=float, default=0.05)
    p.set_defaults(func=cmd_train_scorer)

    p = sub.add_parser("retrieve", help="retrieve top-k tables for a question")
    p.add_argument("--question", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("answer", help="answer a question end to end")
    p.add_argument("--question", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--trace")
    p.add_argument("--plans", help="JSON map of question -> reference plan")
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("benchgen", help="synthesize a benchmark lake")
    p.add_argument("--seed-db", dest="seed_db", required=True)
    p.add_argument("--external")
    p.add_argument("--N", dest="n", type=int, default=0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--questions", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchgen)

    p = sub.add_parser("synth-seed", help="generate a synthetic seed database")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sources", type=int, default=4)
    p.set_defaults(func=cmd_synth_seed)

    p = sub.add_parser("synth-external", help="generate an external table pool")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=int, default=500)
    p.set_defaults(func=cmd_synth_external)

    p = sub.add_parser("eval", help="score predictions against gold questions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--k", type=int, action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
