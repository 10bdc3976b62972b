"""Command-line entry point: build-data, infer, eval, judge, mock-serve.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import yaml

from . import __version__
from .core import DPError, RecordInstance, Role, TaskKind, label_for_task
from .serializer import Mode

log = logging.getLogger("dpinstruct")

CONFIG_ENV = "DPINSTRUCT_CONFIG"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or configuration; reported with exit code 2."""


# -- helpers ----------------------------------------------------------------


def _profile(args, url: str):
    from .inference import EndpointProfile, Sampling

    return EndpointProfile(
        base_url=url,
        model_name=args.model,
        sampling=Sampling(args.temperature, args.top_p, args.top_k, args.max_tokens),
        prompt_wrapper=args.wrapper,
        timeout=args.timeout,
        max_retries=args.max_retries,
        max_in_flight=args.max_in_flight,
        api_key=os.environ.get("DPINSTRUCT_API_KEY"),
    )


def _resolve(args, path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else Path(args.data_root) / path


def _load_manifest_dataset(args):
    from .ingest import load_dataset

    manifest = args.manifest or Path(args.dataset) / "manifest.yaml"
    manifest = _resolve(args, manifest)
    if not manifest.is_file():
        raise UsageError(f"dataset manifest not found: {manifest}")
    return load_dataset(manifest)


def _add_endpoint_flags(p: argparse.ArgumentParser, default_endpoint: str | None = None) -> None:
    g = p.add_argument_group("endpoint")
    g.add_argument("--endpoint", default=default_endpoint,
                   help="chat-completion base URL, or 'mock' for the in-process rule backend")
    g.add_argument("--model", default="default", help="model name sent with each request")
    g.add_argument("--temperature", type=float, default=0.35, help="sampling temperature (default 0.35)")
    g.add_argument("--top-p", type=float, default=0.9, help="nucleus sampling mass (default 0.9)")
    g.add_argument("--top-k", type=int, default=20, help="top-k sampling (default 20)")
    g.add_argument("--max-tokens", type=int, default=1024, help="completion token limit")
    g.add_argument("--wrapper", default=None, help="user-turn template containing {prompt}")
    g.add_argument("--timeout", type=float, default=60.0, help="per-request timeout in seconds")
    g.add_argument("--max-retries", type=int, default=3, help="retries on 429/5xx/timeouts")
    g.add_argument("--max-in-flight", type=int, default=8, help="concurrent request limit")


# -- build-data -------------------------------------------------------------


def cmd_build_data(args) -> int:
    from . import composer
    from .ingest import load_dataset
    from .synthetic import synthetic_pool

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        datasets = {}
        for m in args.manifest:
            ds = load_dataset(_resolve(args, m))
            datasets[ds.descriptor.id] = ds
        stats = [composer.pool_stats(k, composer.training_pool(v)) for k, v in datasets.items()]
    else:
        print("no --manifest given: using the synthetic reference-shaped pool")
        datasets = synthetic_pool(args.seed)
        stats = composer.reference_pool()

    plan = composer.plan_quotas(stats, composer.reference_quota_config(args.seed, args.dataset_knowledge))
    entries = composer.build_task_corpus(plan, datasets)
    composer.export_corpus(entries, out / "task_corpus.jsonl", args.format)
    counts = Counter(e.dataset for e in entries)
    positives = Counter(e.dataset for e in entries if e.gold.is_yes)
    print(f"{'dataset':<22}{'task':<6}{'entries':>9}{'positives':>11}")
    for q in plan.quotas:
        pos = str(positives[q.dataset]) if q.task.is_binary else "N/A"
        print(f"{q.dataset:<22}{q.task.value:<6}{counts[q.dataset]:>9}{pos:>11}")
    print(f"{'total':<28}{len(entries):>9}")

    if args.reasoning:
        if not args.teacher:
            raise UsageError("--reasoning needs --teacher (a URL or 'mock')")
        from .inference import EndpointProfile, MockConfig, in_process_client
        from .inference.client import ChatClient

        if args.teacher == "mock":
            teacher = in_process_client(MockConfig(mode="rule"))
        else:
            teacher = ChatClient(EndpointProfile(args.teacher, max_in_flight=args.max_in_flight).with_env("DPINSTRUCT_TEACHER"))
        result = composer.build_reasoning_corpus(args.reasoning, datasets, teacher, plan,
                                                 retries=args.retries, seed=args.seed)
        kept, filtered = composer.filter_corpus(result.entries, args.novelty_threshold)
        composer.export_corpus(kept, out / "reasoning_corpus.jsonl", args.format)
        by_task = Counter(e.task.value for e in result.entries)
        print(f"reasoning plan {args.reasoning}: {result.planned} planned before filtering "
              f"({', '.join(f'{t} {n}' for t, n in sorted(by_task.items()))})")
        print(f"dropped by teacher check: {len(result.dropped)}; dropped by quality filter: {len(filtered)}; "
              f"kept: {len(kept)}")

    composer.emit_tuning_config(out / "tuning_config.txt")
    print(f"wrote {out}")
    return EXIT_OK


# -- infer ------------------------------------------------------------------


def _client(args, oracle=None):
    from .inference import ChatClient, MockConfig, in_process_client

    if not args.endpoint:
        raise UsageError("--endpoint is required (a URL or 'mock')")
    if args.endpoint == "mock":
        return in_process_client(MockConfig(mode="rule", oracle=oracle) if oracle else MockConfig(mode="rule"))
    return ChatClient(_profile(args, args.endpoint))


def _infer_seen(args, out: Path) -> int:
    from .knowledge import MissingPolicy
    from .pipelines import RunSpec, build_run_prompts, gold_records, rule_oracle, run_task, write_jsonl

    dataset = _load_manifest_dataset(args)
    if dataset.descriptor.task.value.lower() != args.task:
        raise UsageError(f"dataset {dataset.descriptor.id} is a {dataset.descriptor.task.value} dataset")
    spec = RunSpec(
        dataset,
        mode=Mode(args.mode),
        shots=args.shots,
        dataset_knowledge=args.knowledge == "+dataset",
        policy=MissingPolicy(args.policy) if args.policy else None,
        split=args.split,
        fewshot_dir=_resolve(args, args.fewshot_dir) if args.fewshot_dir else None,
        output=out / "predictions.jsonl",
    )
    pairs = build_run_prompts(spec)
    write_jsonl(gold_records(pairs, dataset.descriptor.id), out / "gold.jsonl")
    preds = run_task(spec, _client(args, rule_oracle(pairs)))
    failed = [p for p in preds if p.error]
    print(f"{len(preds)} predictions written to {out / 'predictions.jsonl'} ({len(failed)} failed)")
    if preds and len(failed) == len(preds) and all(p.raw_text is None for p in failed):
        print(f"error: endpoint unreachable: {failed[0].error}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _infer_cta(args, out: Path) -> int:
    from .inference import RuleOracle
    from .pipelines import CtaSpec, run_cta, write_jsonl

    if not args.table:
        raise UsageError("--task cta needs --table")
    table = json.loads(_resolve(args, args.table).read_text(encoding="utf-8"))
    columns = table["columns"]
    spec = CtaSpec(
        table=tuple(RecordInstance(tuple((f"v{i}", str(v)) for i, v in enumerate(c["values"])), Role.COLUMN)
                    for c in columns),
        candidate_domains=tuple(table["candidate_domains"]),
        candidate_types=table["candidate_types"] if isinstance(table["candidate_types"], dict)
        else tuple(table["candidate_types"]),
        samples_per_column=args.samples,
    )
    oracle = RuleOracle(by_text=[("Your task is to classify the domain of a table", table.get("domain", ""))])
    for i, c in enumerate(columns):
        oracle.by_text.append((f"Column values: {', '.join(spec.column_values(i))}", c.get("type", "")))
    result = run_cta(spec, _client(args, oracle), two_stage=args.stages == "two", cot=args.cot == "on")
    name = table.get("id", Path(args.table).stem)
    preds, gold = [], []
    for i, (c, label) in enumerate(zip(columns, result.columns)):
        uid = f"{name}-col{i}"
        preds.append({"instance_id": uid, "dataset": name, "task": "CTA", "prompt_hash": None,
                      "raw_text": result.raw[i + (1 if args.stages == "two" else 0)],
                      "parsed_label": label.value if label else None,
                      "confidence_source": None, "error": None if label else "abstained"})
        gold.append({"instance_id": uid, "dataset": name, "task": "CTA", "gold": c.get("type")})
    write_jsonl(preds, out / "predictions.jsonl")
    write_jsonl(gold, out / "gold.jsonl")
    print(f"domain: {result.domain}; {len(preds)} columns annotated with {result.requests} requests")
    return EXIT_OK


def _infer_ave(args, out: Path) -> int:
    from .inference import RuleOracle
    from .pipelines import ave_prompt, run_ave, read_jsonl, write_jsonl

    if not args.input:
        raise UsageError("--task ave needs --input")
    rows = read_jsonl(_resolve(args, args.input))
    preds, gold = [], []
    for row in rows:
        desc = RecordInstance((("description", row["description"]),), Role.TEXT)
        attrs = list(row["attributes"])
        oracle = RuleOracle(by_text=[(ave_prompt(desc, a)[1], str(row["attributes"][a])) for a in attrs])
        values = run_ave(desc, attrs, _client(args, oracle))
        for a in attrs:
            uid = f"{row['id']}:{a}"
            preds.append({"instance_id": uid, "dataset": args.dataset or "ave", "task": "AVE", "prompt_hash": None,
                          "raw_text": None, "parsed_label": values[a].value, "confidence_source": None,
                          "error": None})
            gold.append({"instance_id": uid, "dataset": args.dataset or "ave", "task": "AVE",
                         "gold": label_for_task(TaskKind.AVE, str(row["attributes"][a])).value})
    write_jsonl(preds, out / "predictions.jsonl")
    write_jsonl(gold, out / "gold.jsonl")
    print(f"{len(preds)} attribute values extracted")
    return EXIT_OK


def cmd_infer(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "cta":
        return _infer_cta(args, out)
    if args.task == "ave":
        return _infer_ave(args, out)
    if not args.dataset and not args.manifest:
        raise UsageError(f"--task {args.task} needs --dataset or --manifest")
    return _infer_seen(args, out)


# -- eval -------------------------------------------------------------------


def _read_predictions(path: Path) -> dict[str, dict]:
    from .pipelines import read_jsonl

    return {r["instance_id"]: r for r in read_jsonl(path)}


def _report(pred_path: Path, gold_path: Path):
    from .evaluation import MetricReport, score_dataset

    preds = _read_predictions(pred_path)
    gold = _read_predictions(gold_path)
    report = MetricReport()
    by_dataset: dict[str, list[str]] = {}
    for uid, g in gold.items():
        by_dataset.setdefault(g["dataset"], []).append(uid)
    for ds, ids in by_dataset.items():
        task = TaskKind.parse(gold[ids[0]]["task"])
        g_map = {i: label_for_task(task, gold[i]["gold"]) for i in ids}
        p_map = {}
        for uid, rec in preds.items():
            if uid in g_map or rec.get("dataset") == ds:
                text = rec.get("parsed_label")
                p_map[uid] = None if text is None else label_for_task(task, text)
        report.add(score_dataset(ds, task, p_map, g_map))
    return report


def cmd_eval(args) -> int:
    from .evaluation import compare_report

    if args.pred and args.compare:
        raise UsageError("--pred and --compare are mutually exclusive")
    pred_files = [Path(p) for p in (args.compare or ([args.pred] if args.pred else []))]
    if not pred_files:
        raise UsageError("give --pred FILE or --compare FILE [FILE ...]")
    for p in pred_files:
        if not p.is_file():
            raise UsageError(f"prediction file not found: {p}")
    reports = []
    for p in pred_files:
        gold = Path(args.gold) if args.gold else p.with_name("gold.jsonl")
        if not gold.is_file():
            raise UsageError(f"gold file not found: {gold}")
        reports.append((p.parent.name if p.stem == "predictions" else p.stem, _report(p, gold)))

    if len(reports) == 1:
        report = reports[0][1]
        print(report.render())
        if args.json:
            print("\n".join(report.to_records()))
    else:
        print(compare_report(reports).render())
    return EXIT_OK


# -- judge ------------------------------------------------------------------


def cmd_judge(args) -> int:
    from .inference import MockConfig, in_process_client
    from .pipelines import JudgeCase, aggregate_judgments, judge_many, read_jsonl

    for p in (args.answers_a, args.answers_b):
        if not Path(p).is_file():
            raise UsageError(f"answer file not found: {p}")
    a_rows = {r["case_id"]: r for r in read_jsonl(args.answers_a)}
    b_rows = {r["case_id"]: r for r in read_jsonl(args.answers_b)}
    if not a_rows or not b_rows:
        raise UsageError("answer files are empty")
    if a_rows.keys() != b_rows.keys():
        raise UsageError("answer files cover different case ids")
    cases = [
        JudgeCase(cid, a_rows[cid]["question"], a_rows[cid]["answer"], b_rows[cid]["answer"],
                  a_rows[cid].get("dataset", ""))
        for cid in sorted(a_rows)
    ]
    if args.replay:
        mapping = json.loads(Path(args.replay).read_text(encoding="utf-8"))
        client = in_process_client(MockConfig(mode="replay", replay=mapping, replay_fallback=None))
    else:
        client = _client(args)
    results = judge_many(cases, client, seed=args.seed)
    verdicts = [r for r in results if not isinstance(r, Exception)]
    bad = len(results) - len(verdicts)
    report = aggregate_judgments(verdicts)
    print(report.render(args.names[0], args.names[1]))
    if args.out:
        from .pipelines import write_jsonl

        write_jsonl([v.to_json() for v in verdicts], args.out)
    rate = bad / len(results)
    print(f"unparseable or failed verdicts: {bad} of {len(results)}")
    if rate > args.max_unparseable:
        print(f"error: unparseable verdict rate {rate:.2%} exceeds {args.max_unparseable:.2%}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- mock-serve -------------------------------------------------------------


def cmd_mock_serve(args) -> int:
    import uvicorn

    from .inference import MockConfig, RuleOracle, create_app
    from .inference.mock import bind_socket
    from .pipelines import read_jsonl

    if args.mode == "replay" and not args.replay_map:
        raise UsageError("--mode replay needs --replay-map")
    config = MockConfig(mode=args.mode)
    if args.replay_map:
        config.replay = json.loads(Path(args.replay_map).read_text(encoding="utf-8"))
        config.replay_fallback = None if args.fallback == "404" else args.fallback
    if args.gold:
        oracle = RuleOracle()
        for rec in read_jsonl(args.gold):
            if rec.get("prompt_hash") and rec.get("gold") is not None:
                oracle.by_hash[rec["prompt_hash"]] = rec["gold"]
        config.oracle = oracle
    sock = bind_socket(args.host, args.port)
    print(f"mock backend ({args.mode}) on http://{args.host}:{sock.getsockname()[1]}", flush=True)
    server = uvicorn.Server(uvicorn.Config(create_app(config), log_level=args.log_level.lower()))
    server.run(sockets=[sock])
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpinstruct",
        description="Build instruction data for tabular data preprocessing and evaluate LLMs on it.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=os.environ.get(CONFIG_ENV),
                        help=f"YAML file with flag defaults (also ${CONFIG_ENV})")
    parser.add_argument("--seed", type=int, default=0, help="seed for sampling and judge ordering")
    parser.add_argument("--data-root", default=".", help="base directory for relative input paths")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("build-data", help="write task/reasoning corpora and the tuning config")
    p.add_argument("--plan", choices=["paper"], default="paper", help="quota plan (published per-dataset targets)")
    p.add_argument("--manifest", action="append", help="dataset manifest (repeatable); default: synthetic pool")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=["native", "instruction-triplet"], default="native",
                   help="corpus line format")
    p.add_argument("--dataset-knowledge", action="store_true", help="inject dataset-specific knowledge")
    p.add_argument("--reasoning", choices=["r8k", "r11k", "r14k", "r20k"], help="also build a reasoning corpus")
    p.add_argument("--teacher", help="teacher endpoint URL, or 'mock'")
    p.add_argument("--retries", type=int, default=2, help="teacher re-requests on a wrong final answer")
    p.add_argument("--novelty-threshold", type=float, default=0.35, help="quality filter threshold")
    p.add_argument("--max-in-flight", type=int, default=8, help="concurrent teacher requests")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("infer", help="run a model over a dataset and write predictions")
    p.add_argument("--task", required=True, choices=["ed", "di", "sm", "em", "cta", "ave"], help="task to run")
    p.add_argument("--dataset", help="dataset id (manifest at <data-root>/<dataset>/manifest.yaml)")
    p.add_argument("--manifest", help="explicit dataset manifest path")
    p.add_argument("--split", default="test", help="split to predict (default test)")
    p.add_argument("--shots", type=int, choices=[0, 3], default=0, help="few-shot examples per prompt")
    p.add_argument("--fewshot-dir", help="directory of <dataset>.json few-shot fixtures")
    p.add_argument("--knowledge", choices=["general", "+dataset"], default="general",
                   help="general knowledge only, or add dataset-specific rules")
    p.add_argument("--policy", choices=["is-error", "not-error"], help="ED missing-value policy")
    p.add_argument("--mode", choices=["task", "reasoning"], default="task", help="prompt style")
    p.add_argument("--stages", choices=["one", "two"], default="two", help="CTA: one- or two-stage")
    p.add_argument("--cot", choices=["on", "off"], default="on", help="CTA: step-by-step instructions")
    p.add_argument("--table", help="CTA: table JSON file")
    p.add_argument("--samples", type=int, default=5, help="CTA: sample values per column")
    p.add_argument("--input", help="AVE: JSONL of {id, description, attributes}")
    p.add_argument("--out", required=True, help="output directory for predictions.jsonl and gold.jsonl")
    _add_endpoint_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against gold labels")
    p.add_argument("--pred", help="prediction file")
    p.add_argument("--gold", help="gold file (default: gold.jsonl next to each prediction file)")
    p.add_argument("--compare", nargs="+", help="several prediction files, shown side by side")
    p.add_argument("--json", action="store_true", help="also print line-delimited records")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("judge", help="head-to-head comparison of two answer files")
    p.add_argument("--answers-a", required=True, help="JSONL of {case_id, dataset, question, answer}")
    p.add_argument("--answers-b", required=True, help="JSONL with the same case ids")
    p.add_argument("--names", nargs=2, default=["A", "B"], help="column names for the two systems")
    p.add_argument("--replay", help="JSON map prompt-hash -> judge reply (offline judge)")
    p.add_argument("--max-unparseable", type=float, default=0.1, help="tolerated unparseable verdict share")
    p.add_argument("--out", help="write verdicts as JSONL")
    _add_endpoint_flags(p)
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("mock-serve", help="serve the deterministic mock backend")
    p.add_argument("--mode", choices=["echo", "replay", "rule"], default="echo", help="answering mode")
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    p.add_argument("--port", type=int, default=8099, help="bind port")
    p.add_argument("--replay-map", help="JSON map prompt-hash -> reply (replay mode)")
    p.add_argument("--fallback", default="404", help="reply for unknown prompts in replay mode, or 404")
    p.add_argument("--gold", help="gold.jsonl from infer (rule mode)")
    p.set_defaults(func=cmd_mock_serve)
    return parser


def _apply_config(parser: argparse.ArgumentParser, path: str) -> None:
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    data = yaml.safe_load(cfg_path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{cfg_path}: config must be a mapping")
    commands = {k: v for k, v in data.items() if isinstance(v, dict)}
    parser.set_defaults(**{k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)})
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, values in commands.items():
        if name not in subparsers.choices:
            raise UsageError(f"{cfg_path}: unknown command section {name!r}")
        subparsers.choices[name].set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    early = argparse.ArgumentParser(add_help=False)
    early.add_argument("--config", default=os.environ.get(CONFIG_ENV))
    known, _ = early.parse_known_args(argv)
    try:
        if known.config:
            _apply_config(parser, known.config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DPError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
