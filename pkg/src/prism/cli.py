"""``prism`` command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 aborted run, 3 integrity error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import BUILTIN_MOCKS, load_config
from .dataset import file_digest, load_benchmark, validate_benchmark
from .endpoints import EndpointClient
from .errors import ConfigError, DatasetError, IntegrityError, PrismError, RunAborted
from .instructions import (
    DEFAULT_VARIANT,
    Variant,
    build_contents_prompt,
    compose_query_specific,
    generate_query_specific,
    render_generic,
)
from .pipeline import load_manifest, make_manifest, run_benchmark, select_questions
from .scoring import (
    SCORE_MODES,
    ScoreReport,
    compare_runs,
    load_markers,
    render_comparison,
    render_table,
    score_run,
)
from .store import Store, resolve_store_root

EXIT_OK, EXIT_USAGE, EXIT_ABORTED, EXIT_INTEGRITY = 0, 1, 2, 3

ENV_HELP = """\
environment:
  PRISM_STORE        store root (overridden by --store)
  PRISM_CONFIG       config file (overridden by --config; default ./prism.yaml)
  PRISM_SEED         default seed
  PRISM_PARALLELISM  default worker count
  PRISM_INSTRUCTION  default instruction mode, e.g. generic:human1
  each endpoint's `credential` names the env var holding its bearer token
  built-in endpoints: {mocks}; any `mock:<spec>` name is an ad-hoc mock
  (spec: echo | echo-description | fixed:<text> | keyed:<map.json> | refuse)
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file with the endpoint registry")
    p.add_argument("--store", help="store directory (cache and runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="prism",
        description="Decoupled perception/reasoning VQA evaluation.",
        epilog=ENV_HELP.format(mocks=", ".join(BUILTIN_MOCKS)),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"prism {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    run = sub.add_parser("run", help="run a benchmark through the pipeline",
                         epilog=ENV_HELP.format(mocks=", ".join(BUILTIN_MOCKS)),
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(run)
    run.add_argument("--benchmark", help="JSONL or TSV benchmark file")
    run.add_argument("--mode", choices=("prism", "e2e"), default="prism")
    run.add_argument("--perception", help="vision endpoint name(s), comma-separated; "
                     "several names ensemble their descriptions; in e2e mode, the one vision endpoint")
    run.add_argument("--reasoning", help="text endpoint name (prism mode)")
    run.add_argument("--instruction", help="generic:<variant> or query-specific:<variant> "
                     "(variants: " + ", ".join(v.value for v in Variant) + ")")
    run.add_argument("--limit", type=int, help="subsample N questions (seeded, category-stratified)")
    run.add_argument("--seed", type=int)
    run.add_argument("--parallelism", type=int)
    run.add_argument("--resume", metavar="RUN_ID", help="continue an interrupted run")
    run.add_argument("--run-id", help="name for a new run (default: timestamp + digest)")
    run.add_argument("--contents-include-options", action="store_true",
                     help="show the options to the reasoning model when it writes the query-specific part")
    run.add_argument("--multi-image", action="store_true",
                     help="send every image of multi-image questions (default: first only)")
    run.add_argument("--no-answers", action="store_true",
                     help="ingest the benchmark without ground-truth answers (unscorable)")
    run.set_defaults(func=cmd_run)

    score = sub.add_parser("score", help="score a results file")
    score.add_argument("results", help="results.jsonl of a run")
    score.add_argument("--mode", choices=SCORE_MODES, required=True,
                       help="perception-eval: refusals fail, no fallback; "
                            "solver-eval: random fallback whenever matching fails")
    score.add_argument("--seed", type=int, default=None, help="fallback seed (default: run seed)")
    score.add_argument("--benchmark", help="benchmark file (default: from the run's run.json)")
    score.add_argument("--markers", help="refusal marker file, one phrase per line")
    score.add_argument("--out", help="report path (default: report.json next to the results)")
    score.add_argument("--label", help="row label in tables")
    score.set_defaults(func=cmd_score)

    compare = sub.add_parser("compare", help="per-category deltas between two reports (b - a)")
    compare.add_argument("report_a")
    compare.add_argument("report_b")
    compare.add_argument("--json", action="store_true", help="print the delta table as JSON")
    compare.set_defaults(func=cmd_compare)

    report = sub.add_parser("report", help="one table over several reports")
    report.add_argument("reports", nargs="+")
    report.add_argument("--labels", help="comma-separated row labels")
    report.set_defaults(func=cmd_report)

    instruct = sub.add_parser("instruct", help="print a perception instruction")
    _add_common(instruct)
    instruct.add_argument("--question", help="question text for a query-specific instruction")
    instruct.add_argument("--generic", metavar="VARIANT", default=DEFAULT_VARIANT.value,
                          help="generic variant (default human1)")
    instruct.add_argument("--contents", help="use this query-specific part instead of asking a model")
    instruct.add_argument("--reasoning", help="text endpoint that writes the query-specific part")
    instruct.add_argument("--dry-run", action="store_true",
                          help="print the few-shot prompt instead of calling a model")
    instruct.set_defaults(func=cmd_instruct)

    dataset = sub.add_parser("dataset", help="benchmark file utilities")
    dsub = dataset.add_subparsers(dest="dataset_command", parser_class=_Parser, required=True)
    validate = dsub.add_parser("validate", help="check a benchmark file")
    validate.add_argument("path")
    validate.add_argument("--format", choices=("jsonl", "tsv"))
    validate.set_defaults(func=cmd_validate)
    return parser


def _endpoint_names(raw: str | None) -> list[str]:
    return [n.strip() for n in (raw or "").split(",") if n.strip()]


def cmd_run(args) -> int:
    config = load_config(args.config)
    store = Store(resolve_store_root(args.store, config.store))
    parallelism = args.parallelism or config.parallelism

    if args.resume and not args.benchmark:
        run_dir = store.run_dir(args.resume)
        if not (run_dir / "run.json").exists():
            raise ConfigError(f"no run {args.resume!r} in {store.root}")
        manifest = load_manifest(run_dir)
        if args.parallelism:
            manifest = replace(manifest, parallelism=args.parallelism)
    else:
        if not args.benchmark:
            raise UsageError("run: --benchmark is required")
        perception = [config.endpoint(n) for n in _endpoint_names(args.perception)]
        if not perception:
            raise UsageError("run: --perception is required")
        reasoning = None
        if args.mode == "prism":
            if not args.reasoning:
                raise UsageError("run: --reasoning is required in prism mode")
            reasoning = config.endpoint(args.reasoning)
        manifest = make_manifest(
            args.benchmark, args.mode, perception, reasoning,
            run_id=args.resume or args.run_id,
            instruction=args.instruction or config.instruction,
            seed=config.seed if args.seed is None else args.seed,
            limit=args.limit,
            parallelism=parallelism,
            contents_include_options=args.contents_include_options,
            multi_image=args.multi_image,
            require_answers=not args.no_answers,
        )
    with EndpointClient(seed=manifest.seed) as client:
        path = run_benchmark(manifest, store, client)
    print(path)
    return EXIT_OK


def cmd_score(args) -> int:
    results = Path(args.results)
    if not results.exists():
        raise ConfigError(f"no such results file: {results}")
    run_json = results.parent / "run.json"
    manifest = load_manifest(results.parent) if run_json.exists() else None
    if args.benchmark:
        questions = load_benchmark(args.benchmark)
        if manifest is not None and manifest.limit is not None:
            ids = {q.id for q in select_questions(manifest)}
            questions = [q for q in questions if q.id in ids]
        digest = file_digest(args.benchmark)
    elif manifest is not None:
        if not manifest.require_answers:
            raise ConfigError("run was ingested with --no-answers; pass --benchmark with answers")
        questions = select_questions(manifest)
        digest = manifest.benchmark_digest
    else:
        raise UsageError("score: --benchmark is required when the results have no run.json")
    seed = args.seed if args.seed is not None else (manifest.seed if manifest else 0)
    markers = load_markers(args.markers) if args.markers else None
    report = score_run(results, questions, args.mode, seed, markers, benchmark_digest=digest)
    if manifest is not None:
        report.runs[0]["run_id"] = manifest.run_id
    report.label = args.label or (manifest.run_id if manifest else results.stem)
    out = Path(args.out) if args.out else results.parent / "report.json"
    report.save(out)
    print(render_table([report]))
    print(f"\nmicro {100 * report.micro:.1f}  n={report.n}  refusals={report.refusal_count}  "
          f"fallbacks={report.fallback_count}  degraded instructions={report.degraded_instruction_count}"
          f"  missing={len(report.missing)}")
    print(f"report: {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = ScoreReport.load(args.report_a)
    b = ScoreReport.load(args.report_b)
    cmp = compare_runs(a, b)
    if args.json:
        print(json.dumps(cmp, indent=2))
    else:
        print(render_comparison(cmp))
    return EXIT_OK


def cmd_report(args) -> int:
    reports = [ScoreReport.load(p) for p in args.reports]
    labels = _endpoint_names(args.labels) if args.labels else None
    if labels is not None and len(labels) != len(reports):
        raise UsageError("report: --labels must name every report")
    print(render_table(reports, labels))
    return EXIT_OK


def cmd_instruct(args) -> int:
    try:
        variant = Variant.parse(args.generic)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.dry_run:
        if not args.question:
            raise UsageError("instruct: --dry-run needs --question")
        print(build_contents_prompt(args.question))
        return EXIT_OK
    if args.contents:
        print(compose_query_specific(variant, args.contents))
        return EXIT_OK
    if args.question:
        if not args.reasoning:
            raise UsageError("instruct: a query-specific instruction needs --reasoning, --contents or --dry-run")
        config = load_config(args.config)
        reasoner = config.endpoint(args.reasoning)
        with EndpointClient() as client:
            part = generate_query_specific(client, reasoner, args.question)
        print(compose_query_specific(variant, part))
        return EXIT_OK
    print(render_generic(variant))
    return EXIT_OK


def cmd_validate(args) -> int:
    problems = validate_benchmark(args.path, args.format)
    if problems:
        for p in problems:
            print(f"{args.path}: {p}", file=sys.stderr)
        print(f"{len(problems)} problem(s)", file=sys.stderr)
        return EXIT_USAGE
    n = len(load_benchmark(args.path, args.format))
    print(f"{args.path}: {n} questions OK")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"prism: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunAborted as exc:
        print(f"prism: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except IntegrityError as exc:
        print(f"prism: integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ConfigError, DatasetError) as exc:
        print(f"prism: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PrismError as exc:
        print(f"prism: error: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
