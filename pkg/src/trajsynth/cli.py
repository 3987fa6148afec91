"""Command-line entry point: ``trajsynth <command> --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .backend import RetriesExhaustedError
from .model import write_jsonl
from .pipeline import STAGES, ConfigError, Pipeline, PipelineError, load_config, plan
from .sft import compute_stats, read_conversations, subsample, transform_reasoning

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_EXHAUSTED = 4

STAGE_COMMANDS = {
    "personas": "personas",
    "explore": "explore",
    "tasks": "tasks",
    "rollout": "rollout",
    "judge": "judge",
    "filter": "filter",
    "export": "export",
    "stats": "stats",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="pipeline config (TOML)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. backend.workers=4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajsynth", description="Synthesize and filter web-agent trajectories.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        _common(p)
        p.add_argument("--force", action="store_true", help="recompute even if outputs are up to date")

    p = sub.add_parser("run", help="run every stage and write manifest.json")
    _common(p)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("plan", help="print the schedule without calling any backend")
    _common(p)

    p = sub.add_parser("ablate", help="ablation corpora and re-judging")
    _common(p)
    kinds = p.add_subparsers(dest="kind", required=True)
    kinds.add_parser("no-hints", help="re-judge without hints and report verdict flips")
    kinds.add_parser("no-judge", help="export every judged trajectory regardless of verdict")
    for name, helptext in (
        ("truncate", "cut reasoning blocks to --chars characters"),
        ("remove-reasoning", "drop reasoning blocks"),
        ("subsample", "site-stratified sample of --n conversations"),
    ):
        k = kinds.add_parser(name, help=helptext)
        k.add_argument("--input", type=Path, help="conversations to transform (default: OUTPUT_DIR/sft.jsonl)")
        k.add_argument("--output", type=Path, help="where to write the result")
        if name == "truncate":
            k.add_argument("--chars", type=int, required=True)
        if name == "subsample":
            k.add_argument("--n", type=int, required=True)
            k.add_argument("--seed", type=int, default=None, help="default: seeds.pipeline")
    return parser


def _transform(pipe: Pipeline, args: argparse.Namespace) -> dict:
    src = args.input or pipe.path("sft.jsonl")
    convs = read_conversations(src)
    if args.kind == "truncate":
        if args.chars <= 0:
            raise ConfigError("--chars must be positive")
        out = transform_reasoning(convs, "truncate", args.chars)
        default = f"sft_truncate{args.chars}.jsonl"
    elif args.kind == "remove-reasoning":
        out = transform_reasoning(convs, "remove")
        default = "sft_no_reasoning.jsonl"
    else:
        seed = pipe.config.pipeline_seed if args.seed is None else args.seed
        try:
            out = subsample(convs, args.n, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        default = f"sft_subsample{args.n}.jsonl"
    dest = args.output or pipe.path(default)
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(dest, out)
    stats = compute_stats(out)
    return {"output": str(dest), "conversations": stats.trajectories, "examples": stats.examples}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        if args.command == "plan":
            print(json.dumps(plan(config), indent=1))
            return EXIT_OK
        pipe = Pipeline(config)
        if args.command == "run":
            manifest = pipe.run(force=args.force)
            print(json.dumps(manifest.to_dict()["counts"], indent=1))
            return EXIT_PARTIAL if manifest.errors else EXIT_OK
        if args.command == "ablate":
            if args.kind == "no-hints":
                result = pipe.ablate_no_hints()
            elif args.kind == "no-judge":
                result = pipe.ablate_no_judge()
            else:
                result = _transform(pipe, args)
            print(json.dumps(result, indent=1))
            return EXIT_OK
        stage = STAGE_COMMANDS[args.command]
        assert stage in STAGES
        result = pipe.run_stage(stage, force=args.force)
        print(json.dumps(result, indent=1))
        return EXIT_PARTIAL if result["errors"] else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineError, RetriesExhaustedError) as exc:
        print(f"backend exhausted: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
