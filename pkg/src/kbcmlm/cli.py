"""Command line entry point: one subcommand per pipeline stage plus ``run-all``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from kbcmlm._io import write_json
from kbcmlm.evaluation import RunReport, render_csv, render_json, render_text, score_run
from kbcmlm.kg_client import FetchSpec, fetch_entities
from kbcmlm.pipeline import STAGES, Flags, MissingInput, Pipeline, PipelineConfig, StageFailed
from kbcmlm.synthetic import desk_config, generate_world, write_world
from kbcmlm.trainer import PRESETS
from kbcmlm.vocab_builder import load_schema

EXIT_FAILED = 1
EXIT_MISSING = 2
EXIT_GATE = 3

# which config sections a preset overrides
PRESET_SECTIONS = {"paper-pretrain": ("pretrain", "repretrain"), "paper-finetune": ("finetune",)}


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out-dir", default="runs/default", help="artifact root (default: %(default)s)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--preset", action="append", choices=sorted(PRESETS), default=[], help="training preset")
    p.add_argument("--force", action="store_true", help="rerun even when inputs are unchanged")
    p.add_argument("--no-recode", action="store_true", help="random unit rows for new atoms")
    p.add_argument("--no-pretrain", action="store_true", help="skip re-pretraining")
    p.add_argument("--no-expand", action="store_true", help="base vocabulary only (no atoms)")


def _add_report_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    p.add_argument("--min-f1", type=float, help="exit nonzero when overall F1 is below this")
    p.add_argument("--match-on-id", action="store_true", help="compare entity ids instead of surfaces")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kbcmlm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_run_options(p)
        if stage == "evaluate":
            _add_report_options(p)
            p.add_argument("--predictions", help="score this file directly instead of the pipeline output")
            p.add_argument("--gold", help="gold file for --predictions (default: config test split)")
    p = sub.add_parser("run-all", help="run every stage in order")
    _add_run_options(p)
    _add_report_options(p)

    p = sub.add_parser("synthetic", help="write a generated world and its run config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0, help="world seed")
    p.add_argument("--sentences", type=int, default=2000)

    p = sub.add_parser("fetch-kg", help="materialize an entity dump from a knowledge graph endpoint")
    p.add_argument("--spec", required=True, help="JSON FetchSpec fields")
    p.add_argument("--schema", help="relation schema (default: bundled)")
    p.add_argument("--out", required=True, help="entity dump JSONL")
    return parser


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    for name in args.preset:
        fields = dataclasses.asdict(PRESETS[name])
        fields.pop("seed")
        for section in PRESET_SECTIONS[name]:
            setattr(cfg, section, fields)
    return cfg


def _pipeline(args) -> Pipeline:
    flags = Flags(no_recode=args.no_recode, no_pretrain=args.no_pretrain, no_expand=args.no_expand)
    return Pipeline(_config(args), args.out_dir, flags, force=args.force)


def _emit_report(report: RunReport, args) -> int:
    render = {"text": render_text, "csv": render_csv, "json": render_json}[args.format]
    sys.stdout.write(render(report))
    if args.min_f1 is not None and report.overall.f1 < args.min_f1:
        print(f"overall F1 {report.overall.f1:.4f} below gate {args.min_f1}", file=sys.stderr)
        return EXIT_GATE
    return 0


def _report_from_dir(pipe: Pipeline, match_on_id: bool) -> RunReport:
    return score_run(
        pipe.artifact("predict", "predictions.jsonl"), pipe.external("test"), match_on_id=match_on_id
    )


def _run(args) -> int:
    cmd = args.command
    if cmd == "synthetic":
        paths = write_world(generate_world(args.seed, n_sentences=args.sentences), args.out_dir)
        write_json(Path(args.out_dir) / "config.json", desk_config(paths))
        print(Path(args.out_dir) / "config.json")
        return 0
    if cmd == "fetch-kg":
        with open(args.spec, encoding="utf-8") as fh:
            spec = FetchSpec(**json.load(fh))
        result = fetch_entities(spec, load_schema(args.schema), args.out)
        print(f"{len(result.records)} records written to {args.out}")
        for rel, msg in sorted(result.failures.items()):
            print(f"failed {rel}: {msg}", file=sys.stderr)
        return EXIT_FAILED if result.failures else 0
    if cmd == "evaluate" and args.predictions:
        gold = args.gold or PipelineConfig.load(args.config).path("test")
        return _emit_report(score_run(args.predictions, gold, match_on_id=args.match_on_id), args)

    pipe = _pipeline(args)
    if cmd == "run-all":
        pipe.run_all(match_on_id=args.match_on_id)
        return _emit_report(_report_from_dir(pipe, args.match_on_id), args)
    if cmd == "evaluate":
        pipe.evaluate(match_on_id=args.match_on_id)
        return _emit_report(_report_from_dir(pipe, args.match_on_id), args)
    result = pipe.run(cmd)
    state = "unchanged" if result.skipped else f"done in {result.duration:.1f}s"
    print(f"{cmd}: {state}")
    for name, digest in result.outputs.items():
        print(f"  {name} {digest[:16]}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return _run(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
