"""Command-line entry point: one subcommand per stage plus scene generation and rendering."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config
from .hota import EvalError
from .ingest import ParseError, image_manifest, parse_queries, read_result_rows
from .pipeline import STAGES, StageError, run_pipeline, safe_id

EXIT_OK, EXIT_INPUT, EXIT_STAGE = 0, 1, 2

log = logging.getLogger("refertrack")

_INPUT_ERRORS = (ConfigError, ParseError, EvalError, FileNotFoundError, NotADirectoryError)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML config; defaults are used for missing keys")
    p.add_argument("--sequence", help="sequence directory (overrides paths.sequence_dir)")
    p.add_argument("--query-file", type=Path, help="queries JSON (overrides paths.query_file)")
    p.add_argument("--output", type=Path, help="output directory (overrides paths.output_dir)")
    p.add_argument("--mode", choices=("offline", "remote"),
                   help="offline = template captions + hashed encoder; remote = HTTP endpoints for both")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refertrack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check config and inputs without running anything")
    _common(p)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage from cached upstream artifacts")
        _common(p)
    p = sub.add_parser("pipeline", help="run every stage, or one with --stage")
    _common(p)
    p.add_argument("--stage", choices=STAGES, help="run only this stage")

    p = sub.add_parser("gen-scene", help="write a seeded synthetic sequence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--distractors", type=float, default=0.0)
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--location-queries", action="store_true")
    p.add_argument("--images", action="store_true", help="also render flat-shaded frames")

    p = sub.add_parser("render", help="draw selected boxes for each query onto the sequence images")
    _common(p)
    p.add_argument("--query-id", action="append", help="restrict to these query ids")
    return parser


def _load(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.sequence:
        cfg.paths.sequence_dir = args.sequence
    if args.query_file:
        cfg.paths.query_file = str(args.query_file)
    if args.output:
        cfg.paths.output_dir = str(args.output)
    if args.mode == "offline":
        cfg.captioner.mode, cfg.matcher.encoder = "template", "offline"
    elif args.mode == "remote":
        cfg.captioner.mode, cfg.matcher.encoder = "remote", "remote"
    return cfg


def _gen_scene(args) -> int:
    from .scene import SceneSpec, generate_scene, write_scene

    spec = SceneSpec(
        n_frames=args.frames, dropout=args.dropout, jitter=args.jitter,
        distractor_rate=args.distractors, n_queries=args.queries,
        location_queries=args.location_queries, render_images=args.images,
    )
    out = write_scene(generate_scene(spec, args.seed), args.output)
    print(out)
    return EXIT_OK


def _render(cfg: PipelineConfig, only) -> int:
    from .render import render_overlays

    images = image_manifest(Path(cfg.paths.sequence_dir) / "images")
    if not images:
        log.warning("no images under %s/images", cfg.paths.sequence_dir)
    for q in parse_queries(cfg.query_path()):
        if only and q.query_id not in only:
            continue
        path = cfg.out / "results" / f"{safe_id(q.query_id)}.csv"
        rows = read_result_rows(path)
        written = render_overlays(rows, images, cfg.out / "overlays" / safe_id(q.query_id), q.text,
                                  frames=sorted(images))
        print(f"{q.query_id}: {len(written)} frames")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-scene":
            return _gen_scene(args)
        cfg = _load(args)
        cfg.validate()
        if args.command == "validate":
            parse_queries(cfg.query_path())
            print("ok")
            return EXIT_OK
        if args.command == "render":
            return _render(cfg, args.query_id)
        if args.command == "pipeline":
            stages = (args.stage,) if args.stage else STAGES
        else:
            stages = (args.command,)
        result = run_pipeline(cfg, stages)
        if result.per_query:
            print((cfg.out / "eval.txt").read_text(encoding="utf-8"), end="")
        return EXIT_OK
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT if isinstance(exc.cause, _INPUT_ERRORS) else EXIT_STAGE
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
