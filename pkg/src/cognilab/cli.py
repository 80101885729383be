"""Command-line entry point: ``cognilab <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from cognilab import pipeline, reports
from cognilab.config import MODES, RunConfig, desk_config

ENV_RUN_DIR = "COGNILAB_RUN_DIR"
COMMANDS = ("gen-data", "clean", "label", "split", "train", "eval", "analyze-heads", "analyze-attn",
            "analyze-pca", "stats", "report")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON (default: built-in desk config)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--run-dir", type=Path,
                        help=f"workspace root (default: ${ENV_RUN_DIR} or ./workspace)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cognilab", description="Staged-curriculum training and head analysis.")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)
    helps = {
        "gen-data": "write synthetic raw items for every tier",
        "clean": "normalise and filter raw items",
        "label": "assign difficulty stages with the complexity classifier",
        "split": "stratified train/val split and tokenizer training",
        "train": "train one run (curriculum, baseline, shuffled or reset_at_boundaries)",
        "eval": "summarise success/step-rate curves and threshold crossings",
        "analyze-heads": "saliency-based specialised-head detection per checkpoint",
        "analyze-attn": "attention statistics per checkpoint",
        "analyze-pca": "PCA structure score per checkpoint",
        "stats": "paired permutation and t tests across runs",
        "report": "emit CSV tables and SVG charts",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "train":
            sp.add_argument("--mode", choices=MODES, default="curriculum")
        if name.startswith("analyze-"):
            sp.add_argument("--run", help="analyse only this run directory name")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def workspace(args) -> pipeline.Workspace:
    root = args.run_dir or os.environ.get(ENV_RUN_DIR) or "workspace"
    return pipeline.Workspace(Path(root))


def dispatch(args) -> dict:
    ws = workspace(args)
    cfg = load_config(args)
    cmd = args.command
    if cmd == "gen-data":
        return pipeline.gen_data(ws, cfg)
    if cmd == "clean":
        return pipeline.clean(ws, cfg)
    if cmd == "label":
        return pipeline.label(ws, cfg)
    if cmd == "split":
        return pipeline.split(ws, cfg)
    if cmd == "train":
        return pipeline.train(ws, cfg, args.mode, cfg.seed)
    if cmd == "eval":
        return pipeline.evaluate(ws)
    if cmd.startswith("analyze-"):
        step = {"analyze-heads": pipeline.analyze_heads, "analyze-attn": pipeline.analyze_attn,
                "analyze-pca": pipeline.analyze_pca}[cmd]
        return {r.name: step(ws, r) for r in pipeline.select_runs(ws, args.run)}
    if cmd == "stats":
        return pipeline.run_stats(ws)
    if cmd == "report":
        return {"files": [p.name for p in reports.emit_report(ws)]}
    raise AssertionError(cmd)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = dispatch(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"cognilab {args.command}: error: {msg}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
