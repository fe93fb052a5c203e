"""``coughssl`` command-line entry point.

Commands: ``synth``, ``pretrain``, ``finetune``, ``evaluate``, ``benchmark``,
``grid``. On failure one line ``error: <ErrorClass>: <message>`` goes to
stderr and the exit code is 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, load_config
from .diffcore import load_store
from .errors import CoughSSLError
from .features import load_manifest
from .grid import format_summary, run_grid
from .pipeline import (
    RunPaths,
    evaluate_model,
    resolve_paths,
    run_benchmark,
    run_evaluate,
    run_finetune,
    run_pretrain,
    run_synth,
    write_report,
)

COMMANDS = ("synth", "pretrain", "finetune", "evaluate", "benchmark", "grid")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coughssl", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="INI config file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=None, help="override run.seeds with this single seed")
    parser.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    parser.add_argument("--quiet", action="store_true", help="only log warnings")
    parser.add_argument("--jobs", type=int, default=None, help="grid worker processes (overrides grid.jobs)")
    return parser


def _manifest(paths: RunPaths):
    if not paths.manifest.exists():
        raise FileNotFoundError(f"manifest not found: {paths.manifest}")
    return load_manifest(paths.manifest)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_synth(cfg: ExperimentConfig, seed: int, paths: RunPaths) -> None:
    manifest = run_synth(cfg, paths)
    logging.info("wrote %d recordings to %s", len(manifest), paths.corpus_dir)


def cmd_pretrain(cfg: ExperimentConfig, seed: int, paths: RunPaths) -> None:
    result = run_pretrain(cfg, seed, _manifest(paths), paths.out / "pretrain")
    logging.info("pre-training done: loss %.4f -> %.4f", result.losses[0], result.losses[-1])


def cmd_finetune(cfg: ExperimentConfig, seed: int, paths: RunPaths) -> None:
    manifest = _manifest(paths)
    pretrained = None
    if cfg.run.use_pretrained:
        pretrained = load_store(_require(paths.pretrained, "pre-trained encoder"),
                                expect_encoder_hash=cfg.encoder.hash())
    out_dir = paths.out / "finetune"
    model = run_finetune(cfg, seed, manifest, out_dir, pretrained)
    report, decisions = evaluate_model(model, cfg, seed, manifest)
    write_report(report, decisions, out_dir)
    logging.info("test ROC-AUC %s", report.roc_auc)


def cmd_evaluate(cfg: ExperimentConfig, seed: int, paths: RunPaths) -> None:
    report = run_evaluate(cfg, seed, _manifest(paths), _require(paths.model, "model"), paths.out / "evaluate")
    sys.stdout.write(report.to_text())


def cmd_benchmark(cfg: ExperimentConfig, seed: int, paths: RunPaths) -> None:
    run_benchmark(cfg, seed, paths.out / "benchmark", paths.model if paths.model.exists() else None)
    sys.stdout.write((paths.out / "benchmark" / "latency.tsv").read_text(encoding="utf-8"))


def cmd_grid(cfg: ExperimentConfig, seeds, paths: RunPaths, jobs: int | None) -> None:
    _require(paths.manifest, "manifest")
    rows = run_grid(cfg, paths.manifest, paths.out, seeds=seeds, jobs=jobs)
    sys.stdout.write(format_summary(rows, [a for a, _ in cfg.grid.axes]))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = replace(cfg, run=replace(cfg.run, phase=args.command))
        seeds = (args.seed,) if args.seed is not None else cfg.run.seeds
        config_dir = args.config.parent if args.config is not None else None
        paths = resolve_paths(cfg, args.out, config_dir)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "grid":
            cmd_grid(cfg, seeds, paths, args.jobs)
        else:
            handler = globals()[f"cmd_{args.command}"]
            handler(cfg, seeds[0], paths)
    except (CoughSSLError, OSError, ValueError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
