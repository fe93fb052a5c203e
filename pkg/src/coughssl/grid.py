"""Cartesian hyperparameter grids over seeds, with resume and a pre-training cache.

Each (cell, seed) writes ``cells/<cell>/seed<k>/report.json`` last, so a cell
whose report exists is complete and is skipped on the next invocation.
Pre-trained encoders live in ``pretrain_cache/`` keyed by the pre-training
config hash and seed; cells differing only in downstream settings share them.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .config import ExperimentConfig
from .evalbench.metrics import METRIC_NAMES, EvalReport, SummaryRow, summarize
from .features import load_manifest
from .pipeline import evaluate_model, pretrained_for, run_finetune, write_report

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridCell:
    settings: tuple[tuple[str, str], ...]

    @property
    def name(self) -> str:
        if not self.settings:
            return "base"
        return "__".join(f"{k}-{v}" for k, v in self.settings)

    def apply(self, cfg: ExperimentConfig) -> ExperimentConfig:
        return cfg.with_overrides(dict(self.settings))


def grid_cells(cfg: ExperimentConfig) -> list[GridCell]:
    axes = cfg.grid.axes
    names = [a for a, _ in axes]
    return [GridCell(tuple(zip(names, combo))) for combo in itertools.product(*(v for _, v in axes))]


def _run_dir(out: Path, cell: GridCell, seed: int) -> Path:
    return out / "cells" / cell.name / f"seed{seed}"


def run_cell(cfg: ExperimentConfig, cell: GridCell, seed: int, manifest_path: Path, out: Path) -> EvalReport:
    """Fine-tune and evaluate one (cell, seed), reusing cached pre-training."""
    run_dir = _run_dir(out, cell, seed)
    report_path = run_dir / "report.json"
    if report_path.exists():
        return EvalReport.from_dict(json.loads(report_path.read_text(encoding="utf-8")))
    ccfg = cell.apply(cfg)
    manifest = load_manifest(manifest_path)
    pretrained = pretrained_for(ccfg, seed, manifest, out / "pretrain_cache") if ccfg.run.use_pretrained else None
    model = run_finetune(ccfg, seed, manifest, run_dir, pretrained)
    report, decisions = evaluate_model(model, ccfg, seed, manifest)
    report.extra["cell"] = cell.name
    write_report(report, decisions, run_dir)
    return report


def _pretrain_job(cfg: ExperimentConfig, cell: GridCell, seed: int, manifest_path: Path, out: Path) -> None:
    ccfg = cell.apply(cfg)
    if ccfg.run.use_pretrained:
        pretrained_for(ccfg, seed, load_manifest(manifest_path), out / "pretrain_cache")


def run_grid(cfg: ExperimentConfig, manifest_path: Path, out: Path, seeds=None, jobs: int | None = None
             ) -> list[SummaryRow]:
    """Run every (cell, seed) and write ``summary.tsv`` / ``summary.json``.

    With ``jobs > 1`` distinct pre-training runs go first in a process pool
    (so no two workers race on one cache entry), then the cells.
    """
    out = Path(out)
    seeds = tuple(seeds if seeds is not None else cfg.run.seeds)
    jobs = jobs if jobs is not None else cfg.grid.jobs
    cells = grid_cells(cfg)
    tasks = [(c, s) for c in cells for s in seeds]
    if jobs > 1:
        unique, seen = [], set()
        for c, s in tasks:
            key = (c.apply(cfg).contrastive, c.apply(cfg).encoder, s)
            if key not in seen:
                seen.add(key)
                unique.append((c, s))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_pretrain_job, *zip(*[(cfg, c, s, manifest_path, out) for c, s in unique])))
            reports = list(pool.map(run_cell, *zip(*[(cfg, c, s, manifest_path, out) for c, s in tasks])))
    else:
        reports = []
        for c, s in tasks:
            logger.info("cell %s seed %d", c.name, s)
            reports.append(run_cell(cfg, c, s, manifest_path, out))
    rows = []
    for i, cell in enumerate(cells):
        cell_reports = reports[i * len(seeds):(i + 1) * len(seeds)]
        rows.append(summarize(cell_reports, dict(cell.settings)))
    write_summary(rows, cfg, out)
    return rows


def format_summary(rows: list[SummaryRow], axes: list[str]) -> str:
    header = axes + ["n_runs"] + list(METRIC_NAMES) + ["average_f1"]
    lines = ["\t".join(header)]
    for r in rows:
        cols = [str(r.label.get(a, "")) for a in axes] + [str(r.n_runs)]
        cols += [r.formatted(m) for m in METRIC_NAMES] + [f"{100 * r.average_f1:.2f}"]
        lines.append("\t".join(cols))
    return "\n".join(lines) + "\n"


def write_summary(rows: list[SummaryRow], cfg: ExperimentConfig, out: Path) -> None:
    axes = [a for a, _ in cfg.grid.axes]
    (out / "summary.tsv").write_text(format_summary(rows, axes), encoding="utf-8")
    payload = [{"label": r.label, "n_runs": r.n_runs, "mean": r.mean, "std": r.std, "average_f1": r.average_f1}
               for r in rows]
    (out / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def with_grid(cfg: ExperimentConfig, axes: dict[str, list[str]]) -> ExperimentConfig:
    """Replace the grid axes programmatically."""
    return replace(cfg, grid=replace(cfg.grid, axes=tuple((k, tuple(str(v) for v in vs)) for k, vs in axes.items())))
