"""Phase runners that turn a config plus a run directory into artifacts.

Run directory layout (``out``)::

    corpus/                 synthetic corpus (synth)
    pretrain/               encoder.cswt, head.cswt, train_log.tsv, config.ini
    finetune/               model.cswt, train_log.tsv, config.ini
    evaluate/               report.txt, report.json, predictions.tsv, config.ini
    benchmark/              latency.tsv, config.ini

Input directories named by ``[paths]`` are only ever read.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .config import ExperimentConfig, dump_config
from .contrastive import PretrainResult, pretrain
from .diffcore import ParameterStore, config_hash, load_store, save_store
from .downstream import (
    DownstreamModel,
    aggregate_participant,
    branch_configs,
    build_model,
    finetune,
    labeled_clips,
    model_from_store,
    predict_proba,
)
from .errors import EmptySplit
from .evalbench.latency import LatencyStats, benchmark_inference, format_table
from .evalbench.metrics import EvalReport, compute_metrics
from .evalbench.synth import generate_synthetic_corpus
from .features import DatasetManifest, MelClip, build_clip_index
from .rng import stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunPaths:
    out: Path
    corpus_dir: Path
    manifest: Path
    pretrained: Path
    model: Path


def resolve_paths(cfg: ExperimentConfig, out: str | Path, config_dir: str | Path | None = None) -> RunPaths:
    """Relative ``[paths]`` entries resolve against the config file's directory."""
    out = Path(out)
    base = Path(config_dir) if config_dir is not None else Path.cwd()

    def pick(value: str, default: Path) -> Path:
        if not value:
            return default
        p = Path(value)
        return p if p.is_absolute() else base / p

    corpus = pick(cfg.paths.corpus_dir, out / "corpus")
    return RunPaths(
        out=out,
        corpus_dir=corpus,
        manifest=pick(cfg.paths.manifest, corpus / "manifest.tsv"),
        pretrained=pick(cfg.paths.pretrained, out / "pretrain" / "encoder.cswt"),
        model=pick(cfg.paths.model, out / "finetune" / "model.cswt"),
    )


def _snapshot(cfg: ExperimentConfig, phase_dir: Path, seed: int) -> None:
    phase_dir.mkdir(parents=True, exist_ok=True)
    text = f"# config_hash={cfg.hash()} seed={seed}\n" + dump_config(cfg)
    (phase_dir / "config.ini").write_text(text, encoding="utf-8")


_INDEX_CACHE: dict[tuple, dict[str, list[MelClip]]] = {}


def clip_index_for(manifest: DatasetManifest, cfg: ExperimentConfig, splits, with_labels: bool = True):
    """Memoized clip index; keyed on the exact entries and feature settings.

    Labels enter the key only when the index carries them.
    """
    key = (
        tuple((e.participant_id, str(e.file_path), e.source, e.label if with_labels else None, e.split)
              for e in manifest.entries),
        cfg.features,
        tuple(splits),
        with_labels,
    )
    if key not in _INDEX_CACHE:
        _INDEX_CACHE[key] = build_clip_index(manifest, cfg.features, splits=splits, with_labels=with_labels)
    return _INDEX_CACHE[key]


# -- phases ------------------------------------------------------------------------

def run_synth(cfg: ExperimentConfig, paths: RunPaths) -> DatasetManifest:
    return generate_synthetic_corpus(cfg.synth, paths.corpus_dir)


def run_pretrain(cfg: ExperimentConfig, seed: int, manifest: DatasetManifest, out_dir: Path) -> PretrainResult:
    _snapshot(cfg, out_dir, seed)
    index = clip_index_for(manifest, cfg, cfg.contrastive.splits, with_labels=False)
    result = pretrain(manifest, cfg, seed=seed, clip_index=index, log_path=out_dir / "train_log.tsv")
    save_store(result.encoder, out_dir / "encoder.cswt")
    save_store(result.head, out_dir / "head.cswt")
    return result


def run_finetune(
    cfg: ExperimentConfig,
    seed: int,
    manifest: DatasetManifest,
    out_dir: Path,
    pretrained: ParameterStore | list | None = None,
) -> DownstreamModel:
    _snapshot(cfg, out_dir, seed)
    model = build_model(cfg, seed=seed, pretrained=pretrained)
    index = clip_index_for(manifest, cfg, ("train", "val"))
    finetune(model, manifest, cfg, seed=seed, clip_index=index, log_path=out_dir / "train_log.tsv")
    save_store(model.params, out_dir / "model.cswt")
    return model


def evaluate_model(
    model: DownstreamModel,
    cfg: ExperimentConfig,
    seed: int,
    manifest: DatasetManifest,
) -> tuple[EvalReport, list[tuple[str, float, int]]]:
    """Clip-level metrics on the test split; each clip gets a fresh mask.

    Returns the report and ``(source_id, probability, decision)`` rows.
    """
    index = clip_index_for(manifest, cfg, ("test",))
    x, y, owners = labeled_clips(index)
    if len(y) == 0:
        raise EmptySplit("test split has no clips")
    sources = [f"{c.source_id}:{c.start_frame}" for pid in sorted(index) for c in index[pid]]
    probs = predict_proba(model, x, stream(seed, "eval-mask"))
    report = compute_metrics(list(zip(probs, y.astype(int))), model.threshold, run_seed=seed)
    report.config_hash = model.params.metadata.get("config_hash", "")
    if cfg.downstream.aggregate != "none":
        per_pid: dict[str, list[float]] = {}
        labels: dict[str, int] = {}
        for pid, p, lab in zip(owners, probs, y):
            per_pid.setdefault(pid, []).append(float(p))
            labels[pid] = int(lab)
        agg = [(aggregate_participant(per_pid[p], cfg.downstream.aggregate), labels[p]) for p in sorted(per_pid)]
        prep = compute_metrics(agg, model.threshold, run_seed=seed)
        report.extra.update({f"participant_{k}": v for k, v in prep.to_dict().items()
                             if k in ("roc_auc", "recall", "precision", "accuracy", "average_f1")})
    decisions = [(s, float(p), int(p > model.threshold)) for s, p in zip(sources, probs)]
    return report, decisions


def write_report(report: EvalReport, decisions, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    lines = ["source_id\tprobability\tdecision"]
    lines += [f"{s}\t{p:.8f}\t{d}" for s, p, d in decisions]
    (out_dir / "predictions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_evaluate(cfg: ExperimentConfig, seed: int, manifest: DatasetManifest, model_path: Path,
                 out_dir: Path) -> EvalReport:
    _snapshot(cfg, out_dir, seed)
    model = model_from_store(load_store(model_path))
    report, decisions = evaluate_model(model, cfg, seed, manifest)
    write_report(report, decisions, out_dir)
    return report


def benchmark_models(cfg: ExperimentConfig, seed: int) -> list[LatencyStats]:
    """Latency of randomly initialized single and ensemble models at each mask rate."""
    rows = []
    for arch in ("single", "ensemble"):
        for rate in cfg.benchmark.mask_rates:
            c = replace(cfg, downstream=replace(cfg.downstream, arch=arch, mask_rate=rate, branch_kinds=()))
            model = build_model(c, seed=seed)
            rows.append(benchmark_inference(model, cfg.benchmark.n_trials, cfg.benchmark.warmup, seed=seed))
    return rows


def run_benchmark(cfg: ExperimentConfig, seed: int, out_dir: Path, model_path: Path | None = None
                  ) -> list[LatencyStats]:
    _snapshot(cfg, out_dir, seed)
    rows = benchmark_models(cfg, seed)
    if model_path is not None and model_path.exists():
        model = model_from_store(load_store(model_path))
        rows.append(benchmark_inference(model, cfg.benchmark.n_trials, cfg.benchmark.warmup, seed=seed))
    (out_dir / "latency.tsv").write_text(format_table(rows), encoding="utf-8")
    return rows


# -- pre-training cache ---------------------------------------------------------------

def pretrain_key(cfg: ExperimentConfig, seed: int) -> str:
    from .contrastive import pretrain_config_dict

    return f"{config_hash(pretrain_config_dict(cfg))}-seed{seed}"


def cached_pretrain(cfg: ExperimentConfig, seed: int, manifest: DatasetManifest, cache_dir: Path) -> ParameterStore:
    """Pre-train once per (pre-training config, seed); later calls load from disk."""
    target = cache_dir / pretrain_key(cfg, seed)
    path = target / "encoder.cswt"
    if not path.exists():
        run_pretrain(cfg, seed, manifest, target)
    return load_store(path, expect_encoder_hash=cfg.encoder.hash())


def pretrained_for(cfg: ExperimentConfig, seed: int, manifest: DatasetManifest, cache_dir: Path) -> list:
    """One pre-trained encoder per branch, each matching that branch's encoder kind."""
    return [cached_pretrain(replace(cfg, encoder=bcfg), seed, manifest, cache_dir) for bcfg in branch_configs(cfg)]

