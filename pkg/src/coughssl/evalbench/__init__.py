"""Metrics, latency benchmarking and the synthetic corpus generator."""

from .latency import LatencyStats, benchmark_inference, format_table
from .metrics import EvalReport, SummaryRow, average_f1, compute_metrics, roc_auc, summarize
from .synth import SyntheticCorpusSpec, desk_corpus_spec, generate_synthetic_corpus

__all__ = [
    "EvalReport", "LatencyStats", "SummaryRow", "SyntheticCorpusSpec", "average_f1",
    "benchmark_inference", "compute_metrics", "desk_corpus_spec", "format_table",
    "generate_synthetic_corpus", "roc_auc", "summarize",
]
