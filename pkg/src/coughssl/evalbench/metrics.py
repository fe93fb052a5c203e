"""Classification metrics and across-seed summaries.

"Average F1" follows the reporting convention of the original experiments:
the harmonic mean of the *run-averaged* precision and the *run-averaged*
recall, not the mean of per-run F1 scores. For a single run the two agree.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import DegenerateLabels

METRIC_NAMES = ("roc_auc", "recall", "precision", "accuracy")


@dataclass
class EvalReport:
    roc_auc: float | None
    recall: float
    precision: float
    accuracy: float
    average_f1: float
    n_pos: int
    n_neg: int
    threshold: float = 0.5
    run_seed: int | None = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        """Flat ``key=value`` block, one metric per line."""
        lines = []
        for key, value in self.to_dict().items():
            if key == "extra":
                for k2, v2 in sorted(value.items()):
                    lines.append(f"extra.{k2}={v2}")
                continue
            lines.append(f"{key}={'' if value is None else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"ROC-AUC needs both classes (pos={n_pos}, neg={n_neg})")
    rank_sum = _average_ranks(s)[y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1_from(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def average_f1(precisions: Iterable[float], recalls: Iterable[float]) -> float:
    """Harmonic mean of mean precision and mean recall."""
    return f1_from(float(np.mean(list(precisions))), float(np.mean(list(recalls))))


def compute_metrics(
    scores: Sequence[tuple[float, int]],
    threshold: float = 0.5,
    run_seed: int | None = None,
) -> EvalReport:
    """Score a list of ``(probability, label)`` pairs.

    A clip is called positive when its probability exceeds ``threshold``.
    Precision with no positive calls is 0. With a single class present the
    ROC-AUC is reported as None and the rest are still computed.
    """
    if len(scores) == 0:
        raise DegenerateLabels("no scores")
    p = np.asarray([s for s, _ in scores], dtype=np.float64)
    y = np.asarray([lab for _, lab in scores]).astype(int)
    pred = p > threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    recall = tp / n_pos if n_pos else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    accuracy = float(np.mean(pred == (y == 1)))
    try:
        auc = roc_auc(p, y)
    except DegenerateLabels:
        auc = None
    return EvalReport(
        roc_auc=auc,
        recall=recall,
        precision=precision,
        accuracy=accuracy,
        average_f1=f1_from(precision, recall),
        n_pos=n_pos,
        n_neg=n_neg,
        threshold=threshold,
        run_seed=run_seed,
    )


@dataclass
class SummaryRow:
    """Across-seed mean and standard deviation for one configuration."""

    label: dict
    n_runs: int
    mean: dict
    std: dict
    average_f1: float

    def formatted(self, name: str) -> str:
        """Percent with the standard deviation in brackets, e.g. ``88.83 (0.53)``."""
        m, s = self.mean[name], self.std[name]
        if m is None or (isinstance(m, float) and math.isnan(m)):
            return "n/a"
        return f"{100 * m:.2f} ({100 * s:.2f})"


def summarize(reports: Sequence[EvalReport], label: dict | None = None) -> SummaryRow:
    """Population standard deviation across runs; ROC-AUC ignores runs without one."""
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        mean[name] = float(np.mean(vals)) if vals else float("nan")
        std[name] = float(np.std(vals)) if vals else float("nan")
    avg = average_f1([r.precision for r in reports], [r.recall for r in reports])
    return SummaryRow(dict(label or {}), len(reports), mean, std, avg)
