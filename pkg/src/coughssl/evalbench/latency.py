"""Single-clip inference latency."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from ..downstream import DownstreamModel, predict
from ..errors import EmptyBenchmark
from ..rng import stream


@dataclass
class LatencyStats:
    arch: str
    encoders: str
    mask_rate: float
    n_trials: int
    mean: float
    p50: float
    p95: float

    def to_dict(self) -> dict:
        return asdict(self)


TABLE_COLUMNS = ("arch", "encoders", "mask_rate", "n_trials", "mean_s", "p50_s", "p95_s")


def benchmark_inference(
    model: DownstreamModel,
    n_trials: int = 200,
    warmup: int = 10,
    clip: np.ndarray | None = None,
    seed: int = 0,
) -> LatencyStats:
    """Wall-clock seconds per single-clip ``predict``; warmup calls are not timed.

    Mask generation is part of the timed call, as it is at inference time.
    """
    if n_trials <= 0:
        raise EmptyBenchmark("no timed trials requested")
    cfg0 = model.encoder_cfgs[0]
    if clip is None:
        clip = stream(seed, "bench-clip").standard_normal((cfg0.n_bins, 96))
    rng = stream(seed, "bench-mask")
    for _ in range(warmup):
        predict(model, clip, rng)
    times = np.empty(n_trials)
    for i in range(n_trials):
        t0 = time.perf_counter()
        predict(model, clip, rng)
        times[i] = time.perf_counter() - t0
    return LatencyStats(
        arch=model.arch,
        encoders="+".join(c.encoder_kind for c in model.encoder_cfgs),
        mask_rate=model.mask_rate,
        n_trials=n_trials,
        mean=float(times.mean()),
        p50=float(np.percentile(times, 50)),
        p95=float(np.percentile(times, 95)),
    )


def format_table(rows: list[LatencyStats]) -> str:
    lines = ["\t".join(TABLE_COLUMNS)]
    for r in rows:
        lines.append(f"{r.arch}\t{r.encoders}\t{r.mask_rate:g}\t{r.n_trials}\t{r.mean:.6e}\t{r.p50:.6e}\t{r.p95:.6e}")
    return "\n".join(lines) + "\n"
