from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from coughssl import diffcore as dc
from coughssl.diffcore import Tensor
from coughssl.evalbench.synth import SyntheticCorpusSpec, generate_synthetic_corpus

GRAD_TOL = 1e-4
# Denominator floor: structurally zero gradients (the attention key bias, whose
# effect the softmax cancels) are then judged on absolute error.
GRAD_FLOOR = 1e-5


def numeric_grad(f, x: np.ndarray, coords, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at the given flat coordinates of ``x``."""
    out = np.zeros(len(coords))
    flat = x.reshape(-1)
    for n, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[n] = (hi - lo) / (2 * eps)
    return out


def gradcheck(fn, inputs, seed: int, max_coords: int = 40) -> float:
    """Worst relative error between autodiff and finite differences over all inputs.

    ``fn`` maps Tensors to a Tensor; the scalar objective is a fixed random
    projection of its output. At most ``max_coords`` coordinates per input
    are probed.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*leaves)
    w = rng.standard_normal(out.shape)
    dc.backward((out * Tensor(w)).sum())

    def objective() -> float:
        with dc.no_grad():
            ts = [Tensor(a, dtype=np.float64) for a in arrays]
            return float((fn(*ts).data * w).sum())

    worst = 0.0
    for a, leaf in zip(arrays, leaves):
        size = a.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        num = numeric_grad(objective, a, coords)
        ana = leaf.grad.reshape(-1)[coords]
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), GRAD_FLOOR)
        worst = max(worst, float(np.linalg.norm(num - ana) / scale))
    return worst


def store_gradcheck(loss_fn, store, seed: int, max_coords: int = 12) -> float:
    """Like ``gradcheck`` but for a scalar loss over every tensor in a ParameterStore."""
    rng = np.random.default_rng(seed)
    store.zero_grad()
    dc.backward(loss_fn())

    def objective() -> float:
        with dc.no_grad():
            return float(loss_fn().item())

    worst = 0.0
    for _name, t in store.items():
        coords = np.arange(t.data.size) if t.data.size <= max_coords else rng.choice(t.data.size, max_coords, replace=False)
        num = numeric_grad(objective, t.data, coords)
        ana = t.grad.reshape(-1)[coords]
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), GRAD_FLOOR)
        worst = max(worst, float(np.linalg.norm(num - ana) / scale))
    return worst


TINY_SPEC = SyntheticCorpusSpec(
    n_participants=12,
    clips_per_participant=4,
    n_unlabeled_participants=10,
    label_effect=0.2,
    seed=3,
)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory) -> Path:
    """A small corpus shared by the pipeline tests; returns its manifest path."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_synthetic_corpus(TINY_SPEC, root)
    return root / "manifest.tsv"


def tiny_config(**overrides):
    """A fast experiment config for pipeline tests (float64 so results are exact to compare)."""
    from coughssl.config import ExperimentConfig

    base = {
        "encoder.d_model": 16, "encoder.n_heads": 2, "encoder.ffn_dim": 24, "encoder.n_layers": 1,
        "contrastive.batch_size": 4, "contrastive.epochs": 2,
        "downstream.epochs": 3, "downstream.batch_size": 16,
        "benchmark.n_trials": 5, "benchmark.warmup": 1,
    }
    base.update(overrides)
    return ExperimentConfig().with_overrides(base)


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
