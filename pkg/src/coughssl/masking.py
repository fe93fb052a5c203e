"""Random time-step masks and their effect on self-attention.

A masked time step is hidden from every *other* query as an attention key
(and so contributes nothing as a value), but always stays visible to
itself. At rate 1.0 each position therefore attends only to itself, and
the attention softmax is never taken over an empty set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskMatrix:
    kept: np.ndarray  # bool, True = visible
    rate: float

    def __post_init__(self):
        if self.kept.dtype != bool or self.kept.ndim != 1:
            raise ValueError("kept must be a 1-D boolean vector")
        if int((~self.kept).sum()) != masked_count(self.rate, len(self.kept)):
            raise ValueError("masked count does not match the masking rate")

    @property
    def length(self) -> int:
        return len(self.kept)

    @property
    def n_masked(self) -> int:
        return int((~self.kept).sum())


def masked_count(rate: float, length: int) -> int:
    """Number of positions hidden at ``rate``: round-half-even of rate * length."""
    return int(round(rate * length))


def generate_mask(length: int, rate: float, rng: np.random.Generator) -> MaskMatrix:
    """Mask exactly ``masked_count(rate, length)`` positions, chosen without replacement."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"masking rate must be in [0, 1], got {rate}")
    kept = np.ones(length, dtype=bool)
    k = masked_count(rate, length)
    if k:
        kept[rng.choice(length, size=k, replace=False)] = False
    return MaskMatrix(kept, rate)


def generate_masks(batch: int, length: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """``batch`` independent masks stacked as a (batch, length) kept-array."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"masking rate must be in [0, 1], got {rate}")
    kept = np.ones((batch, length), dtype=bool)
    k = masked_count(rate, length)
    if k == length:
        kept[:] = False
    elif k:
        # argsort of uniform keys is a uniform random permutation per row
        order = np.argsort(rng.random((batch, length)), axis=1)
        np.put_along_axis(kept, order[:, :k], False, axis=1)
    return kept


def attention_visibility(kept: np.ndarray) -> np.ndarray:
    """Boolean (..., T, T) matrix: entry [q, k] is True when query q may see key k."""
    kept = np.asarray(kept, dtype=bool)
    t = kept.shape[-1]
    vis = np.broadcast_to(kept[..., None, :], kept.shape[:-1] + (t, t)).copy()
    idx = np.arange(t)
    vis[..., idx, idx] = True
    return vis


def attention_bias(mask: MaskMatrix | np.ndarray) -> np.ndarray:
    """Additive attention bias: ``-inf`` for hidden (query, key) pairs, 0 elsewhere."""
    kept = mask.kept if isinstance(mask, MaskMatrix) else np.asarray(mask, dtype=bool)
    return np.where(attention_visibility(kept), 0.0, -np.inf)
