"""Participant-level contrastive pre-training of the clip encoder.

Each batch holds B instances; an instance is two clips of one participant,
and no participant appears twice. Clips are stacked as ``[a_1..a_B,
b_1..b_B]`` so clip ``i`` and clip ``(i + B) mod 2B`` form the positive
pair. The loss for anchor ``i`` is the cross-entropy of picking its
positive among all ``2B - 1`` other clips (positive included) under
``similarity / temperature`` logits, averaged over all ``2B`` anchors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore, Tensor
from .encoder import encode_batch, init_encoder
from .errors import InsufficientParticipants, InvalidConfig, NonPositiveTemperature, ZeroNorm
from .features import DatasetManifest, MelClip, build_clip_index
from .masking import generate_masks
from .rng import stream

if TYPE_CHECKING:
    from .config import ExperimentConfig

logger = logging.getLogger(__name__)

METRICS = ("cosine", "bilinear")


@dataclass(frozen=True)
class ContrastiveConfig:
    metric: str = "bilinear"
    temperature: float = 0.1
    batch_size: int = 64  # desk scale; full-scale runs use 1024
    mask_rate: float = 0.0
    epochs: int = 100
    splits: tuple[str, ...] = ("unlabeled",)
    bilinear_init: str = "zero"  # zero | identity

    def __post_init__(self):
        if self.bilinear_init not in ("zero", "identity"):
            raise InvalidConfig(f"bilinear_init must be zero or identity, got {self.bilinear_init!r}")
        if self.metric not in METRICS:
            raise InvalidConfig(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not self.temperature > 0:
            raise NonPositiveTemperature(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise InvalidConfig(f"mask_rate must be in [0, 1], got {self.mask_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("batch_size must be >= 1 and epochs >= 0")


@dataclass
class ContrastiveBatch:
    clips_a: list[MelClip]
    clips_b: list[MelClip]

    @property
    def size(self) -> int:
        return len(self.clips_a)

    @property
    def participant_ids(self) -> list[str]:
        return [c.participant_id for c in self.clips_a]

    def values(self) -> np.ndarray:
        """(2B, n_bins, frames) array: all first clips, then all second clips."""
        return np.stack([c.values for c in self.clips_a + self.clips_b])

    def pair_index(self) -> np.ndarray:
        return pair_index(self.size)


def pair_index(batch_size: int) -> np.ndarray:
    return (np.arange(2 * batch_size) + batch_size) % (2 * batch_size)


# -- sampling --------------------------------------------------------------------

def eligible_participants(
    manifest: DatasetManifest,
    clip_index: dict[str, list[MelClip]],
    splits: Sequence[str] = ("unlabeled",),
) -> list[str]:
    """Participants of ``splits`` that own at least two clips (sorted)."""
    pids = manifest.participants(splits)
    return [p for p in pids if len(clip_index.get(p, ())) >= 2]


def sample_batch(
    manifest: DatasetManifest,
    clip_index: dict[str, list[MelClip]],
    batch_size: int,
    rng: np.random.Generator,
    splits: Sequence[str] = ("unlabeled",),
    eligible: list[str] | None = None,
) -> ContrastiveBatch:
    """Draw ``batch_size`` distinct participants, then two distinct clips from each."""
    if eligible is None:
        eligible = eligible_participants(manifest, clip_index, splits)
    if batch_size > len(eligible):
        raise InsufficientParticipants(
            f"batch of {batch_size} needs as many participants with >= 2 clips; have {len(eligible)}"
        )
    chosen = rng.choice(len(eligible), size=batch_size, replace=False)
    a, b = [], []
    for i in chosen:
        pool = clip_index[eligible[i]]
        j, k = rng.choice(len(pool), size=2, replace=False)
        a.append(pool[j])
        b.append(pool[k])
    return ContrastiveBatch(a, b)


# -- projection head and similarity ------------------------------------------------

def init_projection_head(d: int, metric: str, rng: np.random.Generator, dtype=np.float32,
                         bilinear_init: str = "zero") -> ParameterStore:
    """Two-layer d -> d -> d head with a rectifier; plus W_s for bilinear similarity.

    The default zero W_s makes every initial logit equal, so training starts
    from an uninformative similarity; its gradient is a sum of z_i z_j^T
    terms and is non-zero from the first step. ``bilinear_init="identity"``
    starts from the plain dot product instead, whose initial logits are of
    order |z|^2 / tau.
    """
    store = ParameterStore(metadata={"phase": "pretrain-head"})
    limit = math.sqrt(6.0 / (2 * d))
    for layer in ("fc1", "fc2"):
        store.add(f"proj.{layer}.weight", Tensor(rng.uniform(-limit, limit, (d, d)), requires_grad=True, dtype=dtype))
        store.add(f"proj.{layer}.bias", Tensor(np.zeros(d), requires_grad=True, dtype=dtype))
    if metric == "bilinear":
        w_s = np.eye(d) if bilinear_init == "identity" else np.zeros((d, d))
        store.add("sim.W_s", Tensor(w_s, requires_grad=True, dtype=dtype))
    return store


def project(head: ParameterStore, h: Tensor) -> Tensor:
    hidden = dc.relu(h @ head["proj.fc1.weight"] + head["proj.fc1.bias"])
    return hidden @ head["proj.fc2.weight"] + head["proj.fc2.bias"]


def similarity(z_i, z_j, metric: str = "cosine", w_s=None) -> float:
    """Similarity of two latent vectors: cosine, or the bilinear form z_i^T W_s z_j."""
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_i.shape != z_j.shape:
        raise ValueError(f"vectors differ in length: {z_i.shape} vs {z_j.shape}")
    if metric == "cosine":
        ni, nj = np.linalg.norm(z_i), np.linalg.norm(z_j)
        if ni == 0 or nj == 0:
            raise ZeroNorm("cosine similarity of a zero vector")
        return float(z_i @ z_j / (ni * nj))
    if metric == "bilinear":
        if w_s is None:
            raise InvalidConfig("bilinear similarity needs W_s")
        return float(z_i @ np.asarray(w_s, dtype=np.float64) @ z_j)
    raise InvalidConfig(f"unknown metric {metric!r}")


def similarity_matrix(z: Tensor, metric: str, w_s: Tensor | None = None) -> Tensor:
    """All-pairs similarities of the rows of ``z``, shape (n, n)."""
    if metric == "cosine":
        norms = dc.sqrt((z * z).sum(axis=1, keepdims=True))
        if (norms.data == 0).any():
            raise ZeroNorm("cosine similarity of a zero projection")
        zn = z / norms
        return zn @ zn.transpose(1, 0)
    if w_s is None:
        raise InvalidConfig("bilinear similarity needs W_s")
    return z @ w_s @ z.transpose(1, 0)


def similarity_logits(z: Tensor, metric: str, temperature: float, w_s: Tensor | None = None) -> Tensor:
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {temperature}")
    return similarity_matrix(z, metric, w_s) / temperature


def loss_from_logits(logits: Tensor, pairs: np.ndarray) -> Tensor:
    n = logits.shape[0]
    others = ~np.eye(n, dtype=bool)
    denom = dc.logsumexp(dc.masked_fill(logits, others, -np.inf), axis=1)
    positive = logits[np.arange(n), np.asarray(pairs)]
    return dc.mean(denom - positive)


def contrastive_loss(
    z: Tensor,
    pairs: np.ndarray,
    metric: str = "bilinear",
    temperature: float = 0.1,
    w_s: Tensor | None = None,
) -> Tensor:
    """Mean over anchors of -log softmax(positive) with the anchor itself excluded."""
    if not isinstance(z, Tensor):
        z = Tensor(z)
    return loss_from_logits(similarity_logits(z, metric, temperature, w_s), pairs)


# -- training ---------------------------------------------------------------------

@dataclass
class PretrainResult:
    encoder: ParameterStore
    head: ParameterStore
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]


def pretrain_config_dict(cfg: ExperimentConfig) -> dict:
    return {
        "features": asdict(cfg.features),
        "encoder": cfg.encoder.as_dict(),
        "contrastive": asdict(cfg.contrastive),
        "optimizer": asdict(cfg.optimizer),
        "precision": cfg.run.precision,
    }


def pretrain(
    manifest: DatasetManifest,
    cfg: ExperimentConfig,
    seed: int = 0,
    clip_index: dict[str, list[MelClip]] | None = None,
    log_path: str | Path | None = None,
) -> PretrainResult:
    """Contrastively train a fresh encoder on the configured splits.

    Labels are never read. One epoch is ``ceil(participants / B)`` batches,
    so every participant is visited once in expectation; the learning-rate
    plateau schedule watches the epoch-mean loss.
    """
    ccfg = cfg.contrastive
    dtype = np.dtype(cfg.run.precision)
    if clip_index is None:
        clip_index = build_clip_index(manifest, cfg.features, splits=ccfg.splits, with_labels=False)
    pool = manifest.participants(ccfg.splits)
    if not pool:
        raise InsufficientParticipants(f"no participants in splits {ccfg.splits}")
    eligible = eligible_participants(manifest, clip_index, ccfg.splits)
    excluded = len(pool) - len(eligible)
    if excluded:
        logger.info("excluding %d participant(s) with fewer than two clips", excluded)
    if ccfg.batch_size > len(eligible):
        raise InsufficientParticipants(
            f"batch size {ccfg.batch_size} exceeds the {len(eligible)} eligible participants"
        )

    enc = init_encoder(cfg.encoder, stream(seed, "encoder-init"), dtype=dtype)
    head = init_projection_head(cfg.encoder.d_model, ccfg.metric, stream(seed, "head-init"), dtype=dtype,
                                bilinear_init=ccfg.bilinear_init)
    trainable = ParameterStore()
    trainable.merge(enc, "encoder.")
    trainable.merge(head, "head.")
    state = cfg.optimizer.make_state()
    sample_rng = stream(seed, "pretrain-sample")
    mask_rng = stream(seed, "pretrain-mask")
    drop_rng = stream(seed, "pretrain-dropout")
    w_s = head["sim.W_s"] if ccfg.metric == "bilinear" else None
    pairs = pair_index(ccfg.batch_size)
    steps = math.ceil(len(eligible) / ccfg.batch_size)

    result = PretrainResult(enc, head)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        step = 0
        for _epoch in range(ccfg.epochs):
            epoch_losses = []
            for _ in range(steps):
                batch = sample_batch(manifest, clip_index, ccfg.batch_size, sample_rng, eligible=eligible)
                x = batch.values()
                kept = generate_masks(x.shape[0], x.shape[2], ccfg.mask_rate, mask_rng)
                h = encode_batch(enc, cfg.encoder, x, kept=kept, train=True, rng=drop_rng)
                loss = contrastive_loss(project(head, h), pairs, ccfg.metric, ccfg.temperature, w_s)
                dc.backward(loss)
                lr = state.lr
                dc.adam_step(trainable, state)
                value = loss.item()
                epoch_losses.append(value)
                result.losses.append(value)
                result.lrs.append(lr)
                if log_file:
                    log_file.write(f"{step}\t{value:.8g}\t{lr:.8g}\n")
                step += 1
            dc.plateau_decay(state, float(np.mean(epoch_losses)))
    finally:
        if log_file:
            log_file.close()

    meta = {
        "encoder_hash": cfg.encoder.hash(),
        "config_hash": dc.config_hash(pretrain_config_dict(cfg)),
        "phase": "pretrain",
        "config": {**pretrain_config_dict(cfg), "seed": seed},
    }
    enc.metadata = dict(meta)
    head.metadata = {**meta, "phase": "pretrain-head"}
    return result


def embed_clips(
    enc: ParameterStore,
    head: ParameterStore | None,
    cfg: ExperimentConfig,
    values: np.ndarray,
    chunk: int = 256,
) -> np.ndarray:
    """Unmasked, dropout-free encodings (projected when ``head`` is given)."""
    out = []
    with dc.no_grad():
        for s in range(0, len(values), chunk):
            h = encode_batch(enc, cfg.encoder, values[s:s + chunk], train=False)
            out.append((project(head, h) if head is not None else h).data)
    return np.concatenate(out) if out else np.zeros((0, cfg.encoder.d_model))


def similarity_gap(
    result: PretrainResult,
    cfg: ExperimentConfig,
    clip_index: dict[str, list[MelClip]],
) -> tuple[float, float]:
    """Mean latent similarity of same-participant vs different-participant clip pairs.

    Uses the trained projection head and similarity metric on unmasked,
    dropout-free encodings. Self-pairs are excluded.
    """
    pids, values = [], []
    for pid in sorted(clip_index):
        for clip in clip_index[pid]:
            pids.append(pid)
            values.append(clip.values)
    z = embed_clips(result.encoder, result.head, cfg, np.stack(values))
    w_s = result.head["sim.W_s"] if cfg.contrastive.metric == "bilinear" else None
    with dc.no_grad():
        s = similarity_matrix(Tensor(z), cfg.contrastive.metric, w_s).data.astype(np.float64)
    owner = np.asarray(pids)
    same = owner[:, None] == owner[None, :]
    off_diag = ~np.eye(len(owner), dtype=bool)
    return float(s[same & off_diag].mean()), float(s[~same].mean())
