"""Supervised fine-tuning: single-encoder and two-branch ensemble classifiers.

An ensemble runs two encoders on the same clip, each under its own freshly
drawn mask, concatenates their representations (branch 1 first) and feeds
the 2d-wide vector to one sigmoid unit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore, Tensor
from .encoder import EncoderConfig, check_params, encode_batch, init_encoder
from .errors import ConfigMismatch, EmptyList, EmptySplit, InvalidConfig
from .features import DatasetManifest, MelClip, build_clip_index
from .masking import generate_masks
from .rng import stream

if TYPE_CHECKING:
    from .config import ExperimentConfig

logger = logging.getLogger(__name__)

ARCHS = ("single", "ensemble")


@dataclass(frozen=True)
class DownstreamConfig:
    arch: str = "single"
    mask_rate: float = 0.0
    freeze_encoder: bool = False
    batch_size: int = 128
    epochs: int = 100
    early_stop: int = 15
    threshold: float = 0.5
    pos_weight: float | None = None  # None = unweighted BCE
    label_budget: float = 1.0
    branch_kinds: tuple[str, ...] = ()  # empty = every branch uses encoder.encoder_kind
    aggregate: str = "none"  # none | mean | max

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise InvalidConfig(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise InvalidConfig(f"mask_rate must be in [0, 1], got {self.mask_rate}")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidConfig(f"threshold must be in (0, 1), got {self.threshold}")
        if not 0.0 < self.label_budget <= 1.0:
            raise InvalidConfig(f"label_budget must be in (0, 1], got {self.label_budget}")
        if self.branch_kinds and len(self.branch_kinds) != self.n_branches:
            raise InvalidConfig(f"{self.arch} needs {self.n_branches} branch kinds, got {self.branch_kinds}")
        if self.aggregate not in ("none", "mean", "max"):
            raise InvalidConfig(f"unknown aggregate {self.aggregate!r}")

    @property
    def n_branches(self) -> int:
        return 2 if self.arch == "ensemble" else 1


@dataclass
class DownstreamModel:
    arch: str
    encoder_cfgs: list[EncoderConfig]
    params: ParameterStore
    freeze_encoder: bool = False
    mask_rate: float = 0.0
    threshold: float = 0.5
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        want = 2 if self.arch == "ensemble" else 1
        if len(self.encoder_cfgs) != want:
            raise ConfigMismatch(f"{self.arch} model needs {want} encoder(s), got {len(self.encoder_cfgs)}")

    @property
    def n_branches(self) -> int:
        return len(self.encoder_cfgs)

    def branch(self, i: int) -> ParameterStore:
        return self.params.subset(f"branch{i + 1}.", strip=True)

    def encoder_params(self) -> ParameterStore:
        return self.params.subset("branch")

    def head_params(self) -> ParameterStore:
        return self.params.subset("head.")

    def trainable(self) -> ParameterStore:
        return self.head_params() if self.freeze_encoder else self.params


def branch_configs(cfg: ExperimentConfig) -> list[EncoderConfig]:
    dcfg = cfg.downstream
    kinds = dcfg.branch_kinds or (cfg.encoder.encoder_kind,) * dcfg.n_branches
    return [replace(cfg.encoder, encoder_kind=k) for k in kinds]


def build_model(
    cfg: ExperimentConfig,
    seed: int = 0,
    pretrained: ParameterStore | Sequence[ParameterStore | None] | None = None,
) -> DownstreamModel:
    """Assemble a classifier, copying pre-trained encoder weights where given.

    ``pretrained`` is one store (used for every branch; a branch of another
    encoder kind raises ConfigMismatch) or one entry per branch, where None
    keeps that branch randomly initialized.
    """
    dcfg = cfg.downstream
    dtype = np.dtype(cfg.run.precision)
    cfgs = branch_configs(cfg)
    if pretrained is None or isinstance(pretrained, ParameterStore):
        sources = [pretrained] * len(cfgs)
    else:
        sources = list(pretrained)
        if len(sources) != len(cfgs):
            raise ConfigMismatch(f"{len(cfgs)} branches but {len(sources)} pre-trained stores")
    params = ParameterStore()
    init_rng = stream(seed, "downstream-init")
    for i, (bcfg, src) in enumerate(zip(cfgs, sources)):
        if src is None:
            enc = init_encoder(bcfg, init_rng, dtype=dtype)
        else:
            check_params(src, bcfg)
            enc = src.copy().astype(dtype)
        params.merge(enc, f"branch{i + 1}.")
    width = sum(c.d_model for c in cfgs)
    limit = math.sqrt(6.0 / (width + 1))
    params.add("head.weight", Tensor(init_rng.uniform(-limit, limit, width), requires_grad=True, dtype=dtype))
    params.add("head.bias", Tensor(np.zeros(()), requires_grad=True, dtype=dtype))
    params.metadata = {
        "phase": "finetune",
        "encoder_hash": cfgs[0].hash(),
        "config": {
            "arch": dcfg.arch,
            "encoders": [c.as_dict() for c in cfgs],
            "mask_rate": dcfg.mask_rate,
            "freeze_encoder": dcfg.freeze_encoder,
            "threshold": dcfg.threshold,
            "pretrained": [None if s is None else s.metadata.get("config_hash") for s in sources],
        },
    }
    return DownstreamModel(dcfg.arch, cfgs, params, dcfg.freeze_encoder, dcfg.mask_rate, dcfg.threshold)


def model_from_store(store: ParameterStore) -> DownstreamModel:
    """Rebuild a model from a loaded container."""
    meta = store.metadata.get("config", {})
    try:
        cfgs = [EncoderConfig(**c) for c in meta["encoders"]]
        model = DownstreamModel(meta["arch"], cfgs, store, bool(meta["freeze_encoder"]),
                                float(meta["mask_rate"]), float(meta["threshold"]))
    except (KeyError, TypeError) as exc:
        raise ConfigMismatch(f"weight file does not describe a downstream model ({exc})") from exc
    for i, c in enumerate(cfgs):
        check_params(model.branch(i), c)
    return model


# -- forward ----------------------------------------------------------------------

def representations(
    model: DownstreamModel,
    clips: np.ndarray,
    mask_rng: np.random.Generator | None,
    train: bool = False,
    drop_rng: np.random.Generator | None = None,
) -> Tensor:
    """Concatenated branch representations, (batch, sum of d_model)."""
    clips = np.asarray(clips)
    if clips.ndim == 2:
        clips = clips[None]
    hs = []
    for i, bcfg in enumerate(model.encoder_cfgs):
        kept = None
        if model.mask_rate > 0:
            if mask_rng is None:
                raise ValueError("a masking rng is required when mask_rate > 0")
            kept = generate_masks(clips.shape[0], clips.shape[2], model.mask_rate, mask_rng)
        params = model.branch(i)
        if model.freeze_encoder:
            with dc.no_grad():
                h = encode_batch(params, bcfg, clips, kept=kept, train=train, rng=drop_rng)
        else:
            h = encode_batch(params, bcfg, clips, kept=kept, train=train, rng=drop_rng)
        hs.append(h)
    return hs[0] if len(hs) == 1 else dc.concat(hs, axis=1)


def logits(model, clips, mask_rng=None, train=False, drop_rng=None) -> Tensor:
    h = representations(model, clips, mask_rng, train=train, drop_rng=drop_rng)
    return h @ model.params["head.weight"] + model.params["head.bias"]


def predict_proba(model: DownstreamModel, clips: np.ndarray, rng: np.random.Generator | None = None,
                  chunk: int = 256) -> np.ndarray:
    """Inference-mode probabilities for a stack of clips."""
    clips = np.asarray(clips)
    out = []
    with dc.no_grad():
        for s in range(0, len(clips), chunk):
            out.append(dc.sigmoid(logits(model, clips[s:s + chunk], rng)).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def predict(model: DownstreamModel, clip, rng: np.random.Generator | None = None, train: bool = False) -> float:
    """Probability that one clip is positive."""
    values = np.asarray(getattr(clip, "values", clip))
    with dc.no_grad():
        z = logits(model, values[None], rng, train=train, drop_rng=rng if train else None)
        return float(dc.sigmoid(z).data[0])


def aggregate_participant(clip_probs: Sequence[float], method: str = "mean") -> float:
    if len(clip_probs) == 0:
        raise EmptyList("no clip probabilities to aggregate")
    p = np.asarray(clip_probs, dtype=np.float64)
    if method == "mean":
        return float(p.mean())
    if method == "max":
        return float(p.max())
    raise InvalidConfig(f"unknown aggregation {method!r}")


# -- data -------------------------------------------------------------------------

def labeled_clips(clip_index: dict[str, list[MelClip]]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    values, labels, owners = [], [], []
    for pid in sorted(clip_index):
        for c in clip_index[pid]:
            values.append(c.values)
            labels.append(c.label)
            owners.append(pid)
    if not values:
        return np.zeros((0, 0, 0)), np.zeros(0), []
    return np.stack(values), np.asarray(labels, dtype=np.float64), owners


def apply_label_budget(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Keep ``fraction`` of each train participant's recordings (at least one)."""
    if fraction >= 1.0:
        return manifest
    rng = stream(seed, "label-budget")
    by_pid: dict[str, list] = {}
    for e in manifest.entries:
        by_pid.setdefault(e.participant_id, []).append(e)
    kept = []
    for pid in sorted(by_pid):
        entries = by_pid[pid]
        if entries[0].split != "train":
            kept.extend(entries)
            continue
        n = max(1, int(round(fraction * len(entries))))
        pick = sorted(rng.choice(len(entries), size=n, replace=False))
        kept.extend(entries[i] for i in pick)
    return DatasetManifest(kept)


def finetune_config_dict(cfg: ExperimentConfig) -> dict:
    return {
        "features": asdict(cfg.features),
        "encoder": cfg.encoder.as_dict(),
        "downstream": asdict(cfg.downstream),
        "optimizer": asdict(cfg.optimizer),
        "precision": cfg.run.precision,
    }


def finetune(
    model: DownstreamModel,
    manifest: DatasetManifest,
    cfg: ExperimentConfig,
    seed: int = 0,
    clip_index: dict[str, list[MelClip]] | None = None,
    log_path: str | Path | None = None,
) -> DownstreamModel:
    """Minimize clip-level BCE on the train split; keep the best-validation weights.

    After every epoch the validation loss (masks drawn from a stream that is
    re-seeded each epoch, so epochs are comparable) drives the plateau
    schedule and early stopping.
    """
    dcfg = cfg.downstream
    manifest = apply_label_budget(manifest, dcfg.label_budget, seed)
    if clip_index is None:
        clip_index = build_clip_index(manifest, cfg.features, splits=("train", "val"))
    train_pids = set(manifest.participants(["train"]))
    val_pids = set(manifest.participants(["val"]))
    # a caller-supplied index may cover recordings the label budget dropped
    kept = {e.source or str(e.file_path) for e in manifest.entries if e.split == "train"}
    x_tr, y_tr, _ = labeled_clips({p: [c for c in cs if c.source_id in kept]
                                   for p, cs in clip_index.items() if p in train_pids})
    x_va, y_va, _ = labeled_clips({p: c for p, c in clip_index.items() if p in val_pids})
    if len(y_tr) == 0:
        raise EmptySplit("train split has no clips")
    if len(y_va) == 0:
        raise EmptySplit("val split has no clips")

    trainable = model.trainable()
    state = cfg.optimizer.make_state()
    shuffle_rng = stream(seed, "finetune-shuffle")
    mask_rng = stream(seed, "finetune-mask")
    drop_rng = stream(seed, "finetune-dropout")
    best_loss, best_state, stale = math.inf, model.params.state(), 0
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(dcfg.epochs):
            order = shuffle_rng.permutation(len(y_tr))
            losses = []
            for s in range(0, len(order), dcfg.batch_size):
                idx = order[s:s + dcfg.batch_size]
                z = logits(model, x_tr[idx], mask_rng, train=True, drop_rng=drop_rng)
                loss = dc.bce_with_logits(z, y_tr[idx], pos_weight=dcfg.pos_weight)
                dc.backward(loss)
                dc.adam_step(trainable, state)
                losses.append(loss.item())
            val_loss = validation_loss(model, x_va, y_va, seed, dcfg.pos_weight)
            lr = state.lr
            dc.plateau_decay(state, val_loss)
            record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "lr": lr}
            model.history.append(record)
            if log_file:
                log_file.write(f"{epoch}\t{record['train_loss']:.8g}\t{val_loss:.8g}\t{lr:.8g}\n")
            if val_loss < best_loss:
                best_loss, best_state, stale = val_loss, model.params.state(), 0
            else:
                stale += 1
                if stale >= dcfg.early_stop:
                    break
    finally:
        if log_file:
            log_file.close()
    model.params.load_state(best_state)
    model.params.metadata["config_hash"] = dc.config_hash(finetune_config_dict(cfg))
    model.params.metadata["config"]["seed"] = seed
    return model


def validation_loss(model: DownstreamModel, x: np.ndarray, y: np.ndarray, seed: int,
                    pos_weight: float | None = None) -> float:
    rng = stream(seed, "validation-mask")
    with dc.no_grad():
        total = 0.0
        for s in range(0, len(y), 256):
            z = logits(model, x[s:s + 256], rng)
            total += dc.bce_with_logits(z, y[s:s + 256], pos_weight=pos_weight).item() * len(y[s:s + 256])
    return total / len(y)
