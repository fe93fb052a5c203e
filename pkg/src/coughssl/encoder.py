"""Clip encoders: a masked-attention Transformer and a GRU baseline.

Both map a batch of (n_bins, T) clips to (batch, d_model) representations.
Parameters live in a :class:`ParameterStore` whose metadata records the
hash of the :class:`EncoderConfig` that built it; encoding with a store made
for a different configuration raises :class:`ConfigMismatch`.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore, Tensor
from .errors import ConfigMismatch, InvalidConfig, ShapeMismatch
from .masking import MaskMatrix, attention_visibility

ENCODER_KINDS = ("transformer", "recurrent")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.2
    encoder_kind: str = "transformer"
    n_bins: int = 64
    positional_encoding: bool = True

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise InvalidConfig(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig(f"dropout must be in [0, 1), got {self.dropout}")
        if min(self.d_model, self.n_layers, self.n_heads, self.ffn_dim, self.n_bins) < 1:
            raise InvalidConfig("encoder dimensions must be positive")

    def as_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return dc.config_hash(self.as_dict())


@dataclass(frozen=True)
class Representation:
    h: np.ndarray


# -- initialization -------------------------------------------------------------

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> ParameterStore:
    """Fresh encoder weights: uniform Xavier matrices, zero biases, unit norms."""
    d, f, n = cfg.d_model, cfg.ffn_dim, cfg.n_bins
    store = ParameterStore(metadata={"encoder_hash": cfg.hash(), "config": {"encoder": cfg.as_dict()}})
    if cfg.encoder_kind == "recurrent":
        for gate in ("r", "z", "n"):
            store.add(f"gru.w_i{gate}", _xavier(rng, n, d, dtype))
            store.add(f"gru.w_h{gate}", _xavier(rng, d, d, dtype))
            store.add(f"gru.b_i{gate}", _zeros(d, dtype))
            store.add(f"gru.b_h{gate}", _zeros(d, dtype))
        return store
    store.add("input.weight", _xavier(rng, n, d, dtype))
    store.add("input.bias", _zeros(d, dtype))
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for proj in ("q", "k", "v", "out"):
            store.add(p + f"attn.{proj}.weight", _xavier(rng, d, d, dtype))
            store.add(p + f"attn.{proj}.bias", _zeros(d, dtype))
        store.add(p + "norm1.gamma", _ones(d, dtype))
        store.add(p + "norm1.beta", _zeros(d, dtype))
        store.add(p + "ffn.fc1.weight", _xavier(rng, d, f, dtype))
        store.add(p + "ffn.fc1.bias", _zeros(f, dtype))
        store.add(p + "ffn.fc2.weight", _xavier(rng, f, d, dtype))
        store.add(p + "ffn.fc2.bias", _zeros(d, dtype))
        store.add(p + "norm2.gamma", _ones(d, dtype))
        store.add(p + "norm2.beta", _zeros(d, dtype))
    return store


@functools.lru_cache(maxsize=32)
def expected_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    store = init_encoder(cfg, np.random.default_rng(0), dtype=np.float64)
    return {k: t.shape for k, t in store.items()}


def check_params(params: ParameterStore, cfg: EncoderConfig) -> None:
    """Raise ConfigMismatch unless ``params`` was built for ``cfg``."""
    stored = params.metadata.get("encoder_hash")
    if stored is not None and stored != cfg.hash():
        raise ConfigMismatch(f"encoder weights hash {stored} != configuration hash {cfg.hash()}")
    want = expected_shapes(cfg)
    have = {k: t.shape for k, t in params.items()}
    if want != have:
        missing = sorted(set(want) - set(have))
        extra = sorted(set(have) - set(want))
        raise ConfigMismatch(f"encoder parameters do not match configuration (missing={missing[:3]}, extra={extra[:3]})")


# -- Transformer ----------------------------------------------------------------

def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _linear(x: Tensor, params: ParameterStore, name: str) -> Tensor:
    return x @ params[name + ".weight"] + params[name + ".bias"]


def _as_input(clips, dtype) -> Tensor:
    if isinstance(clips, Tensor):
        x = clips
    else:
        x = Tensor(np.asarray(clips), dtype=dtype)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3:
        raise ShapeMismatch(f"expected clips of shape (batch, n_bins, frames), got {x.shape}")
    return x


def transformer_forward(
    params: ParameterStore,
    cfg: EncoderConfig,
    clips,
    kept: np.ndarray | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Encode a batch of clips; returns the mean-pooled (batch, d_model) tensor.

    ``kept`` is a (batch, frames) boolean array of visible time steps, or
    None for no masking. When ``trace`` is a dict it receives per-layer
    attention weights (``attn.{i}``), attention outputs before the residual
    (``attn_out.{i}``) and block outputs (``block.{i}``) as arrays.
    """
    dtype = params["input.weight"].dtype
    x = _as_input(clips, dtype)
    batch, n_bins, frames = x.shape
    if n_bins != cfg.n_bins:
        raise ShapeMismatch(f"clips have {n_bins} bins, encoder expects {cfg.n_bins}")
    d, heads = cfg.d_model, cfg.n_heads
    dh = d // heads
    h = _linear(x.transpose(0, 2, 1), params, "input")
    if cfg.positional_encoding:
        h = h + Tensor(sinusoidal_positions(frames, d), dtype=dtype)

    visible = None
    if kept is not None:
        kept = np.asarray(kept, dtype=bool)
        if kept.shape != (batch, frames):
            raise ShapeMismatch(f"mask shape {kept.shape} != {(batch, frames)}")
        if not kept.all():
            visible = attention_visibility(kept)[:, None, :, :]

    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."

        def heads_view(t: Tensor) -> Tensor:
            return t.reshape(batch, frames, heads, dh).transpose(0, 2, 1, 3)

        q = heads_view(_linear(h, params, p + "attn.q"))
        k = heads_view(_linear(h, params, p + "attn.k"))
        v = heads_view(_linear(h, params, p + "attn.v"))
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if visible is not None:
            scores = dc.masked_fill(scores, visible, -np.inf)
        weights = dc.softmax(scores, axis=-1)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, frames, d)
        attn_out = _linear(ctx, params, p + "attn.out")
        h = dc.layer_norm(h + dc.dropout(attn_out, cfg.dropout, train, rng),
                          params[p + "norm1.gamma"], params[p + "norm1.beta"])
        ff = _linear(dc.relu(_linear(h, params, p + "ffn.fc1")), params, p + "ffn.fc2")
        h = dc.layer_norm(h + dc.dropout(ff, cfg.dropout, train, rng),
                          params[p + "norm2.gamma"], params[p + "norm2.beta"])
        if trace is not None:
            trace[f"attn.{i}"] = weights.data
            trace[f"attn_out.{i}"] = attn_out.data
            trace[f"block.{i}"] = h.data
    return pool(h)


def pool(h: Tensor) -> Tensor:
    """Collapse (batch, frames, d) position outputs to (batch, d)."""
    return dc.mean(h, axis=1)


# -- GRU ------------------------------------------------------------------------

def recurrent_forward(
    params: ParameterStore,
    cfg: EncoderConfig,
    clips,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run a GRU over the frames from a zero state; returns the final hidden state."""
    dtype = params["gru.w_ir"].dtype
    x = _as_input(clips, dtype)
    batch, n_bins, frames = x.shape
    if n_bins != cfg.n_bins:
        raise ShapeMismatch(f"clips have {n_bins} bins, encoder expects {cfg.n_bins}")
    g = {k[4:]: t for k, t in params.items() if k.startswith("gru.")}
    h = Tensor(np.zeros((batch, cfg.d_model)), dtype=dtype)
    const_input = not x.requires_grad
    for t in range(frames):
        xt = Tensor(x.data[:, :, t], dtype=dtype) if const_input else x[:, :, t]
        r = dc.sigmoid(xt @ g["w_ir"] + g["b_ir"] + h @ g["w_hr"] + g["b_hr"])
        z = dc.sigmoid(xt @ g["w_iz"] + g["b_iz"] + h @ g["w_hz"] + g["b_hz"])
        n = dc.tanh(xt @ g["w_in"] + g["b_in"] + r * (h @ g["w_hn"] + g["b_hn"]))
        h = (1.0 - z) * n + z * h
    return dc.dropout(h, cfg.dropout, train, rng)


# -- dispatch ---------------------------------------------------------------------

def encode_batch(
    params: ParameterStore,
    cfg: EncoderConfig,
    clips,
    kept: np.ndarray | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    trace: dict | None = None,
) -> Tensor:
    if cfg.encoder_kind == "recurrent":
        return recurrent_forward(params, cfg, clips, train=train, rng=rng)
    return transformer_forward(params, cfg, clips, kept=kept, train=train, rng=rng, trace=trace)


def encode(
    clip,
    mask: MaskMatrix | None,
    params: ParameterStore,
    cfg: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Representation:
    """Encode one clip (a MelClip or an (n_bins, frames) array) to its representation."""
    check_params(params, cfg)
    values = getattr(clip, "values", clip)
    kept = None if mask is None else mask.kept[None, :]
    with dc.no_grad():
        out = encode_batch(params, cfg, np.asarray(values)[None], kept=kept, train=train, rng=rng)
    return Representation(out.data[0].copy())


def encode_recurrent(
    clip,
    params: ParameterStore,
    cfg: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Representation:
    check_params(params, cfg)
    values = getattr(clip, "values", clip)
    with dc.no_grad():
        out = recurrent_forward(params, cfg, np.asarray(values)[None], train=train, rng=rng)
    return Representation(out.data[0].copy())
