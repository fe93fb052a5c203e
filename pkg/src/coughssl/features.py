"""Log-mel filterbank features, fixed-length clips, and dataset manifests."""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AudioTooShort, InvalidConfig, ParseError, SplitViolation

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "unlabeled")


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_bins: int = 64
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    f_min: float = 60.0
    f_max: float | None = None  # None means Nyquist
    log_eps: float = 1e-6
    clip_frames: int = 96
    clip_stride: int = 48

    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def hop_len(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def upper_hz(self) -> float:
        return self.sample_rate / 2.0 if self.f_max is None else float(self.f_max)


@dataclass(frozen=True)
class RawAudio:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidConfig(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (n_bins, n_frames)
    frame_hop_ms: float
    source_id: str = ""

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MelClip:
    """One N x T_w window; the shape is checked at construction."""

    values: np.ndarray
    participant_id: str = ""
    source_id: str = ""
    label: int | None = None
    start_frame: int = 0
    n_bins: int = 64
    n_frames: int = 96

    def __post_init__(self):
        if self.values.shape != (self.n_bins, self.n_frames):
            raise ValueError(
                f"clip must be {self.n_bins}x{self.n_frames}, got {self.values.shape}"
            )


@dataclass(frozen=True)
class ManifestEntry:
    participant_id: str
    file_path: Path
    label: int | None
    split: str
    source: str = ""  # path as written in the manifest; stable across corpus locations


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def participants(self, splits: Iterable[str] | None = None) -> list[str]:
        wanted = None if splits is None else set(splits)
        return sorted({e.participant_id for e in self.entries if wanted is None or e.split in wanted})

    def select(self, splits: Iterable[str]) -> DatasetManifest:
        wanted = set(splits)
        return DatasetManifest([e for e in self.entries if e.split in wanted])


# -- mel scale ---------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: FeatureConfig) -> np.ndarray:
    """``n_bins + 2`` frequencies in Hz; filter k spans edges[k]..edges[k+2]."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_hz), cfg.n_bins + 2))


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters evaluated at the FFT bin frequencies, shape (n_bins, n_fft//2+1)."""
    _validate(cfg)
    edges = mel_band_edges(cfg)
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _validate(cfg: FeatureConfig) -> None:
    if cfg.n_bins < 1:
        raise InvalidConfig("n_bins must be >= 1")
    if cfg.upper_hz > cfg.sample_rate / 2.0 + 1e-9:
        raise InvalidConfig(f"mel upper edge {cfg.upper_hz} Hz exceeds Nyquist {cfg.sample_rate / 2} Hz")
    if not 0 <= cfg.f_min < cfg.upper_hz:
        raise InvalidConfig(f"mel range [{cfg.f_min}, {cfg.upper_hz}] is empty")
    if cfg.n_fft < cfg.frame_len:
        raise InvalidConfig(f"n_fft {cfg.n_fft} shorter than frame length {cfg.frame_len}")
    if cfg.hop_len < 1:
        raise InvalidConfig("hop must be at least one sample")


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return np.asarray(samples, dtype=np.float64)
    n_out = int(round(len(samples) * dst_rate / src_rate))
    t_out = np.arange(n_out) / dst_rate
    t_in = np.arange(len(samples)) / src_rate
    return np.interp(t_out, t_in, samples)


def compute_logmel(audio: RawAudio, cfg: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    """Log-compressed mel filterbank energies, shape (n_bins, n_frames).

    Frames of ``frame_ms`` advance by ``hop_ms``; only whole frames are
    kept, so ``n_frames = (len - frame_len) // hop + 1``.
    """
    _validate(cfg)
    x = resample_linear(np.asarray(audio.samples, dtype=np.float64), audio.sample_rate, cfg.sample_rate)
    flen, hop = cfg.frame_len, cfg.hop_len
    if len(x) < flen:
        raise AudioTooShort(f"{audio.source_id or 'audio'}: {len(x)} samples < one frame of {flen}")
    frames = np.lib.stride_tricks.sliding_window_view(x, flen)[::hop]
    power = np.abs(np.fft.rfft(frames * _hann(flen), n=cfg.n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg).T  # (T, N)
    values = np.log(energies + cfg.log_eps).T
    return MelSpectrogram(np.ascontiguousarray(values), frame_hop_ms=cfg.hop_ms, source_id=audio.source_id)


def extract_clips(
    spec: MelSpectrogram,
    window: int = 96,
    stride: int = 48,
    participant_id: str = "",
    label: int | None = None,
) -> list[MelClip]:
    """Cut ``window``-frame clips every ``stride`` frames. Short inputs give no clips."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    starts = range(0, spec.n_frames - window + 1, stride)
    return [
        MelClip(
            values=spec.values[:, s:s + window].copy(),
            participant_id=participant_id,
            source_id=spec.source_id,
            label=label,
            start_frame=s,
            n_bins=spec.n_bins,
            n_frames=window,
        )
        for s in starts
    ]


# -- WAV i/o -----------------------------------------------------------------

def read_wav(path: str | Path) -> RawAudio:
    """Read 16-bit PCM WAV (mono, or first channel of multi-channel)."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ParseError(f"{path}: only 16-bit PCM is supported")
        rate = w.getframerate()
        channels = w.getnchannels()
        raw = w.readframes(w.getnframes())
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, channels)[:, 0]
    return RawAudio(data.astype(np.float64) / 32768.0, rate, source_id=str(path))


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# -- manifests ---------------------------------------------------------------

def parse_manifest(text: str, base_dir: Path | None = None) -> DatasetManifest:
    base = Path(base_dir) if base_dir is not None else None
    entries = []
    owner: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", lineno)
        pid, fpath, label_s, split = (f.strip() for f in fields)
        if not pid or not fpath:
            raise ParseError("empty participant id or file path", lineno)
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", lineno)
        if label_s == "-":
            label = None
        elif label_s in ("0", "1"):
            label = int(label_s)
        else:
            raise ParseError(f"label must be 0, 1 or '-', got {label_s!r}", lineno)
        if split == "unlabeled" and label is not None:
            raise SplitViolation(pid, f"line {lineno}: unlabeled entries must not carry a label")
        if split != "unlabeled" and label is None:
            raise SplitViolation(pid, f"line {lineno}: {split} entries require a label")
        prev = owner.setdefault(pid, split)
        if prev != split:
            raise SplitViolation(pid, f"appears in both {prev!r} and {split!r}")
        p = Path(fpath)
        if base is not None and not p.is_absolute():
            p = base / p
        entries.append(ManifestEntry(pid, p, label, split, fpath))
    entries.sort(key=lambda e: (e.participant_id, str(e.file_path)))
    return DatasetManifest(entries)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest file; relative audio paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8") from exc
    return parse_manifest(text, base_dir=path.parent)


def format_manifest(manifest: DatasetManifest, base_dir: Path | None = None) -> str:
    lines = []
    for e in manifest.entries:
        p = e.file_path
        if base_dir is not None:
            try:
                p = p.relative_to(base_dir)
            except ValueError:
                pass
        label = "-" if e.label is None else str(e.label)
        lines.append(f"{e.participant_id}\t{p.as_posix()}\t{label}\t{e.split}")
    return "\n".join(lines) + ("\n" if lines else "")


# -- clip index ---------------------------------------------------------------

def clips_for_entry(entry: ManifestEntry, cfg: FeatureConfig, with_label: bool = True) -> list[MelClip]:
    audio = replace(read_wav(entry.file_path), source_id=entry.source or str(entry.file_path))
    try:
        spec = compute_logmel(audio, cfg)
    except AudioTooShort:
        logger.info("skipping %s: shorter than one frame", entry.file_path)
        return []
    return extract_clips(
        spec,
        window=cfg.clip_frames,
        stride=cfg.clip_stride,
        participant_id=entry.participant_id,
        label=entry.label if with_label else None,
    )


def build_clip_index(
    manifest: DatasetManifest,
    cfg: FeatureConfig,
    splits: Sequence[str] | None = None,
    with_labels: bool = True,
) -> dict[str, list[MelClip]]:
    """Map participant id to its clips (manifest order, then start frame).

    With ``with_labels=False`` the label field is never read.
    """
    wanted = None if splits is None else set(splits)
    index: dict[str, list[MelClip]] = {}
    for e in manifest.entries:
        if wanted is not None and e.split not in wanted:
            continue
        index.setdefault(e.participant_id, []).extend(clips_for_entry(e, cfg, with_label=with_labels))
    return index
