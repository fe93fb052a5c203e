"""Synthetic respiratory corpus with participant identity and a learnable label.

Every participant owns a few "signature" tones placed at mel-bin centre
frequencies, so clips of the same person share spectral structure (which
contrastive pre-training can latch onto). Positive participants
additionally carry band-limited noise in a fixed band, the label effect.
Each recording is shaped by a few random cough-like bursts and buried in
white noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InvalidConfig
from ..features import DatasetManifest, FeatureConfig, ManifestEntry, format_manifest, mel_center_frequencies, write_wav
from ..rng import stream


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_participants: int = 40
    clips_per_participant: int = 20
    positive_fraction: float = 0.3
    signature_bins_per_participant: int = 3
    noise_level: float = 0.01
    label_effect: float = 0.05
    seed: int = 0
    n_unlabeled_participants: int = 0
    duration_s: float = 1.0
    sample_rate: int = 16000
    n_bins: int = 64
    label_band_hz: tuple[float, float] = (2000.0, 3000.0)
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise InvalidConfig("positive_fraction must be in [0, 1]")
        if not 0 < self.signature_bins_per_participant < self.n_bins:
            raise InvalidConfig("signature bins must be in [1, n_bins)")
        if self.noise_level < 0 or self.label_effect < 0:
            raise InvalidConfig("noise_level and label_effect must be non-negative")
        if self.n_participants < 0 or self.n_unlabeled_participants < 0 or self.clips_per_participant < 1:
            raise InvalidConfig("participant and clip counts must be positive")
        lo, hi = self.label_band_hz
        if not 0 < lo < hi <= self.sample_rate / 2:
            raise InvalidConfig("label band must lie inside (0, Nyquist]")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise InvalidConfig("split fractions must sum to 1")


@dataclass(frozen=True)
class Participant:
    pid: str
    label: int
    split: str
    tone_hz: tuple[float, ...]
    tone_amp: tuple[float, ...]


def desk_corpus_spec(seed: int = 0) -> SyntheticCorpusSpec:
    """The desk-scale corpus: 40 labeled participants plus an unlabeled pre-training pool."""
    return SyntheticCorpusSpec(n_participants=40, clips_per_participant=20, n_unlabeled_participants=80, seed=seed)


def _split_labeled(labels: np.ndarray, fractions, rng: np.random.Generator) -> list[str]:
    """Stratified train/val/test assignment; every split gets each class when possible."""
    splits = [""] * len(labels)
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n = len(idx)
        n_val = int(round(fractions[1] * n))
        n_test = int(round(fractions[2] * n))
        if n >= 3:
            n_val, n_test = max(n_val, 1), max(n_test, 1)
        n_train = n - n_val - n_test
        for j, i in enumerate(idx):
            splits[i] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    return splits


def make_participants(spec: SyntheticCorpusSpec) -> list[Participant]:
    rng = stream(spec.seed, "synth-participants")
    centres = mel_center_frequencies(FeatureConfig(sample_rate=spec.sample_rate, n_bins=spec.n_bins))
    out = []
    for group, count in (("p", spec.n_participants), ("u", spec.n_unlabeled_participants)):
        n_pos = int(round(spec.positive_fraction * count))
        labels = np.zeros(count, dtype=int)
        labels[rng.permutation(count)[:n_pos]] = 1
        splits = _split_labeled(labels, spec.split_fractions, rng) if group == "p" else ["unlabeled"] * count
        for i in range(count):
            bins = rng.choice(spec.n_bins, size=spec.signature_bins_per_participant, replace=False)
            amps = rng.uniform(0.03, 0.12, size=len(bins))
            out.append(Participant(f"{group}{i:03d}", int(labels[i]), splits[i],
                                   tuple(float(centres[b]) for b in sorted(bins)), tuple(float(a) for a in amps)))
    return out


def _burst_envelope(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    env = np.full(n, 0.3)
    for _ in range(rng.integers(1, 4)):
        width = int(rng.uniform(0.15, 0.4) * sr)
        start = int(rng.integers(0, max(1, n - width)))
        env[start:start + width] += np.hanning(width)[: n - start]
    return env / env.max()


def _band_noise(n: int, sr: int, band: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0
    x = np.fft.irfft(spec, n)
    return x / (x.std() + 1e-12)


def synthesize_recording(spec: SyntheticCorpusSpec, who: Participant, index: int) -> np.ndarray:
    """One recording's samples in [-1, 1]; deterministic in (seed, participant, index)."""
    rng = stream(spec.seed, f"synth-{who.pid}-{index}")
    n = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    env = _burst_envelope(n, spec.sample_rate, rng)
    x = np.zeros(n)
    for f, a in zip(who.tone_hz, who.tone_amp):
        x += a * rng.uniform(0.8, 1.2) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if who.label == 1 and spec.label_effect > 0:
        x += spec.label_effect * rng.uniform(0.8, 1.2) * _band_noise(n, spec.sample_rate, spec.label_band_hz, rng)
    x *= env
    if spec.noise_level > 0:
        x += spec.noise_level * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, out_dir: str | Path) -> DatasetManifest:
    """Write WAV files plus ``manifest.tsv`` under ``out_dir``; returns the manifest."""
    out_dir = Path(out_dir)
    entries = []
    for who in make_participants(spec):
        pdir = out_dir / "audio" / who.pid
        pdir.mkdir(parents=True, exist_ok=True)
        for k in range(spec.clips_per_participant):
            path = pdir / f"{k:03d}.wav"
            write_wav(path, synthesize_recording(spec, who, k), spec.sample_rate)
            label = None if who.split == "unlabeled" else who.label
            entries.append(ManifestEntry(who.pid, path, label, who.split, path.relative_to(out_dir).as_posix()))
    entries.sort(key=lambda e: (e.participant_id, str(e.file_path)))
    manifest = DatasetManifest(entries)
    (out_dir / "manifest.tsv").write_text(format_manifest(manifest, base_dir=out_dir), encoding="utf-8")
    return manifest
