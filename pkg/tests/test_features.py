from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coughssl.errors import AudioTooShort, InvalidConfig, ParseError, SplitViolation
from coughssl.features import (
    DatasetManifest,
    FeatureConfig,
    ManifestEntry,
    MelClip,
    MelSpectrogram,
    RawAudio,
    build_clip_index,
    compute_logmel,
    extract_clips,
    format_manifest,
    load_manifest,
    mel_center_frequencies,
    mel_filterbank,
    parse_manifest,
    read_wav,
    resample_linear,
    write_wav,
)

CFG = FeatureConfig()


def _count_frames(n_samples: int, frame: int, hop: int) -> int:
    """Frame-iterator oracle: walk start positions until a frame no longer fits."""
    count, start = 0, 0
    while start + frame <= n_samples:
        count += 1
        start += hop
    return count


def test_one_second_gives_98_frames_of_64_bins():
    audio = RawAudio(np.random.default_rng(0).uniform(-0.1, 0.1, 16000), 16000)
    spec = compute_logmel(audio, CFG)
    assert spec.values.shape == (64, 98)
    assert _count_frames(16000, 400, 160) == 98
    assert (16000 - 400) // 160 + 1 == 98


@pytest.mark.parametrize("n", [400, 401, 559, 560, 4321, 16000])
def test_frame_count_matches_iterator(n):
    spec = compute_logmel(RawAudio(np.full(n, 0.01), 16000), CFG)
    assert spec.n_frames == _count_frames(n, CFG.frame_len, CFG.hop_len)


def test_silence_is_constant_log_eps():
    spec = compute_logmel(RawAudio(np.zeros(8000), 16000), CFG)
    np.testing.assert_array_equal(spec.values, np.full_like(spec.values, math.log(1e-6)))


def _htk_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _htk_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _triangle(f: float, lo: float, mid: float, hi: float) -> float:
    if lo < f <= mid:
        return (f - lo) / (mid - lo)
    if mid < f < hi:
        return (hi - f) / (hi - mid)
    return 0.0


def test_filterbank_matches_brute_force_triangles():
    edges = _htk_hz(np.linspace(_htk_mel(60.0), _htk_mel(8000.0), 66))
    fb = mel_filterbank(CFG)
    freqs = np.arange(CFG.n_fft // 2 + 1) * CFG.sample_rate / CFG.n_fft
    for k in range(64):
        want = [_triangle(f, edges[k], edges[k + 1], edges[k + 2]) for f in freqs]
        np.testing.assert_allclose(fb[k], want, atol=1e-9)
    np.testing.assert_allclose(mel_center_frequencies(CFG), edges[1:-1], rtol=1e-12)


@pytest.mark.parametrize("k", range(64))
def test_sinusoid_at_bin_centre_peaks_in_that_bin(k):
    f = mel_center_frequencies(CFG)[k]
    t = np.arange(16000) / 16000
    spec = compute_logmel(RawAudio(0.5 * np.sin(2 * np.pi * f * t), 16000), CFG)
    assert (spec.values.argmax(axis=0) == k).all()


def test_too_short_and_bad_range():
    with pytest.raises(AudioTooShort):
        compute_logmel(RawAudio(np.zeros(399), 16000), CFG)
    with pytest.raises(InvalidConfig):
        compute_logmel(RawAudio(np.zeros(1000), 16000), FeatureConfig(f_max=9000.0))
    with pytest.raises(InvalidConfig):
        RawAudio(np.zeros(10), 0)


def test_logmel_is_deterministic():
    x = np.random.default_rng(1).uniform(-0.5, 0.5, 5000)
    a = compute_logmel(RawAudio(x, 16000), CFG).values
    b = compute_logmel(RawAudio(x.copy(), 16000), CFG).values
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), gain=st.floats(1.0, 20.0))
def test_gain_never_decreases_logmel(seed, gain):
    x = np.random.default_rng(seed).uniform(-0.05, 0.05, 2000)
    lo = compute_logmel(RawAudio(x, 16000), CFG).values
    hi = compute_logmel(RawAudio(gain * x, 16000), CFG).values
    assert (hi >= lo - 1e-12).all()


def test_resampling_to_configured_rate():
    x = np.sin(np.linspace(0, 20, 8000))
    y = resample_linear(x, 8000, 16000)
    assert len(y) == 16000
    spec = compute_logmel(RawAudio(x, 8000), CFG)
    assert spec.n_frames == 98


# -- clips ----------------------------------------------------------------------

def _spec(t: int, n: int = 4) -> MelSpectrogram:
    return MelSpectrogram(np.arange(n * t, dtype=float).reshape(n, t), 10.0, "src")


def test_clip_examples():
    assert len(extract_clips(_spec(96), 96, 48)) == 1
    clips = extract_clips(_spec(192), 96, 48)
    assert [c.start_frame for c in clips] == [0, 48, 96]
    np.testing.assert_array_equal(clips[1].values, _spec(192).values[:, 48:144])
    assert extract_clips(_spec(95), 96, 48) == []


@settings(max_examples=60, deadline=None)
@given(t=st.integers(1, 400), window=st.integers(1, 120), stride=st.integers(1, 80))
def test_clip_count_law(t, window, stride):
    clips = extract_clips(_spec(t, 2), window, stride)
    want = (t - window) // stride + 1 if t >= window else 0
    assert len(clips) == want
    assert all(c.values.shape == (2, window) for c in clips)


def test_clip_shape_is_enforced():
    with pytest.raises(ValueError):
        MelClip(np.zeros((64, 95)))


# -- manifests ---------------------------------------------------------------------

def test_manifest_examples(tmp_path):
    assert len(parse_manifest("")) == 0
    text = "".join(f"u{p}\ta/{p}_{k}.wav\t-\tunlabeled\n" for p in range(3) for k in range(2))
    m = parse_manifest(text)
    assert len(m) == 6 and m.participants() == ["u0", "u1", "u2"]
    with pytest.raises(SplitViolation) as err:
        parse_manifest("p1\ta.wav\t1\ttrain\np1\tb.wav\t1\ttest\n")
    assert err.value.participant_id == "p1"


@pytest.mark.parametrize(
    "line",
    ["p1\ta.wav\t1", "p1\ta.wav\t2\ttrain", "p1\ta.wav\t1\tholdout", "\ta.wav\t1\ttrain"],
)
def test_manifest_parse_errors_carry_line_numbers(line):
    with pytest.raises(ParseError) as err:
        parse_manifest("# header\n\n" + line + "\n")
    assert err.value.line == 3


def test_manifest_label_rules():
    with pytest.raises(SplitViolation):
        parse_manifest("u1\ta.wav\t1\tunlabeled\n")
    with pytest.raises(SplitViolation):
        parse_manifest("p1\ta.wav\t-\ttrain\n")


def test_manifest_ordering_and_round_trip(tmp_path):
    m = parse_manifest("b\tz.wav\t0\ttest\na\ty.wav\t1\ttrain\na\tx.wav\t1\ttrain\n", base_dir=tmp_path)
    assert [(e.participant_id, e.file_path.name) for e in m.entries] == [("a", "x.wav"), ("a", "y.wav"), ("b", "z.wav")]
    (tmp_path / "m.tsv").write_text(format_manifest(m, base_dir=tmp_path))
    again = load_manifest(tmp_path / "m.tsv")
    assert again.entries == m.entries


def test_wav_round_trip_and_clip_index(tmp_path):
    x = 0.3 * np.sin(np.linspace(0, 300, 16000))
    write_wav(tmp_path / "a.wav", x, 16000)
    audio = read_wav(tmp_path / "a.wav")
    assert audio.sample_rate == 16000
    np.testing.assert_allclose(audio.samples, x, atol=1 / 32767)
    manifest = DatasetManifest([ManifestEntry("p", tmp_path / "a.wav", 1, "train")])
    index = build_clip_index(manifest, CFG)
    assert [c.label for c in index["p"]] == [1]
    assert build_clip_index(manifest, CFG, with_labels=False)["p"][0].label is None
