from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from conftest import tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st

from coughssl.contrastive import (
    contrastive_loss,
    init_projection_head,
    pair_index,
    pretrain,
    sample_batch,
    similarity,
    similarity_gap,
    similarity_logits,
    similarity_matrix,
)
from coughssl.diffcore import Tensor, save_store
from coughssl.errors import InsufficientParticipants, NonPositiveTemperature, ZeroNorm
from coughssl.features import DatasetManifest, ManifestEntry, MelClip, load_manifest
from coughssl.pipeline import clip_index_for


def _scalar_loss(s: np.ndarray, b: int, tau: float) -> float:
    """Per-anchor loop over a similarity matrix, in plain scalar arithmetic."""
    n = 2 * b
    total = 0.0
    for i in range(n):
        j = (i + b) % n
        denom = sum(math.exp(s[i][k] / tau) for k in range(n) if k != i)
        total += -math.log(math.exp(s[i][j] / tau) / denom)
    return total / n


def _fake_index(n_participants: int, clips_each: int = 3):
    index, entries = {}, []
    for p in range(n_participants):
        pid = f"u{p:02d}"
        index[pid] = [MelClip(np.full((2, 3), p + 0.1 * k), pid, f"{pid}/{k}", None, 0, 2, 3) for k in range(clips_each)]
        entries.append(ManifestEntry(pid, f"{pid}.wav", None, "unlabeled"))
    return DatasetManifest(entries), index


# -- similarity ----------------------------------------------------------------------

def test_similarity_examples():
    v = np.array([0.3, -2.0, 1.5])
    assert similarity(v, v, "cosine") == pytest.approx(1.0)
    assert similarity([1, 0], [0, 1], "cosine") == 0.0
    u = np.array([1.0, 2.0, -0.5])
    assert similarity(u, v, "bilinear", np.eye(3)) == pytest.approx(float(u @ v))
    with pytest.raises(ZeroNorm):
        similarity(np.zeros(3), v, "cosine")


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    assert similarity(c * a, b, "cosine") == pytest.approx(similarity(a, b, "cosine"), abs=1e-12)


def test_logits_scale_exactly_with_temperature():
    z = Tensor(np.random.default_rng(0).standard_normal((6, 4)))
    one = similarity_logits(z, "cosine", 1.0).data
    for tau in (0.05, 0.1, 0.5, 2.0):
        np.testing.assert_allclose(similarity_logits(z, "cosine", tau).data * tau, one, rtol=1e-14)
    with pytest.raises(NonPositiveTemperature):
        similarity_logits(z, "cosine", 0.0)


def test_matrix_agrees_with_pairwise_similarity():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((5, 3))
    w = rng.standard_normal((3, 3))
    for metric, ws in (("cosine", None), ("bilinear", w)):
        m = similarity_matrix(Tensor(z), metric, None if ws is None else Tensor(ws)).data
        for i in range(5):
            for j in range(5):
                assert m[i, j] == pytest.approx(similarity(z[i], z[j], metric, ws), abs=1e-12)


# -- loss ---------------------------------------------------------------------------------

def test_single_pair_loss_is_zero():
    z = Tensor(np.random.default_rng(2).standard_normal((2, 4)))
    assert contrastive_loss(z, pair_index(1), "cosine", 0.1).item() == 0.0


@pytest.mark.parametrize("b", [1, 2, 4, 8])
def test_equal_similarities_give_log_2b_minus_1(b):
    z = Tensor(np.tile([0.5, -1.0, 2.0], (2 * b, 1)))
    loss = contrastive_loss(z, pair_index(b), "bilinear", 0.1, Tensor(np.eye(3))).item()
    assert abs(loss - math.log(2 * b - 1)) <= 1e-8
    if b == 4:
        assert loss == pytest.approx(1.9459, abs=1e-4)


def test_hand_set_b2_matrix_matches_scalar_oracle():
    from coughssl.contrastive import loss_from_logits

    s = np.array([[1.0, 0.2, 0.7, -0.3], [0.2, 1.0, 0.1, 0.4], [0.7, 0.1, 1.0, 0.0], [-0.3, 0.4, 0.0, 1.0]])
    got = loss_from_logits(Tensor(s / 0.5), pair_index(2)).item()
    assert abs(got - _scalar_loss(s, 2, 0.5)) <= 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_batched_loss_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    b = int(rng.integers(1, 9))
    z = rng.standard_normal((2 * b, 5))
    w = rng.standard_normal((5, 5))
    tau = float(rng.uniform(0.1, 2.0))
    for metric, ws in (("cosine", None), ("bilinear", w)):
        s = np.array([[similarity(z[i], z[j], metric, ws) for j in range(2 * b)] for i in range(2 * b)])
        got = contrastive_loss(Tensor(z), pair_index(b), metric, tau, None if ws is None else Tensor(ws)).item()
        assert abs(got - _scalar_loss(s, b, tau)) <= 1e-10
        assert got >= 0.0


def test_projection_head_init_options():
    rng = np.random.default_rng(0)
    assert "sim.W_s" not in init_projection_head(8, "cosine", rng)
    assert not init_projection_head(8, "bilinear", rng)["sim.W_s"].data.any()
    np.testing.assert_array_equal(init_projection_head(8, "bilinear", rng, bilinear_init="identity")["sim.W_s"].data,
                                  np.eye(8))


# -- sampling -----------------------------------------------------------------------------

def test_two_participants_batch_of_two():
    manifest, index = _fake_index(2)
    batch = sample_batch(manifest, index, 2, np.random.default_rng(0))
    assert sorted(batch.participant_ids) == ["u00", "u01"]
    for a, b in zip(batch.clips_a, batch.clips_b):
        assert a.participant_id == b.participant_id and a.source_id != b.source_id
    np.testing.assert_array_equal(batch.pair_index(), [2, 3, 0, 1])


def test_batch_larger_than_pool():
    manifest, index = _fake_index(300, 2)
    with pytest.raises(InsufficientParticipants):
        sample_batch(manifest, index, 1024, np.random.default_rng(0))


def test_single_clip_participants_are_excluded():
    manifest, index = _fake_index(3)
    index["u01"] = index["u01"][:1]
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert "u01" not in sample_batch(manifest, index, 2, rng).participant_ids
    with pytest.raises(InsufficientParticipants):
        sample_batch(manifest, index, 3, rng)


def test_participant_selection_is_uniform():
    manifest, index = _fake_index(20)
    rng = np.random.default_rng(5)
    counts = Counter()
    for _ in range(10_000):
        counts.update(sample_batch(manifest, index, 8, rng).participant_ids)
    freqs = np.array([counts[p] / 10_000 for p in sorted(index)])
    assert np.all(np.abs(freqs - 0.4) <= 0.03)


# -- pre-training ----------------------------------------------------------------------------

class _Poison:
    """A label that fails loudly on any use."""

    def _boom(self, *args):
        raise AssertionError("pre-training read a label")

    __bool__ = __int__ = __index__ = __eq__ = __hash__ = __float__ = __str__ = __repr__ = _boom


def test_pretrain_is_deterministic_and_label_blind(tiny_corpus, tmp_path):
    cfg = tiny_config(**{"run.precision": "float64", "contrastive.mask_rate": 0.5})
    manifest = load_manifest(tiny_corpus)
    poisoned = DatasetManifest([
        ManifestEntry(e.participant_id, e.file_path, _Poison(), e.split) for e in manifest.entries
    ])
    a = pretrain(manifest, cfg, seed=4)
    b = pretrain(poisoned, cfg, seed=4)
    save_store(a.encoder, tmp_path / "a.cswt")
    save_store(b.encoder, tmp_path / "b.cswt")
    assert (tmp_path / "a.cswt").read_bytes() == (tmp_path / "b.cswt").read_bytes()
    assert a.losses == b.losses
    assert len(a.losses) == 2 * math.ceil(10 / 4)


def test_pretrain_logs_and_metadata(tiny_corpus, tmp_path):
    cfg = tiny_config()
    result = pretrain(load_manifest(tiny_corpus), cfg, seed=0, log_path=tmp_path / "log.tsv")
    rows = [line.split("\t") for line in (tmp_path / "log.tsv").read_text().splitlines()]
    assert [int(r[0]) for r in rows] == list(range(len(result.losses)))
    assert all(float(r[2]) == 1e-3 for r in rows)
    assert result.encoder.metadata["encoder_hash"] == cfg.encoder.hash()
    assert result.encoder.metadata["phase"] == "pretrain"
    assert not any(n.startswith(("proj.", "sim.")) for n in result.encoder.names())
    # equal initial logits under the zero bilinear init
    assert result.initial_loss == pytest.approx(math.log(7), rel=1e-6)


def test_similarity_gap_runs_on_held_out_clips(tiny_corpus):
    cfg = tiny_config(**{"contrastive.epochs": 10})
    manifest = load_manifest(tiny_corpus)
    result = pretrain(manifest, cfg, seed=1)
    within, between = similarity_gap(result, cfg, clip_index_for(manifest, cfg, ("train", "val", "test")))
    assert np.isfinite(within) and np.isfinite(between)
