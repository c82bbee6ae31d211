"""Synthetic corpus generation, windowing, attention pairs, ablation."""

import numpy as np
import pytest

from neurotone import audio, corpus
from neurotone.errors import ContractError


@pytest.fixture(scope="module")
def small_corpus():
    return corpus.generate_synthetic_corpus(16, 8, seed=11)


def test_counts_and_balance(small_corpus):
    assert len(small_corpus.train) == 16
    assert len(small_corpus.test) == 8
    per_cat = {}
    for s in small_corpus.test:
        per_cat[s.category] = per_cat.get(s.category, 0) + 1
    assert per_cat == {c: 2 for c in corpus.CATEGORIES}


def test_test_items_single_category(small_corpus):
    for s in small_corpus.test:
        assert s.components == (s.category,)


def test_train_test_disjoint_ids(small_corpus):
    ids = {s.id for s in small_corpus.train} | {s.id for s in small_corpus.test}
    assert len(ids) == 24


def test_items_prepared(small_corpus):
    for s in small_corpus.train + small_corpus.test:
        assert s.waveform.sample_rate == 22050
        assert len(s.waveform.samples) == corpus.CLIP_SAMPLES
        assert abs(audio.rms(s.waveform.samples) - audio.DEFAULT_RMS) < 1e-6


def test_n_test_divisibility_contract():
    with pytest.raises(ContractError):
        corpus.generate_synthetic_corpus(4, 6, seed=0)


def test_same_seed_bitwise_identical():
    a = corpus.generate_synthetic_corpus(6, 4, seed=3)
    b = corpus.generate_synthetic_corpus(6, 4, seed=3)
    for sa, sb in zip(a.train + a.test, b.train + b.test):
        assert sa.id == sb.id and sa.components == sb.components
        assert np.array_equal(sa.waveform.samples, sb.waveform.samples)


def test_different_seed_differs():
    a = corpus.generate_synthetic_corpus(4, 4, seed=3)
    b = corpus.generate_synthetic_corpus(4, 4, seed=4)
    assert not np.array_equal(a.train[0].waveform.samples, b.train[0].waveform.samples)


def test_sliding_windows_arithmetic(small_corpus):
    s = small_corpus.train[0]
    wins = corpus.sliding_windows(s)
    assert len(wins) == 3
    full = s.waveform.samples
    n4 = corpus.WINDOW_SAMPLES
    assert np.array_equal(wins[0].samples, full[:n4])
    assert np.array_equal(wins[2].samples, full[-n4:])
    # consecutive windows overlap by exactly 2 s
    assert np.array_equal(wins[0].samples[n4 // 2:], wins[1].samples[:n4 // 2])


def test_sliding_windows_sample_count(small_corpus):
    reps = 4
    total = len(small_corpus.train) * reps * len(corpus.sliding_windows(small_corpus.train[0]))
    assert total == 16 * 4 * 3


def test_sliding_windows_rejects_non_8s():
    bad = corpus.Stimulus("x", audio.Waveform(np.zeros(1000, dtype=np.float32)), "speech",
                          ("speech",), "train")
    with pytest.raises(ContractError):
        corpus.sliding_windows(bad)


def test_attention_pairs_counts():
    c = corpus.generate_synthetic_corpus(4, 20, seed=5)
    trials = corpus.make_attention_pairs(c.test, exemplars_per_cat=2, seed=1)
    assert len(trials) == 48
    assert len({t.pair_id for t in trials}) == 24
    # each mix appears exactly twice, once per attended side
    for t in trials:
        assert t.attended in (t.a.id, t.b.id)


def test_attention_pairs_cross_category_only():
    c = corpus.generate_synthetic_corpus(4, 20, seed=5)
    for t in corpus.make_attention_pairs(c.test, 2, seed=1):
        # groups split speech by register; same-category pairs only occur
        # across the two speech registers, never within a group
        if t.a.category == t.b.category:
            assert t.a.category == "speech"
            f0a = t.a.params["speech"]["f0"]
            f0b = t.b.params["speech"]["f0"]
            assert f0a != f0b
        assert "environment" not in (t.a.category, t.b.category)


def test_attention_mix_rms_matches_single():
    c = corpus.generate_synthetic_corpus(4, 20, seed=5)
    t = corpus.make_attention_pairs(c.test, 2, seed=1)[0]
    assert abs(audio.rms(t.mixed.samples) - audio.rms(t.a.waveform.samples)) < 1e-6


def test_ablate_category(small_corpus):
    kept, removed = corpus.ablate_category(small_corpus.train, "music")
    assert removed > 0
    assert all("music" not in s.components for s in kept)
    assert len(kept) + removed == len(small_corpus.train)
    # re-adding the removed items restores the original set
    restored = sorted(kept + [s for s in small_corpus.train if "music" in s.components],
                      key=lambda s: s.id)
    assert [s.id for s in restored] == [s.id for s in small_corpus.train]


def test_ablate_unknown_category(small_corpus):
    with pytest.raises(ContractError):
        corpus.ablate_category(small_corpus.train, "whale-song")


def test_corpus_roundtrip(tmp_path, small_corpus):
    corpus.save_corpus(small_corpus, tmp_path / "c")
    back = corpus.load_corpus(tmp_path / "c")
    assert len(back.train) == len(small_corpus.train)
    for sa, sb in zip(small_corpus.train + small_corpus.test, back.train + back.test):
        assert sa.id == sb.id
        assert np.allclose(sa.waveform.samples, sb.waveform.samples, atol=1e-7)


def test_items_acoustically_identifiable(small_corpus):
    """Every test item's Mel pattern should correlate with itself across
    windows more than with any other item, the property identification
    analyses lean on."""
    feats = {}
    for s in small_corpus.test:
        wins = corpus.sliding_windows(s)
        feats[s.id] = [audio.mel_spectrogram(w).values.ravel() for w in wins]
    ids = sorted(feats)
    for sid in ids:
        own = np.corrcoef(feats[sid][0], feats[sid][2])[0, 1]
        others = [np.corrcoef(feats[sid][0], feats[o][0])[0, 1] for o in ids if o != sid]
        assert own > max(others), f"{sid}: own {own:.2f} vs best other {max(others):.2f}"
