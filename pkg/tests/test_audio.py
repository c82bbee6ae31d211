"""Mel pivot, resampling, energy normalization, and Griffin-Lim round trips."""

import numpy as np
import pytest

from neurotone import audio
from neurotone.errors import ContractError, DegenerateSignalError


def tone(freq, seconds=4.0, sr=audio.SAMPLE_RATE, amp=0.3):
    t = np.arange(int(seconds * sr)) / sr
    return audio.Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32), sr)


def test_prepare_resamples_and_crops():
    rng = np.random.default_rng(0)
    raw = audio.Waveform(rng.standard_normal(441000).astype(np.float32) * 0.1, 44100)
    out = audio.prepare_stimulus(raw)
    assert out.sample_rate == 22050
    assert len(out.samples) == 176400  # 8 s at 22050 Hz


def test_prepare_pads_short_clip():
    raw = audio.Waveform(np.ones(22050, dtype=np.float32) * 0.1, 22050)
    out = audio.prepare_stimulus(raw)
    assert len(out.samples) == 176400


def test_prepare_idempotent_up_to_energy():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(176400).astype(np.float32) * 0.05
    w = audio.Waveform(x, 22050)
    out = audio.prepare_stimulus(w)
    scale = audio.rms(out.samples) / audio.rms(x)
    assert np.allclose(out.samples, x * scale, atol=1e-6)


def test_prepare_equalizes_rms():
    rng = np.random.default_rng(2)
    a = audio.prepare_stimulus(audio.Waveform(rng.standard_normal(200000).astype(np.float32), 22050))
    b = audio.prepare_stimulus(audio.Waveform(0.01 * rng.standard_normal(150000).astype(np.float32), 22050))
    assert abs(audio.rms(a.samples) - audio.rms(b.samples)) < 1e-6
    assert abs(audio.rms(a.samples) - audio.DEFAULT_RMS) < 1e-6


def test_prepare_rejects_silence():
    with pytest.raises(DegenerateSignalError):
        audio.prepare_stimulus(audio.Waveform(np.zeros(22050, dtype=np.float32), 22050))


def test_mel_shape_4s():
    w = tone(440.0)
    m = audio.mel_spectrogram(w)
    assert m.values.shape == (80, 336)


def test_mel_rejects_wrong_rate():
    with pytest.raises(ContractError):
        audio.mel_spectrogram(audio.Waveform(np.zeros(16000, dtype=np.float32), 16000))


def test_mel_silence_hits_log_floor():
    m = audio.mel_spectrogram(audio.Waveform(np.zeros(88200, dtype=np.float32), 22050))
    assert np.allclose(m.values, np.log(1e-5), atol=1e-6)


def test_mel_pure_tone_band_selectivity():
    """The band whose center is nearest 1 kHz should carry the column max."""
    m = audio.mel_spectrogram(tone(1000.0))
    centers = audio.mel_band_centers()
    expect = int(np.argmin(np.abs(centers - 1000.0)))
    winners = np.argmax(m.values, axis=0)
    hit = np.mean(np.abs(winners - expect) == 0)
    assert hit >= 0.95, f"band {expect} won only {hit:.0%} of frames"


def test_mel_translation_covariance():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(88200).astype(np.float32) * 0.1
    hop = audio.HOP
    a = audio.mel_spectrogram(audio.Waveform(x, 22050)).values
    shifted = np.concatenate([x[hop:], x[:hop]])
    b = audio.mel_spectrogram(audio.Waveform(shifted, 22050)).values
    # interior columns of the shifted analysis line up one column earlier
    assert np.allclose(a[:, 11:-11], b[:, 10:-12], atol=1e-4)


def test_mel_energy_ordering():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(88200).astype(np.float32) * 0.05
    quiet = audio.mel_spectrogram(audio.Waveform(x, 22050)).values.mean()
    loud = audio.mel_spectrogram(audio.Waveform(4.0 * x, 22050)).values.mean()
    assert loud > quiet


def test_griffin_lim_roundtrip_tone():
    w = tone(440.0)
    m = audio.mel_spectrogram(w)
    rec = audio.griffin_lim(m, iters=60, seed=0)
    m2 = audio.mel_spectrogram(rec)
    r = np.corrcoef(m.values.ravel(), m2.values.ravel())[0, 1]
    assert r >= 0.95, f"round-trip Mel correlation {r:.3f}"


def test_griffin_lim_zero_spectrogram_silent():
    m = audio.MelSpec(np.full((80, 336), np.log(1e-5), dtype=np.float32))
    rec = audio.griffin_lim(m, iters=5, seed=0)
    assert audio.rms(rec.samples) < 1e-3
    assert len(rec.samples) == 88200


def test_griffin_lim_more_iters_never_worse():
    w = tone(880.0)
    m = audio.mel_spectrogram(w)

    def err(iters):
        rec = audio.griffin_lim(m, iters=iters, seed=1)
        m2 = audio.mel_spectrogram(rec)
        return float(np.mean((m.values - m2.values) ** 2))

    assert err(60) <= err(5) + 1e-6


def test_griffin_lim_deterministic():
    m = audio.mel_spectrogram(tone(660.0))
    a = audio.griffin_lim(m, iters=10, seed=7)
    b = audio.griffin_lim(m, iters=10, seed=7)
    assert np.array_equal(a.samples, b.samples)


def test_wav_roundtrip(tmp_path):
    w = tone(523.0, seconds=1.0)
    p32 = tmp_path / "f32.wav"
    audio.save_wav(p32, w, fmt="f32")
    back = audio.load_wav(p32)
    assert back.sample_rate == 22050
    assert np.allclose(back.samples, w.samples, atol=1e-7)

    p16 = tmp_path / "p16.wav"
    audio.save_wav(p16, w, fmt="pcm16")
    back16 = audio.load_wav(p16)
    assert np.allclose(back16.samples, w.samples, atol=1e-3)


def test_wav_stereo_downmix(tmp_path):
    from scipy.io import wavfile
    sr = 22050
    left = np.ones(100, dtype=np.float32) * 0.5
    right = np.zeros(100, dtype=np.float32)
    wavfile.write(str(tmp_path / "st.wav"), sr, np.stack([left, right], axis=1))
    w = audio.load_wav(tmp_path / "st.wav")
    assert np.allclose(w.samples, 0.25)


def test_pgm_output(tmp_path):
    m = audio.mel_spectrogram(tone(440.0))
    path = tmp_path / "m.pgm"
    audio.save_pgm(path, m)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n336 80\n255\n")
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=len(b"P5\n336 80\n255\n")).reshape(80, 336)
    # row 0 is the highest Mel band: for a 440 Hz tone the bright rows sit low
    assert pixels[-10:].mean() > pixels[:10].mean()


def test_roundtrip_identification_50_clips():
    """Griffin-Lim resyntheses identify their own sources perfectly via Mel correlation."""
    rng = np.random.default_rng(5)
    mels = []
    recs = []
    for i in range(50):
        freq = 150.0 * (1.07 ** i)
        t = np.arange(88200) / 22050.0
        sig = np.sin(2 * np.pi * freq * t) + 0.5 * np.sin(2 * np.pi * 2.3 * freq * t)
        sig += 0.05 * rng.standard_normal(88200)
        w = audio.Waveform((0.2 * sig / np.max(np.abs(sig))).astype(np.float32), 22050)
        m = audio.mel_spectrogram(w)
        mels.append(m.values.ravel())
        rec = audio.griffin_lim(m, iters=20, seed=i)
        recs.append(audio.mel_spectrogram(rec).values.ravel())
    mels = np.stack(mels)
    recs = np.stack(recs)
    mz = (mels - mels.mean(1, keepdims=True)) / mels.std(1, keepdims=True)
    rz = (recs - recs.mean(1, keepdims=True)) / recs.std(1, keepdims=True)
    corr = rz @ mz.T / mels.shape[1]
    wins = 0
    total = 0
    for i in range(50):
        for j in range(50):
            if i == j:
                continue
            total += 1
            wins += corr[i, i] > corr[i, j]
    assert wins == total
