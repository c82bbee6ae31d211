"""Waveform handling and the log-Mel spectrogram pivot.

Analysis parameters are fixed package-wide: 22050 Hz audio, STFT with
1024-point Hann window and 256-sample hop (centered, reflect padding),
80 triangular Mel bands spanning 125-7600 Hz with area normalization,
and a 1e-5 floor before the log. A 4-s clip analyzes to 345 frames and
is center-cropped to 336 so the grid divides cleanly by 16 downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ContractError, DegenerateSignalError, ShapeError

SAMPLE_RATE = 22050
CLIP_SECONDS = 8.0
WINDOW_SECONDS = 4.0
N_FFT = 1024
HOP = 256
N_MELS = 80
FMIN = 125.0
FMAX = 7600.0
LOG_FLOOR = 1e-5
MEL_FRAMES = 336
DEFAULT_RMS = 0.1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Windowed-sinc (polyphase Kaiser FIR) resampling."""
    if w.sample_rate == target_rate:
        return Waveform(w.samples.copy(), target_rate)
    g = math.gcd(int(w.sample_rate), int(target_rate))
    y = resample_poly(w.samples.astype(np.float64), target_rate // g, w.sample_rate // g,
                      window=("kaiser", 5.0))
    return Waveform(y.astype(np.float32), target_rate)


def center_fix_length(x: np.ndarray, n: int) -> np.ndarray:
    """Center-crop, or zero-pad symmetrically, to exactly n samples."""
    cur = len(x)
    if cur == n:
        return x
    if cur > n:
        start = (cur - n) // 2
        return x[start:start + n]
    lpad = (n - cur) // 2
    return np.pad(x, (lpad, n - cur - lpad))


def normalize_energy(x: np.ndarray, target_rms: float = DEFAULT_RMS) -> np.ndarray:
    r = rms(x)
    if r == 0.0:
        raise DegenerateSignalError("cannot energy-normalize an all-zero signal")
    return (x * (target_rms / r)).astype(np.float32)


def prepare_stimulus(raw: Waveform, target_len_s: float = CLIP_SECONDS,
                     target_rate: int = SAMPLE_RATE,
                     target_rms: float = DEFAULT_RMS) -> Waveform:
    """Resample, center-crop (zero-pad if short), and RMS-normalize a clip."""
    if len(raw.samples) == 0:
        raise ContractError("empty input waveform")
    w = resample(raw, target_rate)
    n = int(round(target_len_s * target_rate))
    x = center_fix_length(w.samples, n)
    return Waveform(normalize_energy(x, target_rms), target_rate)


# ---- Mel analysis ------------------------------------------------------------

def hann_window(n: int) -> np.ndarray:
    # periodic Hann, the FFT-analysis convention
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float64)


def _hz_to_mel(f):
    """Mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mel = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    above = f >= min_log_hz
    mel = np.where(above, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mel)
    return mel


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    hz = f_sp * m
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    above = m >= min_log_mel
    return np.where(above, min_log_hz * np.exp(logstep * (m - min_log_mel)), hz)


def mel_band_centers(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Center frequencies (Hz) of the triangular bands."""
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    return _mel_to_hz(mels)[1:-1]


def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Area-normalized triangular filterbank, (n_mels, 1 + n_fft // 2)."""
    fftfreqs = np.linspace(0.0, sr / 2.0, 1 + n_fft // 2)
    mel_f = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fftfreqs[None, :]
    weights = np.zeros((n_mels, len(fftfreqs)), dtype=np.float64)
    for i in range(n_mels):
        lower = -ramps[i] / fdiff[i]
        upper = ramps[i + 2] / fdiff[i + 1]
        weights[i] = np.maximum(0.0, np.minimum(lower, upper))
    enorm = 2.0 / (mel_f[2:n_mels + 2] - mel_f[:n_mels])
    weights *= enorm[:, None]
    return weights.astype(np.float32)


def stft(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centered STFT with reflect padding; returns (1 + n_fft//2, frames) complex."""
    x = np.asarray(x, dtype=np.float64)
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (len(xp) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * hann_window(n_fft)[None, :]
    return np.fft.rfft(frames, axis=1).T


def istft(spec: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Inverse of :func:`stft` via windowed overlap-add."""
    n_frames = spec.shape[1]
    win = hann_window(n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win[None, :]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win * win
    for t in range(n_frames):
        out[t * hop:t * hop + n_fft] += frames[t]
        norm[t * hop:t * hop + n_fft] += win_sq
    out = out / np.maximum(norm, 1e-10)
    pad = n_fft // 2
    return out[pad:total - pad]


@dataclass
class MelSpec:
    """Log-Mel magnitude grid, (80, T)."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise ShapeError(f"MelSpec expects ({N_MELS}, T), got {self.values.shape}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


_MEL_FB: np.ndarray | None = None


def _fb() -> np.ndarray:
    global _MEL_FB
    if _MEL_FB is None:
        _MEL_FB = mel_filterbank()
    return _MEL_FB


def mel_spectrogram(w: Waveform) -> MelSpec:
    """Log-Mel analysis; a 4-s clip comes out center-cropped to (80, 336)."""
    if w.sample_rate != SAMPLE_RATE:
        raise ContractError(f"mel_spectrogram expects {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    mag = np.abs(stft(w.samples))
    mel = _fb() @ mag
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    if logmel.shape[1] == MEL_FRAMES + 9:  # 4-s clip: 345 -> 336 center crop
        start = (logmel.shape[1] - MEL_FRAMES) // 2
        logmel = logmel[:, start:start + MEL_FRAMES]
    return MelSpec(logmel.astype(np.float32))


def _mel_to_linear(linmel: np.ndarray, iters: int = 200) -> np.ndarray:
    """Per-column non-negative least squares through the filterbank.

    Solved jointly for all columns by projected gradient with a Lipschitz
    step (the objective is separable per column, so this is exactly
    column-wise NNLS run in parallel).
    """
    fb = _fb().astype(np.float64)
    gram = fb.T @ fb
    lip = float(np.linalg.eigvalsh(gram)[-1])
    x = np.clip(np.linalg.pinv(fb) @ linmel, 0.0, None)
    step = 1.0 / lip
    ftb = fb.T @ linmel
    for _ in range(iters):
        grad = gram @ x - ftb
        x = np.clip(x - step * grad, 0.0, None)
    return x


def griffin_lim(m: MelSpec, iters: int = 60, seed: int = 0) -> Waveform:
    """Phase-retrieval synthesis of a 4-s waveform from a log-Mel grid."""
    if iters < 1:
        raise ContractError(f"griffin_lim needs iters >= 1, got {iters}")
    linmel = np.exp(m.values.astype(np.float64))
    linmel[m.values <= np.log(LOG_FLOOR) + 1e-6] = 0.0
    mag = _mel_to_linear(linmel)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    spec = mag * phase
    for _ in range(iters):
        x = istft(spec)
        rebuilt = stft(x)
        phase = rebuilt / np.maximum(np.abs(rebuilt), 1e-10)
        spec = mag * phase
    y = istft(spec)
    n = int(WINDOW_SECONDS * SAMPLE_RATE)
    y = center_fix_length(y, n)
    peak = np.max(np.abs(y))
    if peak > 1.0:
        y = y / peak
    return Waveform(y.astype(np.float32), SAMPLE_RATE)


# ---- file formats --------------------------------------------------------------

def load_wav(path) -> Waveform:
    """Read PCM-16 or IEEE float WAV; stereo is downmixed by averaging."""
    sr, data = wavfile.read(str(path))
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    else:
        data = data.astype(np.float32)
    return Waveform(data, int(sr))


def save_wav(path, w: Waveform, fmt: str = "f32") -> None:
    if fmt == "f32":
        wavfile.write(str(path), w.sample_rate, w.samples.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(w.samples, -1.0, 1.0)
        wavfile.write(str(path), w.sample_rate, (clipped * 32767).astype(np.int16))
    else:
        raise ContractError(f"unknown wav format '{fmt}'")


def save_pgm(path, m: MelSpec) -> None:
    """Binary PGM (P5); row 0 is the highest Mel band, linear gray over [min, max]."""
    v = m.values.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.flipud((scaled * 255.0).round().astype(np.uint8))
    h, wd = img.shape
    header = f"P5\n{wd} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
