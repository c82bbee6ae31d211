"""Stimulus management: synthetic labeled sound families, WAV ingestion,
train/test splits, sliding windows, attention pairs, and category ablation.

Four parametric families stand in for curated natural recordings:

* speech-like: harmonic complexes with a wandering pitch contour, two
  formant-style band emphases, and a syllable-rate amplitude envelope;
* animal-like: trains of frequency-swept chirps with jittered repetition;
* music-like: sustained harmonic chords re-struck on a rhythmic grid;
* environment-like: band-shaped noise under slow amplitude modulation.

Every item draws its own parameters from a seeded generator, so items are
spectrally distinct from one another while staying statistically stable
across the 8-s clip. Train items may blend one to three families; test
items are always single-family.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio
from .audio import Waveform
from .errors import ContractError

CATEGORIES = ("speech", "animal", "music", "environment")
CLIP_SAMPLES = int(audio.CLIP_SECONDS * audio.SAMPLE_RATE)
WINDOW_SAMPLES = int(audio.WINDOW_SECONDS * audio.SAMPLE_RATE)
WINDOW_OFFSETS_S = (0.0, 2.0, 4.0)


@dataclass
class Stimulus:
    id: str
    waveform: Waveform
    category: str
    components: tuple
    split: str
    params: dict = field(default_factory=dict)


@dataclass
class AttentionTrial:
    """One attend-to-one-of-two presentation of a superimposed pair."""
    pair_id: str
    a: Stimulus
    b: Stimulus
    attended: str  # stimulus id, either a.id or b.id
    mixed: Waveform

    @property
    def unattended(self) -> str:
        return self.b.id if self.attended == self.a.id else self.a.id


@dataclass
class Corpus:
    train: list
    test: list
    seed: int

    def by_id(self, sid: str) -> Stimulus:
        for s in self.train + self.test:
            if s.id == sid:
                return s
        raise ContractError(f"unknown stimulus id '{sid}'")


# ---- synthesis helpers ---------------------------------------------------------

def _smooth_curve(rng, n: int, knots: int, lo: float, hi: float) -> np.ndarray:
    """Piecewise-linear random curve through `knots` points in [lo, hi]."""
    pts = rng.uniform(lo, hi, size=knots)
    xs = np.linspace(0, n - 1, knots)
    return np.interp(np.arange(n), xs, pts)


def _harmonic_stack(f0_curve: np.ndarray, amps: np.ndarray, sr: int) -> np.ndarray:
    """Additive synthesis of harmonics riding a time-varying fundamental."""
    phase = 2.0 * np.pi * np.cumsum(f0_curve) / sr
    out = np.zeros(len(f0_curve))
    for h, a in enumerate(amps, start=1):
        if a > 0:
            out += a * np.sin(h * phase)
    return out


def _synth_speech(rng, n: int, sr: int, params: dict) -> np.ndarray:
    f0 = params["f0"]
    contour = f0 * np.exp2(0.05 * _smooth_curve(rng, n, 24, -1.0, 1.0))
    n_harm = max(4, int(4200.0 / f0))
    amps = 1.0 / np.arange(1, n_harm + 1)
    for fc, gain, bw in ((params["formant1"], 5.0, 160.0), (params["formant2"], 3.0, 240.0)):
        hf = np.arange(1, n_harm + 1) * f0
        amps = amps * (1.0 + gain * np.exp(-0.5 * ((hf - fc) / bw) ** 2))
    sig = _harmonic_stack(contour, amps, sr)
    # syllables recur on a grid that divides the 2-s window step, so any
    # two windows of the same clip share their rhythmic phase
    period = int(sr / params["syllable_rate"])
    t = np.arange(n)
    cyc = (t % period) / period
    syllable = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.clip(cyc / 0.8, 0.0, 1.0))
    depth = np.repeat(rng.uniform(0.75, 1.0, size=n // period + 1), period)[:n]
    envelope = 0.35 + 0.65 * syllable * depth
    return sig * envelope


def _synth_animal(rng, n: int, sr: int, params: dict) -> np.ndarray:
    # dense quasi-periodic call train with a per-item sweep signature,
    # anchored by a faint continuous hum so windows share a spectrum
    out = np.zeros(n)
    base = params["carrier"]
    direction = params["sweep_dir"]
    interval = params["call_interval"]
    dur = min(params["call_dur"], 0.9 * interval)
    k = int(dur * sr)
    n_calls = int(n / sr / interval)
    for c in range(n_calls):
        start = int((c * interval + rng.uniform(-0.01, 0.01)) * sr)
        if start < 0 or start + k > n:
            continue
        tt = np.arange(k) / sr
        sweep = base * (params["sweep_ratio"] ** (direction * tt / dur))
        phase = 2.0 * np.pi * np.cumsum(sweep) / sr
        env = np.hanning(k)
        rough = 1.0 + 0.4 * np.sin(2.0 * np.pi * params["roughness"] * tt)
        out[start:start + k] += np.sin(phase) * env * rough * rng.uniform(0.85, 1.0)
    hum_t = np.arange(n) / sr
    out += 0.15 * np.sin(2.0 * np.pi * 0.5 * base * hum_t)
    return out


def _synth_music(rng, n: int, sr: int, params: dict) -> np.ndarray:
    root = params["root"]
    ratios = [1.0, params["third"], 1.5, 2.0]
    t = np.arange(n) / sr
    pad = np.zeros(n)
    for r in ratios:
        for h in range(1, 6):
            pad += (1.0 / h ** 2) * np.sin(2.0 * np.pi * root * r * h * t + rng.uniform(0, 2 * np.pi))
    beat = params["tempo"]
    onsets = np.zeros(n)
    step = int(round(sr / beat))
    riff_len = int(round(2.0 * beat))  # the riff repeats every 2 s exactly
    pattern = rng.random(riff_len) < 0.75
    if not pattern.any():
        pattern[0] = True
    for i, start in enumerate(range(0, n - step, step)):
        if pattern[i % riff_len]:
            k = min(step, n - start)
            onsets[start:start + k] += np.exp(-np.arange(k) / (0.08 * sr)) * rng.uniform(0.8, 1.0)
    return pad * (0.35 + 0.65 * onsets)


def _synth_environment(rng, n: int, sr: int, params: dict) -> np.ndarray:
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    logf = np.log(np.maximum(freqs, 1.0))
    shape = np.exp(-0.5 * ((logf - np.log(params["band_center"])) / params["band_width"]) ** 2)
    shape += 0.4 * np.exp(-0.5 * ((logf - np.log(params["band_center"] * 3.1))
                                  / params["band_width"]) ** 2)
    sig = np.fft.irfft(spec * shape, n=n)
    am = 1.0 + params["am_depth"] * np.sin(2.0 * np.pi * params["am_rate"] * np.arange(n) / sr
                                           + rng.uniform(0, 2 * np.pi))
    return sig * am


_SYNTHS = {
    "speech": _synth_speech,
    "animal": _synth_animal,
    "music": _synth_music,
    "environment": _synth_environment,
}


def _stratified(u: float, lo: float, hi: float, log: bool = False) -> float:
    """Map an identity coordinate u in [0, 1) onto the parameter range."""
    if log:
        return float(np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo))))
    return float(lo + u * (hi - lo))


def _draw_params(rng, category: str, u: float) -> dict:
    """Per-item synthesis parameters; u pins the item's core spectral
    identity so same-category items spread across the range instead of
    colliding by chance."""
    if category == "speech":
        return {"f0": _stratified(u, 95.0, 280.0),
                "formant1": rng.uniform(320.0, 900.0),
                "formant2": rng.uniform(1100.0, 2600.0),
                # integer syllables per 2-s window step
                "syllable_rate": float(rng.choice([3.0, 3.5, 4.0, 4.5, 5.0]))}
    if category == "animal":
        return {"carrier": _stratified(u, 700.0, 3200.0, log=True),
                "sweep_ratio": rng.uniform(1.2, 2.2),
                "sweep_dir": float(rng.choice([-1.0, 1.0])),
                "call_dur": rng.uniform(0.1, 0.2),
                "call_interval": 2.0 / float(rng.integers(7, 11)),
                "roughness": rng.uniform(25.0, 70.0)}
    if category == "music":
        return {"root": _stratified(u, 130.0, 520.0, log=True),
                "third": rng.choice([1.2, 1.25]),
                "tempo": float(rng.choice([1.5, 2.0, 2.5, 3.0]))}
    if category == "environment":
        return {"band_center": _stratified(u, 220.0, 5500.0, log=True),
                "band_width": rng.uniform(0.25, 0.6),
                "am_depth": rng.uniform(0.3, 0.7),
                "am_rate": float(rng.choice([0.5, 1.0, 1.5]))}
    raise ContractError(f"unknown category '{category}'")


def synthesize(category: str, seed_seq: np.random.SeedSequence,
               u: float | None = None) -> tuple:
    """Render one 8-s component; returns (float64 signal, params)."""
    rng = np.random.default_rng(seed_seq)
    if u is None:
        u = float(rng.random())
    params = _draw_params(rng, category, u)
    sig = _SYNTHS[category](rng, CLIP_SAMPLES, audio.SAMPLE_RATE, params)
    return sig, params


def generate_synthetic_corpus(n_train: int, n_test: int, seed: int,
                              mixed_train: bool = True) -> Corpus:
    """Seeded labeled corpus; test items are single-category and balanced."""
    if n_test % 4 != 0:
        raise ContractError(f"n_test must be divisible by 4, got {n_test}")
    root = np.random.SeedSequence(seed)
    train = []
    for i in range(n_train):
        ss = np.random.SeedSequence(seed, spawn_key=(0, i))
        rng = np.random.default_rng(ss)
        primary = CATEGORIES[i % 4]
        comps = [primary]
        if mixed_train:
            n_extra = int(rng.integers(0, 3))
            extras = [c for c in CATEGORIES if c != primary]
            comps += list(rng.choice(extras, size=n_extra, replace=False))
        sig = np.zeros(CLIP_SAMPLES)
        params = {}
        for j, cat in enumerate(comps):
            part, p = synthesize(cat, np.random.SeedSequence(seed, spawn_key=(0, i, j)))
            peak = np.max(np.abs(part))
            sig += part / peak if peak > 0 else part
            params[cat] = p
        w = audio.prepare_stimulus(Waveform(sig.astype(np.float32), audio.SAMPLE_RATE))
        train.append(Stimulus(f"train_{i:04d}", w, primary, tuple(comps), "train", params))
    test = []
    per_cat = n_test // 4
    for ci, cat in enumerate(CATEGORIES):
        for k in range(per_cat):
            idx = ci * per_cat + k
            u = (k + 0.5) / per_cat  # stratified identity within the category
            part, p = synthesize(cat, np.random.SeedSequence(seed, spawn_key=(1, idx)), u=u)
            w = audio.prepare_stimulus(Waveform(part.astype(np.float32), audio.SAMPLE_RATE))
            test.append(Stimulus(f"test_{idx:04d}", w, cat, (cat,), "test", {cat: p}))
    return Corpus(train=train, test=test, seed=seed)


# ---- windowing -------------------------------------------------------------------

def window_audio(w: Waveform, offset_s: float) -> Waveform:
    """4-s slice starting at offset (zero-padded outside the clip)."""
    start = int(round(offset_s * w.sample_rate))
    stop = start + WINDOW_SAMPLES
    n = len(w.samples)
    seg = np.zeros(WINDOW_SAMPLES, dtype=np.float32)
    lo, hi = max(start, 0), min(stop, n)
    if hi > lo:
        seg[lo - start:hi - start] = w.samples[lo:hi]
    return Waveform(seg, w.sample_rate)


def sliding_windows(s: Stimulus) -> list:
    """Three 4-s windows at 0/2/4-s offsets of an 8-s stimulus."""
    if len(s.waveform.samples) != CLIP_SAMPLES:
        raise ContractError(f"sliding_windows expects an 8-s stimulus, got "
                            f"{len(s.waveform.samples) / s.waveform.sample_rate:.2f} s")
    return [window_audio(s.waveform, off) for off in WINDOW_OFFSETS_S]


# ---- attention pairs ---------------------------------------------------------------

ATTENTION_EXCLUDED = ("environment",)


def _attention_groups(test_items: list) -> dict:
    """Four attend-groups: speech split by pitch register, plus animal and music."""
    speech = sorted((s for s in test_items if s.category == "speech"),
                    key=lambda s: s.params["speech"]["f0"])
    half = len(speech) // 2
    groups = {
        "speech-low": speech[:half],
        "speech-high": speech[half:],
        "animal": [s for s in test_items if s.category == "animal"],
        "music": [s for s in test_items if s.category == "music"],
    }
    return {k: v for k, v in groups.items() if v}


def make_attention_pairs(test_items: list, exemplars_per_cat: int = 2,
                         seed: int = 0) -> list:
    """All cross-group superimposed pairs; each pair yields two attend trials."""
    groups = _attention_groups(test_items)
    if len(groups) < 2:
        raise ContractError("need at least two usable attention categories")
    rng = np.random.default_rng(seed)
    chosen = {}
    for name, items in sorted(groups.items()):
        if len(items) < exemplars_per_cat:
            raise ContractError(f"attention group '{name}' has {len(items)} items, "
                                f"needs {exemplars_per_cat}")
        pick = rng.choice(len(items), size=exemplars_per_cat, replace=False)
        chosen[name] = [items[i] for i in sorted(pick)]
    trials = []
    names = sorted(chosen)
    for gi in range(len(names)):
        for gj in range(gi + 1, len(names)):
            for a in chosen[names[gi]]:
                for b in chosen[names[gj]]:
                    mix = audio.Waveform(
                        audio.normalize_energy(
                            a.waveform.samples.astype(np.float64)
                            + b.waveform.samples.astype(np.float64)),
                        audio.SAMPLE_RATE)
                    pair_id = f"{a.id}+{b.id}"
                    trials.append(AttentionTrial(pair_id, a, b, a.id, mix))
                    trials.append(AttentionTrial(pair_id, a, b, b.id, mix))
    return trials


# ---- ablation ------------------------------------------------------------------------

def ablate_category(train_set: list, category: str) -> tuple:
    """Drop train items containing the category; returns (filtered, n_removed)."""
    if category not in CATEGORIES:
        raise ContractError(f"unknown category '{category}'")
    kept = [s for s in train_set if category not in s.components]
    return kept, len(train_set) - len(kept)


# ---- persistence ------------------------------------------------------------------------

def save_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    items = []
    for s in corpus.train + corpus.test:
        rel = f"audio/{s.id}.wav"
        audio.save_wav(out / rel, s.waveform, fmt="f32")
        items.append({"id": s.id, "category": s.category,
                      "components": list(s.components), "split": s.split,
                      "file": rel,
                      "params": {k: {kk: float(vv) for kk, vv in v.items()}
                                 for k, v in s.params.items()}})
    manifest = {"seed": corpus.seed, "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"


def load_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    train, test = [], []
    for item in manifest["items"]:
        w = audio.load_wav(root / item["file"])
        s = Stimulus(item["id"], w, item["category"], tuple(item["components"]),
                     item["split"], item.get("params", {}))
        (train if s.split == "train" else test).append(s)
    return Corpus(train=train, test=test, seed=manifest["seed"])
