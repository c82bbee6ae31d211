"""Hierarchical sound-recognition CNN, its evaluation twin, layer-feature
extraction with temporal reshaping, and feature-matching pixel optimization.

The classifier runs five conv blocks over the (80, 336) log-Mel grid with
2x2 pooling after the first four, so the temporal axis steps through
336 / 168 / 84 / 42 / 21 and the spectral axis through 80 / 40 / 20 / 10 / 5.
Per-layer activations are reshaped to (spectral*channels, temporal) for use
as decoding targets and transformer conditioning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import audio, autodiff as ad, corpus as corpus_mod, serialize
from .errors import ContractError, OptimizationError

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (8, 16, 32, 64, 64)
TWIN_WIDTHS = (12, 24, 48, 96, 96)
FC_HIDDEN = (256, 128)
LAYER_IDS = ("conv1", "conv2", "conv3", "conv4", "conv5", "fc3")
CONV_LAYERS = LAYER_IDS[:5]
# second conv only in the deeper blocks, mirroring a VGG-style schedule
DOUBLE_CONV_BLOCKS = (False, False, True, True, True)


@dataclass
class SoundNet:
    """Five conv blocks plus three fully connected layers."""
    widths: tuple
    n_classes: int
    params: dict = field(default_factory=dict)
    seed: int = 0

    SPECTRAL_IN = 80
    TEMPORAL_IN = 336

    def layer_dims(self) -> dict:
        """(spectral*channels, temporal) per extractable layer."""
        dims = {}
        s, t = self.SPECTRAL_IN, self.TEMPORAL_IN
        for b, ch in enumerate(self.widths):
            dims[f"conv{b + 1}"] = (s * ch, t)
            if b < 4:
                s, t = s // 2, t // 2
        dims["fc3"] = (self.n_classes, 1)
        return dims


def init_soundnet(n_classes: int, seed: int, widths: tuple = DEFAULT_WIDTHS) -> SoundNet:
    rng = np.random.default_rng(seed)
    params = {}
    c_in = 1
    for b, c_out in enumerate(widths):
        params[f"conv{b + 1}a_w"] = ad.he_init(rng, (c_out, c_in, 3, 3), c_in * 9)
        params[f"conv{b + 1}a_b"] = np.zeros(c_out, dtype=np.float32)
        if DOUBLE_CONV_BLOCKS[b]:
            params[f"conv{b + 1}b_w"] = ad.he_init(rng, (c_out, c_out, 3, 3), c_out * 9)
            params[f"conv{b + 1}b_b"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    flat = widths[-1] * 5 * 21
    sizes = (flat,) + FC_HIDDEN + (n_classes,)
    for i in range(3):
        params[f"fc{i + 1}_w"] = ad.he_init(rng, (sizes[i], sizes[i + 1]), sizes[i])
        params[f"fc{i + 1}_b"] = np.zeros(sizes[i + 1], dtype=np.float32)
    return SoundNet(tuple(widths), n_classes, params, seed)


def _forward(net: SoundNet, x: ad.Tensor, train_params: dict | None = None,
             upto: str | None = None) -> dict:
    """Run the net, returning the activations keyed by layer id plus 'logits'.

    ``x`` is (N, 1, 80, 336). When ``upto`` is given, stops after that layer.
    """
    p = train_params if train_params is not None else {
        k: ad.Tensor(v) for k, v in net.params.items()}
    acts = {}
    h = x
    for b in range(5):
        h = ad.relu(ad.conv2d(h, p[f"conv{b + 1}a_w"], p[f"conv{b + 1}a_b"]))
        if DOUBLE_CONV_BLOCKS[b]:
            h = ad.relu(ad.conv2d(h, p[f"conv{b + 1}b_w"], p[f"conv{b + 1}b_b"]))
        acts[f"conv{b + 1}"] = h
        if upto == f"conv{b + 1}":
            return acts
        if b < 4:
            h = ad.maxpool2d(h)
    n = h.shape[0]
    h = ad.reshape(h, (n, h.shape[1] * h.shape[2] * h.shape[3]))
    h = ad.relu(ad.add(ad.matmul(h, p["fc1_w"]), p["fc1_b"]))
    h = ad.relu(ad.add(ad.matmul(h, p["fc2_w"]), p["fc2_b"]))
    logits = ad.add(ad.matmul(h, p["fc3_w"]), p["fc3_b"])
    acts["fc3"] = logits
    acts["logits"] = logits
    return acts


def train_soundnet(corpus: corpus_mod.Corpus, epochs: int, seed: int,
                   widths: tuple = DEFAULT_WIDTHS, lr: float = 1e-3,
                   batch_size: int = 24) -> tuple:
    """Cross-entropy training on per-window Mels; returns (net, history).

    Labels are the stimulus's primary category. History carries final
    train/validation accuracy and the loss trace.
    """
    cats = sorted({s.category for s in corpus.train})
    if len(cats) < 2:
        raise ContractError("training corpus must contain at least 2 classes")
    cat_idx = {c: i for i, c in enumerate(cats)}

    def windows_of(items):
        mels, labels = [], []
        for s in items:
            for w in corpus_mod.sliding_windows(s):
                mels.append(audio.mel_spectrogram(w).values)
                labels.append(cat_idx[s.category])
        return np.stack(mels)[:, None, :, :], np.array(labels)

    x_train, y_train = windows_of(corpus.train)
    mu, sd = float(x_train.mean()), float(x_train.std())
    x_train = (x_train - mu) / sd

    net = init_soundnet(len(cats), seed, widths)
    net.params["input_mean"] = np.array([mu], dtype=np.float32)
    net.params["input_std"] = np.array([sd], dtype=np.float32)
    net.params["class_count"] = np.array([len(cats)], dtype=np.float32)

    tparams = {k: ad.Tensor(v, requires_grad=True) for k, v in net.params.items()
               if k.endswith(("_w", "_b"))}
    opt = ad.Adam(tparams, lr=lr)
    rng = np.random.default_rng(seed + 1)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(x_train))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            out = _forward(net, ad.Tensor(x_train[idx]), tparams)
            loss = ad.cross_entropy(out["logits"], y_train[idx])
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        losses.append(total / len(order))
    for k, t in tparams.items():
        net.params[k] = t.data

    def accuracy(x, y):
        preds = []
        for start in range(0, len(x), 64):
            out = _forward(net, ad.Tensor(x[start:start + 64]))
            preds.append(out["logits"].data.argmax(axis=1))
        return float(np.mean(np.concatenate(preds) == y))

    history = {"loss": losses, "classes": cats,
               "train_accuracy": accuracy(x_train, y_train)}
    if corpus.test:
        x_test, y_test = windows_of(corpus.test)
        x_test = (x_test - mu) / sd
        history["test_accuracy"] = accuracy(x_test, y_test)
    return net, history


@dataclass
class LayerFeatures:
    layer: str
    matrix: np.ndarray  # (spectral*channels, temporal)


def extract_features(net: SoundNet, m: audio.MelSpec, layer: str) -> LayerFeatures:
    """Forward pass truncated at ``layer``; (C, S, T) maps to (S*C, T)."""
    out = extract_features_batch(net, m.values[None], layer)
    return LayerFeatures(layer, out[0])


def extract_features_batch(net: SoundNet, mels: np.ndarray, layer: str) -> np.ndarray:
    """Batched feature extraction for (N, 80, 336) inputs; (N, S*C, T)."""
    if layer not in LAYER_IDS:
        raise ContractError(f"unknown layer id '{layer}' (expected one of {LAYER_IDS})")
    mu = float(net.params.get("input_mean", [0.0])[0])
    sd = float(net.params.get("input_std", [1.0])[0])
    x = ad.Tensor((mels[:, None, :, :] - mu) / sd)
    acts = _forward(net, x, upto=layer if layer != "fc3" else None)
    if layer == "fc3":
        return acts["fc3"].data[:, :, None]
    a = acts[layer].data  # (N, C, S, T)
    n, c, s, t = a.shape
    return a.transpose(0, 2, 1, 3).reshape(n, s * c, t)


def features_all_layers(net: SoundNet, mels: np.ndarray) -> dict:
    """One forward pass capturing all six representative layers."""
    mu = float(net.params.get("input_mean", [0.0])[0])
    sd = float(net.params.get("input_std", [1.0])[0])
    acts = _forward(net, ad.Tensor((mels[:, None, :, :] - mu) / sd))
    out = {}
    for layer in CONV_LAYERS:
        a = acts[layer].data
        n, c, s, t = a.shape
        out[layer] = a.transpose(0, 2, 1, 3).reshape(n, s * c, t)
    out["fc3"] = acts["fc3"].data[:, :, None]
    return out


def pixel_optimize(net: SoundNet, targets: dict, iters: int, seed: int,
                   step: float = 2.0) -> tuple:
    """Gradient descent on Mel pixels matching features across all layers.

    ``targets`` maps each layer id to (N, units, T) arrays. The loss sums
    per-layer squared feature error normalized by the layer's unit count;
    steps use a backtracking line search so the returned trace never
    increases. Returns (mels (N, 80, 336), loss trace).
    """
    missing = [l for l in LAYER_IDS if l not in targets]
    if missing:
        raise ContractError(f"pixel_optimize requires targets for every layer; missing {missing}")
    n = targets["conv5"].shape[0]
    rng = np.random.default_rng(seed)
    mu = float(net.params.get("input_mean", [0.0])[0])
    sd = float(net.params.get("input_std", [1.0])[0])
    x = (rng.standard_normal((n, 1, 80, 336)) * 0.5).astype(np.float32)
    tgt = {l: ad.Tensor(np.ascontiguousarray(targets[l], dtype=np.float32)) for l in LAYER_IDS}
    # balance the layer terms: divide by unit count and by the target's
    # mean square, otherwise wide-scale layers monopolize the descent
    weight = {l: 1.0 / (targets[l][0].size *
                        max(float(np.mean(np.square(targets[l]))), 1e-6))
              for l in LAYER_IDS}

    def loss_and_grad(xv, want_grad=True):
        t = ad.Tensor(xv, requires_grad=want_grad)
        acts = _forward(net, t)
        total = None
        for layer in LAYER_IDS:
            if layer == "fc3":
                feats = ad.reshape(acts["fc3"], (n, net.n_classes, 1))
            else:
                a = acts[layer]
                _, c, s, tt = a.shape
                feats = ad.reshape(ad.transpose(a, (0, 2, 1, 3)), (n, s * c, tt))
            diff = ad.sub(feats, tgt[layer])
            term = ad.scale(ad.sum_all(ad.square(diff)), weight[layer])
            total = term if total is None else ad.add(total, term)
        if want_grad:
            total.backward()
            return float(total.data), t.grad
        return float(total.data), None

    trace = []
    cur_loss, grad = loss_and_grad(x)
    if not np.isfinite(cur_loss):
        raise OptimizationError("pixel optimization loss is non-finite at init")
    trace.append(cur_loss)
    step_size = step
    for _ in range(iters):
        accepted = False
        for _ in range(12):
            cand = x - step_size * grad
            cand_loss, _ = loss_and_grad(cand, want_grad=False)
            if np.isnan(cand_loss):
                raise OptimizationError("pixel optimization diverged (NaN loss)")
            if cand_loss <= cur_loss:
                x, cur_loss = cand, cand_loss
                _, grad = loss_and_grad(x)
                step_size *= 1.2
                accepted = True
                break
            step_size *= 0.5
        trace.append(cur_loss)
        if not accepted:
            break
    mels = x[:, 0] * sd + mu
    return mels.astype(np.float32), trace


def save_soundnet(path, net: SoundNet) -> None:
    entries = dict(net.params)
    entries["widths"] = np.array(net.widths, dtype=np.float32)
    entries["n_classes"] = np.array([net.n_classes], dtype=np.float32)
    entries["seed"] = np.array([net.seed], dtype=np.float32)
    serialize.save_checkpoint(path, entries)


def load_soundnet(path) -> SoundNet:
    entries = serialize.load_checkpoint(path)
    widths = tuple(int(v) for v in entries.pop("widths"))
    n_classes = int(entries.pop("n_classes")[0])
    seed = int(entries.pop("seed")[0])
    return SoundNet(widths, n_classes, entries, seed)
