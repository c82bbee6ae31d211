"""Convolutional encoder/decoder around a vector-quantization bottleneck.

The encoder downsamples the (80, 336) log-Mel grid by 16x on both axes
into a (5, 21) field of D-dimensional latents; each latent snaps to its
nearest codebook row, giving a 5x21 grid of token indices. The decoder
mirrors the encoder, doubling resolution with nearest-neighbor upsampling
before each conv. Training uses the plain VQ objective: reconstruction
MSE plus codebook and commitment terms (beta = 0.25), with straight-through
gradients across the quantizer and dead codes re-seeded each epoch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import audio, autodiff as ad, serialize
from .errors import ContractError

log = logging.getLogger(__name__)

GRID_S, GRID_T = 5, 21
DEFAULT_K = 256
DEFAULT_D = 32
BETA = 0.25
_ENC_WIDTHS = (16, 32, 64, 64)


@dataclass
class CodeGrid:
    indices: np.ndarray  # (5, 21) integer grid

    def __post_init__(self):
        self.indices = np.asarray(self.indices)
        if self.indices.shape != (GRID_S, GRID_T):
            raise ContractError(f"CodeGrid must be ({GRID_S}, {GRID_T}), got {self.indices.shape}")
        self.indices = self.indices.astype(np.int32)

    def tokens_time_major(self) -> np.ndarray:
        """Raster order: for each temporal column, the spectral entries."""
        return self.indices.T.reshape(-1)

    @staticmethod
    def from_tokens(tokens: np.ndarray) -> "CodeGrid":
        return CodeGrid(np.asarray(tokens).reshape(GRID_T, GRID_S).T)


@dataclass
class VQModel:
    k: int
    d: int
    params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def codebook(self) -> np.ndarray:
        return self.params["codebook"]


def _init_params(rng, k: int, d: int) -> dict:
    params = {}
    c_in = 1
    for i, c_out in enumerate(_ENC_WIDTHS):
        params[f"enc{i}_w"] = ad.he_init(rng, (c_out, c_in, 3, 3), c_in * 9)
        params[f"enc{i}_b"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    params["enc_out_w"] = ad.he_init(rng, (d, c_in, 3, 3), c_in * 9)
    params["enc_out_b"] = np.zeros(d, dtype=np.float32)
    dec_widths = _ENC_WIDTHS[::-1]
    c_in = d
    for i, c_out in enumerate(dec_widths):
        params[f"dec{i}_w"] = ad.he_init(rng, (c_out, c_in, 3, 3), c_in * 9)
        params[f"dec{i}_b"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    params["dec_out_w"] = ad.he_init(rng, (1, c_in, 3, 3), c_in * 9)
    params["dec_out_b"] = np.zeros(1, dtype=np.float32)
    return params


def _encode_graph(p: dict, x: ad.Tensor) -> ad.Tensor:
    h = x
    for i in range(len(_ENC_WIDTHS)):
        h = ad.maxpool2d(ad.relu(ad.conv2d(h, p[f"enc{i}_w"], p[f"enc{i}_b"])))
    return ad.conv2d(h, p["enc_out_w"], p["enc_out_b"])  # (N, D, 5, 21)


def _decode_graph(p: dict, z: ad.Tensor) -> ad.Tensor:
    h = z
    for i in range(len(_ENC_WIDTHS)):
        h = ad.relu(ad.conv2d(ad.upsample2x(h), p[f"dec{i}_w"], p[f"dec{i}_b"]))
    return ad.conv2d(h, p["dec_out_w"], p["dec_out_b"])  # (N, 1, 80, 336)


def _tensor_params(model_params: dict) -> dict:
    return {k: ad.Tensor(v, requires_grad=True) for k, v in model_params.items()
            if k.endswith(("_w", "_b")) or k == "codebook"}


def _nearest_indices(flat_latents: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Argmin Euclidean distance; exact ties resolve to the lowest index."""
    d2 = (np.sum(flat_latents ** 2, axis=1, keepdims=True)
          - 2.0 * flat_latents @ codebook.T
          + np.sum(codebook ** 2, axis=1)[None, :])
    return np.argmin(d2, axis=1)


def train_vq(mels: np.ndarray, epochs: int, seed: int, k: int = DEFAULT_K,
             d: int = DEFAULT_D, lr: float = 2e-3, batch_size: int = 24) -> tuple:
    """Train on (N, 80, 336) log-Mel arrays; returns (VQModel, history)."""
    mels = np.asarray(mels, dtype=np.float32)
    if mels.ndim != 3 or mels.shape[1:] != (80, 336):
        raise ContractError(f"train_vq expects (N, 80, 336) Mels, got {mels.shape}")
    if len(mels) == 0:
        raise ContractError("train_vq: empty corpus")
    if len(mels) < 2 * k:
        log.warning("VQ corpus has %d items; at least %d recommended for K=%d",
                    len(mels), 2 * k, k)
    mu, sd = float(mels.mean()), float(mels.std())
    x_all = ((mels - mu) / sd)[:, None, :, :]

    rng = np.random.default_rng(seed)
    params = _init_params(rng, k, d)
    # seed the codebook from actual encoder outputs so assignments start live
    warm = _encode_graph({kk: ad.Tensor(v) for kk, v in params.items()},
                         ad.Tensor(x_all[:min(len(x_all), 64)])).data
    warm = warm.transpose(0, 2, 3, 1).reshape(-1, d)
    pick = rng.choice(len(warm), size=k, replace=len(warm) < k)
    params["codebook"] = (warm[pick] + 0.01 * rng.standard_normal((k, d))).astype(np.float32)

    tparams = _tensor_params(params)
    opt = ad.Adam(tparams, lr=lr)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(x_all))
        used = np.zeros(k, dtype=bool)
        total = 0.0
        latent_pool = None
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            xb = ad.Tensor(x_all[idx])
            opt.zero_grad()
            z = _encode_graph(tparams, xb)
            zmoved = ad.transpose(z, (0, 2, 3, 1))
            flat = ad.reshape(zmoved, (-1, d))
            codes = _nearest_indices(flat.data, tparams["codebook"].data)
            used[np.unique(codes)] = True
            latent_pool = flat.data
            zq_rows = ad.embed(tparams["codebook"], codes)
            # straight-through: decoder sees quantized values, encoder gets
            # the identity gradient
            ste = ad.add(flat, ad.Tensor(zq_rows.data - flat.data))
            zq = ad.transpose(ad.reshape(ste, (len(idx), GRID_S, GRID_T, d)), (0, 3, 1, 2))
            recon = _decode_graph(tparams, zq)
            rec_loss = ad.mse(recon, xb)
            cb_loss = ad.mse(zq_rows, flat.detach())
            commit = ad.mse(flat, ad.Tensor(zq_rows.data))
            loss = ad.add(rec_loss, ad.add(cb_loss, ad.scale(commit, BETA)))
            loss.backward()
            opt.step()
            total += float(rec_loss.data) * len(idx)
        losses.append(total / len(order))
        dead = np.flatnonzero(~used)
        if len(dead) and latent_pool is not None:
            repl = rng.choice(len(latent_pool), size=len(dead), replace=True)
            tparams["codebook"].data[dead] = (
                latent_pool[repl] + 0.01 * rng.standard_normal((len(dead), d))).astype(np.float32)

    for kk, t in tparams.items():
        params[kk] = t.data
    _dedupe_codebook(params["codebook"], rng)
    params["mel_mean"] = np.array([mu], dtype=np.float32)
    params["mel_std"] = np.array([sd], dtype=np.float32)
    model = VQModel(k, d, params, seed)
    history = {"recon_loss": losses, "recon_mse": losses[-1] if losses else None}
    return model, history


def _dedupe_codebook(codebook: np.ndarray, rng) -> None:
    """Perturb exact duplicate rows so min pairwise distance stays positive."""
    seen = {}
    for i, row in enumerate(codebook):
        key = row.tobytes()
        if key in seen:
            codebook[i] = row + (0.01 * rng.standard_normal(row.shape)).astype(np.float32)
        else:
            seen[key] = i


def encode_latents(model: VQModel, mels: np.ndarray) -> np.ndarray:
    """Continuous pre-quantization latents, (N, 5, 21, D)."""
    mu, sd = float(model.params["mel_mean"][0]), float(model.params["mel_std"][0])
    x = ((np.asarray(mels, dtype=np.float32) - mu) / sd)[:, None, :, :]
    p = {kk: ad.Tensor(v) for kk, v in model.params.items()}
    z = _encode_graph(p, ad.Tensor(x)).data
    return np.ascontiguousarray(z.transpose(0, 2, 3, 1))


def encode_indices(model: VQModel, m: audio.MelSpec) -> CodeGrid:
    """Quantize one Mel into its 5x21 grid of codebook indices."""
    z = encode_latents(model, m.values[None])[0]
    codes = _nearest_indices(z.reshape(-1, model.d), model.codebook)
    return CodeGrid(codes.reshape(GRID_S, GRID_T))


def quantize_nearest(codebook: np.ndarray, latents: np.ndarray) -> CodeGrid:
    """Snap (5, 21, D) continuous latents to nearest code rows."""
    latents = np.asarray(latents, dtype=np.float32)
    if latents.shape != (GRID_S, GRID_T, codebook.shape[1]):
        raise ContractError(f"quantize_nearest expects ({GRID_S}, {GRID_T}, D) latents, "
                            f"got {latents.shape}")
    codes = _nearest_indices(latents.reshape(-1, codebook.shape[1]), codebook)
    return CodeGrid(codes.reshape(GRID_S, GRID_T))


def decode_mel(model: VQModel, grid: CodeGrid) -> audio.MelSpec:
    return audio.MelSpec(decode_mels(model, grid.indices[None])[0])


def decode_mels(model: VQModel, grids: np.ndarray) -> np.ndarray:
    """Batched decode of (N, 5, 21) index grids to (N, 80, 336) Mels."""
    grids = np.asarray(grids)
    if grids.max() >= model.k or grids.min() < 0:
        raise ContractError(f"code index out of range [0, {model.k})")
    z = model.codebook[grids.astype(np.int64)]           # (N, 5, 21, D)
    z = np.ascontiguousarray(z.transpose(0, 3, 1, 2))    # (N, D, 5, 21)
    p = {kk: ad.Tensor(v) for kk, v in model.params.items()}
    recon = _decode_graph(p, ad.Tensor(z)).data[:, 0]
    mu, sd = float(model.params["mel_mean"][0]), float(model.params["mel_std"][0])
    return (recon * sd + mu).astype(np.float32)


def save_vq(path, model: VQModel) -> None:
    entries = dict(model.params)
    entries["k"] = np.array([model.k], dtype=np.float32)
    entries["d"] = np.array([model.d], dtype=np.float32)
    entries["seed"] = np.array([model.seed], dtype=np.float32)
    serialize.save_checkpoint(path, entries)


def load_vq(path) -> VQModel:
    entries = serialize.load_checkpoint(path)
    k = int(entries.pop("k")[0])
    d = int(entries.pop("d")[0])
    seed = int(entries.pop("seed")[0])
    return VQModel(k, d, entries, seed)


def save_grid(path, grid: CodeGrid) -> None:
    serialize.save_tensor(path, grid.indices.astype(np.float32))


def load_grid(path) -> CodeGrid:
    return CodeGrid(serialize.load_tensor(path).astype(np.int32))
