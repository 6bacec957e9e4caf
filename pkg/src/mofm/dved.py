"""Discrete variational encoder-decoder over thermal cubes.

The encoder maps a heatmap volume (J, F, H, W) to one categorical
distribution over a T-entry codebook per cube. The decoder looks up the
(relaxed) codes and reconstructs the condensed heatmap (F, H, W).
"""
from __future__ import annotations

import logging
import math

import numpy as np

from .config import DvedConfig, Profile
from .cubes import CubeGeometry
from .heatmap import condense
from .kernel import Tensor, functional as F, no_grad
from .kernel.nn import Conv2d, Conv3d, ConvTranspose2d, Linear, Module, ResBlock, parameter, trunc_normal
from .training import TrainState, make_state, run_epochs

log = logging.getLogger(__name__)


def _num_downsamples(patch: int) -> int:
    n = int(round(math.log2(patch)))
    if 2 ** n != patch or n < 1:
        raise ValueError(f"patch size {patch} must be a power of two >= 2")
    return n


class DVED(Module):
    """Encoder, MotionBook and decoder.

    Encoder: stride-(1, 2, 2) 3D convs, each followed by ``res_repeats`` 3D
    res-blocks, until the spatial grid equals the cube grid; frames are
    mean-pooled and a per-cell projection gives T logits. Decoder: code
    lookup, two 2D res-blocks, stride-2 transposed convs back to H x W, and
    a 1x1 conv to F channels (one per frame).
    """

    def __init__(self, joints: int, frames: int, geom: CubeGeometry, cfg: DvedConfig, rng: np.random.Generator):
        self.joints, self.frames, self.geom, self.cfg = joints, frames, geom, cfg
        h, d = cfg.hidden, cfg.code_dim
        n_down = _num_downsamples(geom.patch)
        self.enc_convs, self.enc_res = [], []
        c_in = joints
        for _ in range(n_down):
            self.enc_convs.append(Conv3d(c_in, h, 3, rng, stride=(1, 2, 2), padding=1))
            self.enc_res.extend(ResBlock(h, rng, nd=3) for _ in range(cfg.res_repeats))
            c_in = h
        self.enc_proj = Linear(h, cfg.vocab, rng)
        self.codebook = parameter(trunc_normal(rng, (cfg.vocab, d)))
        self.dec_res = [ResBlock(d, rng, nd=2) for _ in range(2)]
        self.dec_ups = []
        c_in = d
        for _ in range(n_down):
            self.dec_ups.append(ConvTranspose2d(c_in, h, 4, rng, stride=2, padding=1))
            c_in = h
        self.dec_out = Conv2d(h, frames, 1, rng)

    @property
    def vocab(self) -> int:
        return self.cfg.vocab

    def _check(self, u):
        want = (self.joints, self.frames, self.geom.height, self.geom.width)
        if tuple(u.shape[1:]) != want:
            raise ValueError(f"heatmap batch has shape {tuple(u.shape)}, expected (N, {', '.join(map(str, want))})")

    def encode(self, u) -> Tensor:
        """(N, J, F, H, W) -> logits (N, K, T), rows in row-major cube order."""
        u = u if isinstance(u, Tensor) else Tensor(u)
        if u.ndim == 4:
            u = u.reshape((1,) + u.shape)
        self._check(u)
        x = u
        r = self.cfg.res_repeats
        for i, conv in enumerate(self.enc_convs):
            x = F.relu(conv(x))
            for blk in self.enc_res[i * r:(i + 1) * r]:
                x = blk(x)
        x = x.mean(axis=2)  # pool frames: (N, h, R, C)
        n, h, r, c = x.shape
        x = x.transpose(0, 2, 3, 1).reshape(n, r * c, h)
        return self.enc_proj(x)

    def lookup(self, y) -> Tensor:
        """Soft or one-hot rows (N, K, T) -> code vectors (N, K, D)."""
        y = y if isinstance(y, Tensor) else Tensor(y)
        sums = y.data.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-3):
            raise ValueError("decoder input rows must sum to 1")
        return y @ self.codebook

    def decode_codes(self, e: Tensor) -> Tensor:
        n, k, d = e.shape
        x = e.reshape(n, self.geom.grid_rows, self.geom.grid_cols, d).transpose(0, 3, 1, 2)
        for blk in self.dec_res:
            x = blk(x)
        for up in self.dec_ups:
            x = F.relu(up(x))
        return self.dec_out(x)

    def decode(self, y) -> Tensor:
        """Simplex or one-hot rows (N, K, T) -> reconstruction (N, F, H, W)."""
        return self.decode_codes(self.lookup(y))

    def decode_ids(self, z: np.ndarray) -> Tensor:
        z = np.asarray(z)
        return self.decode_codes(self.codebook[z])


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, tau: float, rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
                   hard: bool = False):
    """Relaxed categorical sample along the last axis.

    Returns ``(y, z)``: ``y = softmax((log pi + g) / tau)`` carries the
    gradient, ``z = argmax(log pi + g)`` is the hard id. With ``hard`` the
    forward value of ``y`` is one-hot while its gradient stays the soft one.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax needs an rng or explicit noise")
        noise = gumbel_noise(rng, logits.shape)
    perturbed = logits + noise.astype(logits.dtype)
    y = F.softmax(perturbed * (1.0 / tau), axis=-1)
    z = np.argmax(perturbed.data, axis=-1)
    if hard:
        onehot = np.zeros_like(y.data)
        np.put_along_axis(onehot, z[..., None], 1.0, axis=-1)
        y = y + (onehot - y.data)
    return y, z


def tau_at(step: int, total_steps: int, cfg: DvedConfig) -> float:
    """Cosine anneal tau_start -> tau_end over the first fraction of steps, then hold."""
    span = max(int(cfg.tau_anneal_fraction * total_steps), 1)
    frac = min(step / span, 1.0)
    return cfg.tau_end + 0.5 * (cfg.tau_start - cfg.tau_end) * (1.0 + math.cos(math.pi * frac))


def dved_loss(model: DVED, u, u_r, tau: float, rng: np.random.Generator | None = None,
              noise: np.ndarray | None = None):
    """Smooth-L1 reconstruction + beta * mean per-cube KL to the uniform prior.

    Returns ``(total, recon, kl, logits, z)``.
    """
    logits = model.encode(u)
    y, z = gumbel_softmax(logits, tau, rng=rng, noise=noise, hard=model.cfg.straight_through)
    recon_hat = model.decode(y)
    recon = F.smooth_l1(recon_hat, Tensor(u_r, dtype=recon_hat.dtype), beta=model.cfg.smooth_l1_beta)
    kl = F.kl_to_uniform(logits).mean()
    return recon + kl * model.cfg.beta, recon, kl, logits, z


def loss_terms(recon_hat, u_r, logits, beta: float, smooth_l1_beta: float = 1.0):
    """Loss from precomputed reconstruction and logits (no sampling)."""
    recon = F.smooth_l1(recon_hat, u_r, beta=smooth_l1_beta)
    kl = F.kl_to_uniform(logits).mean()
    return recon + kl * beta


def tokenize(model: DVED, u, batch_size: int = 64) -> np.ndarray:
    """Noise-free token ids: argmax of the encoder logits, (N, K) int64."""
    u = np.asarray(u)
    single = u.ndim == 4
    if single:
        u = u[None]
    out = []
    with no_grad():
        for i in range(0, len(u), batch_size):
            out.append(np.argmax(model.encode(u[i:i + batch_size]).data, axis=-1))
    ids = np.concatenate(out) if out else np.zeros((0, model.geom.num_cubes), dtype=np.int64)
    return ids[0] if single else ids.astype(np.int64)


def codebook_stats(ids: np.ndarray, vocab: int) -> dict:
    counts = np.bincount(np.asarray(ids).ravel(), minlength=vocab).astype(np.float64)
    p = counts / max(counts.sum(), 1.0)
    nz = p[p > 0]
    return {"usage": float((counts > 0).sum()) / vocab, "perplexity": float(np.exp(-(nz * np.log(nz)).sum()))}


def build_dved(profile: Profile, seed: int) -> DVED:
    from .kernel import make_rng

    return DVED(profile.joints, profile.frames, profile.geometry, profile.dved, make_rng([seed, 101]))


def train_dved(heatmaps, profile: Profile, seed: int, model: DVED | None = None, epochs: float | None = None,
               on_epoch=None) -> tuple:
    """Fit the dVED on a (N, J, F, H, W) heatmap array.

    Returns ``(model, state)``; ``state.history`` holds per-epoch mean loss,
    reconstruction, KL, tau, codebook usage and perplexity.
    """
    heatmaps = np.asarray(heatmaps)
    if len(heatmaps) == 0:
        raise ValueError("cannot train the dVED on an empty dataset")
    cfg = profile.dved
    model = model or build_dved(profile, seed)
    model.train()
    epochs = cfg.epochs if epochs is None else epochs
    state = make_state(model.named_parameters(), _with_epochs(cfg, epochs), len(heatmaps))
    total = state.schedule.total_steps
    ids_seen: list = []

    def step(idx, rng, step_no):
        u = heatmaps[np.sort(idx)]
        tau = tau_at(step_no, total, cfg)
        loss, recon, kl, _, z = dved_loss(model, u, condense(u), tau, rng=rng)
        ids_seen.append(z)
        return loss, {"recon": float(recon.data), "kl": float(kl.data), "tau": tau}

    def epoch_end(st: TrainState):
        if ids_seen:
            st.history[-1].update(codebook_stats(np.concatenate([z.ravel() for z in ids_seen]), cfg.vocab))
        ids_seen.clear()
        if on_epoch is not None:
            on_epoch(st)

    run_epochs(state, len(heatmaps), cfg.batch_size, epochs, step, seed, on_epoch=epoch_end)
    model.eval()
    return model, state


def _with_epochs(cfg, epochs):
    import dataclasses

    return dataclasses.replace(cfg, epochs=epochs)


__all__ = ["DVED", "build_dved", "codebook_stats", "dved_loss", "gumbel_noise", "gumbel_softmax",
           "tau_at", "tokenize", "train_dved"]
