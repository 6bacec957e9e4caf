"""Cube embedding plus transformer encoder, pretrained by masked token prediction."""
from __future__ import annotations

import dataclasses
import logging

import numpy as np

from .config import BackboneConfig, Profile
from .cubes import CubeGeometry, segment
from .kernel import Tensor, functional as F, make_rng, no_grad
from .kernel.nn import LayerNorm, Linear, Module, ResBlock, parameter, trunc_normal
from .masking import MaskParams, apply_mask, generate_mask
from .training import TrainState, make_state, run_epochs

log = logging.getLogger(__name__)

MASK_SALT = 13
EVAL_SALT = 14


class Block(Module):
    """Pre-norm transformer layer: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, hidden: int, heads: int, ffn: int, rng):
        self.heads = heads
        self.ln1 = LayerNorm(hidden)
        self.qkv = Linear(hidden, 3 * hidden, rng)
        self.proj = Linear(hidden, hidden, rng)
        self.ln2 = LayerNorm(hidden)
        self.fc1 = Linear(hidden, ffn, rng)
        self.fc2 = Linear(ffn, hidden, rng)

    def forward(self, x):
        n, length, h = x.shape
        qkv = self.qkv(self.ln1(x))
        q, k, v = qkv[..., :h], qkv[..., h:2 * h], qkv[..., 2 * h:]
        x = x + self.proj(F.multi_head_attention(q, k, v, self.heads))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class Backbone(Module):
    def __init__(self, joints: int, frames: int, geom: CubeGeometry, vocab: int, cfg: BackboneConfig, rng):
        if cfg.hidden % cfg.heads:
            raise ValueError(f"hidden {cfg.hidden} is not divisible by heads {cfg.heads}")
        if geom.num_cubes > cfg.max_seq:
            raise ValueError(f"{geom.num_cubes} cubes exceed max_seq {cfg.max_seq}")
        self.joints, self.frames, self.geom, self.vocab, self.cfg = joints, frames, geom, vocab, cfg
        self.cube_shape = (joints, frames, geom.patch, geom.patch)
        self.embed_res = [ResBlock(joints, rng, nd=3, bias=False) for _ in range(cfg.embed_res_layers)]
        self.embed_proj = Linear(int(np.prod(self.cube_shape)), cfg.hidden, rng)
        self.pos_embed = parameter(trunc_normal(rng, (geom.num_cubes, cfg.hidden)))
        self.mask_cube = parameter(trunc_normal(rng, self.cube_shape))
        self.blocks = [Block(cfg.hidden, cfg.heads, cfg.ffn, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.hidden)
        self.token_head = Linear(cfg.hidden, vocab, rng)

    @property
    def num_cubes(self) -> int:
        return self.geom.num_cubes

    def check_tokenizer(self, dved) -> None:
        """Refuse a tokenizer whose cube count or vocabulary differs."""
        if dved.geom.num_cubes != self.num_cubes or dved.vocab != self.vocab:
            raise ValueError(f"tokenizer has K={dved.geom.num_cubes}, T={dved.vocab}; "
                             f"backbone expects K={self.num_cubes}, T={self.vocab}")

    def cubes(self, u) -> np.ndarray:
        u = np.asarray(u)
        want = (self.joints, self.frames, self.geom.height, self.geom.width)
        if u.ndim != 5 or u.shape[1:] != want:
            raise ValueError(f"heatmap batch has shape {u.shape}, expected (N, {', '.join(map(str, want))})")
        return segment(u, self.geom)

    def embed_cubes(self, c) -> Tensor:
        """(N, K, J, F, Ds, Ds) cubes -> (N, K, hidden) with positions added."""
        c = c if isinstance(c, Tensor) else Tensor(c)
        if c.ndim != 6 or tuple(c.shape[1:]) != (self.num_cubes,) + self.cube_shape:
            raise ValueError(f"cube set has shape {c.shape}, expected (N, {self.num_cubes}, "
                             f"{', '.join(map(str, self.cube_shape))})")
        n, k = c.shape[:2]
        x = c.reshape((n * k,) + self.cube_shape)
        for blk in self.embed_res:
            x = blk(x)
        x = self.embed_proj(x.reshape(n, k, -1))
        return x + self.pos_embed

    def transform(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward_cubes(self, c) -> Tensor:
        return self.transform(self.embed_cubes(c))

    def encode(self, u) -> Tensor:
        """Unmasked final-layer features (N, K, hidden) for heatmaps (N, J, F, H, W)."""
        return self.forward_cubes(self.cubes(u))

    def masked_logits(self, u, masks: np.ndarray) -> tuple:
        """Token logits (N, K, T) with masked cubes swapped for the mask cube."""
        c, pos = apply_mask(self.cubes(u), masks, self.mask_cube)
        return self.token_head(self.forward_cubes(c)), pos


def encode_sequence(model: Backbone, u, batch_size: int = 64) -> np.ndarray:
    """Deterministic features for (N, J, F, H, W) or a single (J, F, H, W) volume."""
    u = np.asarray(u)
    single = u.ndim == 4
    if single:
        u = u[None]
    out = []
    with no_grad():
        for i in range(0, len(u), batch_size):
            out.append(model.encode(u[i:i + batch_size]).data)
    feats = np.concatenate(out) if out else np.zeros((0, model.num_cubes, model.cfg.hidden))
    return feats[0] if single else feats


def item_masks(keypoints, params: MaskParams, rngs) -> tuple:
    """One mask per item; an empty draw is redrawn once. Returns (masks, keep)."""
    masks, keep = [], []
    for kp, rng in zip(keypoints, rngs):
        m = generate_mask(kp, params, rng)
        if not m.any():
            m = generate_mask(kp, params, rng)
        masks.append(m)
        keep.append(bool(m.any()))
    return np.stack(masks), np.array(keep, dtype=bool)


def mask_rngs(seed: int, epoch: int, items, salt: int = MASK_SALT) -> list:
    """Per-item generators, so a mask depends only on (seed, epoch, item)."""
    return [make_rng([int(seed), int(epoch), int(i), salt]) for i in items]


def pretrain_step(model: Backbone, u, targets, masks: np.ndarray):
    """Masked-position cross-entropy, averaged per item and then over the batch.

    Items whose mask is empty are skipped with a warning; if every item is
    empty the loss is ``None``. Returns ``(loss, accuracy, n_used)``.
    """
    masks = np.asarray(masks)
    targets = np.asarray(targets, dtype=np.int64)
    keep = masks.reshape(len(masks), -1).any(axis=1)
    if not keep.all():
        log.warning("skipping %d item(s) with an empty mask", int((~keep).sum()))
    if not keep.any():
        return None, 0.0, 0
    u, targets, masks = np.asarray(u)[keep], targets[keep], masks[keep]
    logits, pos = model.masked_logits(u, masks)
    n = len(u)
    rows = np.concatenate([np.full(len(p), i) for i, p in enumerate(pos)])
    cols = np.concatenate(pos)
    counts = np.array([len(p) for p in pos], dtype=np.float64)
    picked = logits[rows, cols]  # (M, T)
    w = 1.0 / (counts[rows] * n)
    loss = F.cross_entropy(picked, targets[rows, cols], weights=w) * float(w.sum())
    acc = float((np.argmax(picked.data, axis=-1) == targets[rows, cols]).mean())
    return loss, acc, n


def build_backbone(profile: Profile, seed: int) -> Backbone:
    return Backbone(profile.joints, profile.frames, profile.geometry, profile.dved.vocab, profile.backbone,
                    make_rng([seed, 202]))


def pretrain(heatmaps, keypoints, tokens, profile: Profile, seed: int, model: Backbone | None = None,
             state: TrainState | None = None, epochs: float | None = None, stop_epoch: int | None = None,
             on_epoch=None) -> tuple:
    """Masked token pretraining over a corpus.

    ``keypoints`` holds one (F*J, 2) array per item in heatmap pixel units and
    ``tokens`` the (N, K) tokenizer ids. Passing a restored ``model`` and
    ``state`` continues an interrupted run exactly.
    """
    heatmaps = np.asarray(heatmaps)
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(heatmaps) == 0:
        raise ValueError("cannot pretrain on an empty corpus")
    if len(keypoints) != len(heatmaps) or len(tokens) != len(heatmaps):
        raise ValueError("heatmaps, keypoints and tokens must have the same length")
    cfg = profile.backbone
    epochs = cfg.epochs if epochs is None else epochs
    model = model or build_backbone(profile, seed)
    if tokens.shape[1:] != (model.num_cubes,):
        raise ValueError(f"token grid {tokens.shape[1:]} does not match {model.num_cubes} cubes")
    if tokens.size and tokens.max() >= model.vocab:
        raise ValueError(f"token id {int(tokens.max())} outside vocabulary of {model.vocab}")
    params = MaskParams.from_profile(profile)
    model.train()
    if state is None:
        state = make_state(model.named_parameters(), dataclasses.replace(cfg, epochs=epochs), len(heatmaps))
    if epochs == 0:
        model.eval()
        return model, state

    def step(idx, rng, step_no):
        idx = np.sort(idx)
        masks, _ = item_masks([keypoints[i] for i in idx], params, mask_rngs(seed, state.epoch, idx))
        loss, acc, used = pretrain_step(model, heatmaps[idx], tokens[idx], masks)
        return loss, {"accuracy": acc, "masked": float(masks.sum()) / max(len(idx), 1)}

    run_epochs(state, len(heatmaps), cfg.batch_size, epochs, step, seed, stop_epoch=stop_epoch, on_epoch=on_epoch)
    model.eval()
    return model, state


def masked_accuracy(model: Backbone, heatmaps, keypoints, tokens, profile: Profile, seed: int,
                    batch_size: int = 64) -> float:
    """Top-1 accuracy at masked positions under fixed evaluation masks."""
    params = MaskParams.from_profile(profile)
    hits = total = 0
    with no_grad():
        for i in range(0, len(heatmaps), batch_size):
            idx = np.arange(i, min(i + batch_size, len(heatmaps)))
            masks, keep = item_masks([keypoints[j] for j in idx], params, mask_rngs(seed, 0, idx, EVAL_SALT))
            if not keep.any():
                continue
            logits, pos = model.masked_logits(np.asarray(heatmaps)[idx[keep]], masks[keep])
            for r, p in enumerate(pos):
                pred = np.argmax(logits.data[r, p], axis=-1)
                hits += int((pred == np.asarray(tokens)[idx[keep][r], p]).sum())
                total += len(p)
    return hits / max(total, 1)


__all__ = ["Backbone", "Block", "build_backbone", "encode_sequence", "item_masks", "mask_rngs",
           "masked_accuracy", "pretrain", "pretrain_step"]
