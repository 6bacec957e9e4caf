"""Save and restore models (and training state) through the checkpoint container."""
from __future__ import annotations

import dataclasses

import numpy as np

from .backbone import Backbone, build_backbone
from .config import Profile, profile_from_dict
from .dved import DVED, build_dved
from .heads import EmbedHead, Finetuned, JigsawHead, PooledHead, jigsaw_layout
from .io import FormatError, read_checkpoint, write_checkpoint
from .kernel import make_rng
from .training import TrainState, make_state

PARAM = "param."


def _tensors(model) -> dict:
    return {PARAM + k: v.data for k, v in model.named_parameters().items()}


def _load_params(model, tensors: dict) -> None:
    state = {k[len(PARAM):]: v for k, v in tensors.items() if k.startswith(PARAM)}
    model.load_state_dict(state, strict=True)


def _state_fields(state: TrainState | None) -> tuple:
    if state is None:
        return {}, {}
    meta = {"epoch": state.epoch, "step": state.step, "history": state.history}
    return meta, state.optimizer.state_tensors()


def save_model(path, model, profile: Profile, seed: int, state: TrainState | None = None, **extra) -> None:
    kind = "finetuned" if isinstance(model, Finetuned) else "backbone" if isinstance(model, Backbone) else "dved"
    meta, opt = _state_fields(state)
    config = {"kind": kind, "profile": profile.to_dict(), "seed": int(seed), "train": meta, **extra}
    if isinstance(model, Finetuned):
        config.update(task=model.task, freeze=model.freeze, meta=model.meta,
                      head_shape=list(model.head.fc.weight.shape))
    write_checkpoint(path, config, {**_tensors(model), **opt})


def _build(config: dict):
    profile = profile_from_dict(config["profile"])
    seed = config.get("seed", 0)
    kind = config.get("kind")
    if kind == "dved":
        return build_dved(profile, seed), profile
    if kind == "backbone":
        return build_backbone(profile, seed), profile
    if kind != "finetuned":
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    backbone = build_backbone(profile, seed)
    task = config["task"]
    n_out, hidden = config["head_shape"]
    rng = make_rng([seed, 0])
    if task == "oneshot":
        head = EmbedHead(hidden, n_out, rng)
    elif task == "jigsaw":
        head = JigsawHead(hidden, n_out, jigsaw_layout(profile), rng, profile.jigsaw.dropout)
    elif task in ("classify", "anomaly"):
        head = PooledHead(hidden, n_out, rng, getattr(profile, task).dropout)
    else:
        raise FormatError(f"unknown task {task!r}")
    return Finetuned(backbone, head, task, config.get("freeze", False), **config.get("meta", {})), profile


def load_model(path, expect: str | None = None) -> tuple:
    """Returns ``(model, profile, config)``; the model is in eval mode."""
    config, tensors = read_checkpoint(path)
    if expect is not None and config.get("kind") != expect:
        raise FormatError(f"{path}: expected a {expect} checkpoint, found {config.get('kind')!r}")
    model, profile = _build(config)
    _load_params(model, tensors)
    model.eval()
    model.checkpoint_tensors = tensors
    return model, profile, config


def restore_state(model, profile: Profile, config: dict, tensors: dict, n_items: int, epochs=None) -> TrainState:
    """Rebuild the optimizer and schedule so training continues exactly where it stopped."""
    cfg = profile.backbone if isinstance(model, Backbone) else profile.dved
    if epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=epochs)
    params = model.trainable() if isinstance(model, Finetuned) else model.named_parameters()
    state = make_state(params, cfg, n_items)
    train = config.get("train") or {}
    state.optimizer.load_state_tensors({k: v for k, v in tensors.items() if k.startswith("opt.")},
                                       train.get("step", 0))
    state.epoch = int(train.get("epoch", 0))
    state.history = list(train.get("history", []))
    return state


def check_pair(backbone: Backbone, dved: DVED) -> None:
    backbone.check_tokenizer(dved)


def export_codebook(model: DVED) -> np.ndarray:
    return np.asarray(model.codebook.data, dtype=np.float32)


__all__ = ["check_pair", "export_codebook", "load_model", "restore_state", "save_model"]
