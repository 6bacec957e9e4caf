"""AdamW and learning-rate schedules."""
from __future__ import annotations

import math

import numpy as np


def adamw_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8, decoupled: bool = True) -> None:
    """In-place Adam update of ``params`` (name -> Tensor).

    ``state`` holds ``step`` and per-name first/second moments and is
    updated in place. With ``decoupled=False`` the decay is added to the
    gradient (plain Adam with L2) instead of shrinking the weights.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    b1, b2 = betas
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not decoupled and weight_decay:
            g = g + weight_decay * p.data
        m = m_all.get(name)
        if m is None:
            m = m_all[name] = np.zeros_like(p.data)
            v_all[name] = np.zeros_like(p.data)
        v = v_all[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if decoupled and weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class AdamW:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), weight_decay: float = 0.0,
                 eps: float = 1e-8, decoupled: bool = True):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.decoupled = decoupled
        self.state: dict = {"step": 0, "m": {}, "v": {}}

    def step(self, grads: dict, lr: float | None = None) -> None:
        adamw_step(self.params, grads, self.state, self.lr if lr is None else lr, self.betas,
                   self.weight_decay, self.eps, self.decoupled)

    def state_tensors(self) -> dict:
        out = {}
        for name, arr in self.state["m"].items():
            out[f"opt.m.{name}"] = arr
            out[f"opt.v.{name}"] = self.state["v"][name]
        return out

    def load_state_tensors(self, tensors: dict, step: int) -> None:
        self.state = {"step": int(step), "m": {}, "v": {}}
        for key, arr in tensors.items():
            if key.startswith("opt.m."):
                self.state["m"][key[6:]] = np.array(arr)
            elif key.startswith("opt.v."):
                self.state["v"][key[6:]] = np.array(arr)


def warmup_cosine(step: int, total_steps: int, warmup_steps: int, base_lr: float, peak_lr: float) -> float:
    """Linear ramp base -> peak over warmup, then cosine decay peak -> base."""
    if warmup_steps > total_steps:
        raise ValueError("warmup_steps must not exceed total_steps")
    if step < warmup_steps:
        return base_lr + (peak_lr - base_lr) * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    frac = min((step - warmup_steps) / span, 1.0)
    return base_lr + 0.5 * (peak_lr - base_lr) * (1.0 + math.cos(math.pi * frac))


def one_cycle(step: int, total_steps: int, base_lr: float, peak_lr: float, pct_start: float = 0.3) -> float:
    """Cosine ramp up to the peak over ``pct_start`` of training, cosine down after."""
    up = max(int(round(pct_start * total_steps)), 1)
    if step < up:
        return peak_lr + (base_lr - peak_lr) * 0.5 * (1.0 + math.cos(math.pi * step / up))
    frac = min((step - up) / max(total_steps - up, 1), 1.0)
    return base_lr + (peak_lr - base_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


class LRSchedule:
    """Callable ``step -> lr`` for the two schedule kinds used in training."""

    def __init__(self, kind: str, total_steps: int, base_lr: float, peak_lr: float, warmup_steps: int = 0):
        if kind not in ("warmup_cosine", "one_cycle"):
            raise ValueError(f"unknown schedule {kind!r}")
        self.kind = kind
        self.total_steps = total_steps
        self.base_lr = base_lr
        self.peak_lr = peak_lr
        self.warmup_steps = min(warmup_steps, total_steps)

    def __call__(self, step: int) -> float:
        if self.kind == "one_cycle":
            return one_cycle(step, self.total_steps, self.base_lr, self.peak_lr)
        return warmup_cosine(step, self.total_steps, self.warmup_steps, self.base_lr, self.peak_lr)
