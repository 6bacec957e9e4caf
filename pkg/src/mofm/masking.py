"""Keypoint-driven block masks over the cube grid.

Only grid cells that contain a sampled keypoint are masked, so masked
cubes always carry motion energy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .kernel import Tensor, where

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskParams:
    min_masked: int
    max_masked: int
    patch: int
    height: int
    width: int

    def __post_init__(self):
        if not 1 <= self.min_masked <= self.max_masked:
            raise ValueError(f"need 1 <= min_masked <= max_masked, got {self.min_masked}, {self.max_masked}")
        if self.patch < 1:
            raise ValueError("patch must be positive")

    @property
    def grid(self) -> tuple:
        return grid_dims(self.height, self.width, self.patch)

    @classmethod
    def from_profile(cls, profile) -> "MaskParams":
        lo, hi = profile.mask_bounds()
        return cls(lo, hi, profile.patch, profile.height, profile.width)


def grid_dims(height: int, width: int, patch: int) -> tuple:
    rows = height // patch + (1 if height % patch else 0)
    cols = width // patch + (1 if width % patch else 0)
    return rows, cols


def draw_block_count(total_points: int, min_masked: int, max_masked: int, rng: np.random.Generator) -> int:
    """Uniform draw from {alpha, ..., beta + 1}, clamped to ``total_points``."""
    alpha = max(1, min(min_masked, total_points))
    beta = min(max_masked, total_points)
    n = int(rng.integers(alpha, beta + 2))
    return min(n, total_points)


def generate_mask(kp, params: MaskParams, rng: np.random.Generator) -> np.ndarray:
    """Binary (rows, cols) uint8 mask from an (N, 2) array of (x, y) keypoints.

    Keypoints outside the grid or with non-finite coordinates are drawn
    like any other but set nothing.
    """
    rows, cols = params.grid
    mask = np.zeros((rows, cols), dtype=np.uint8)
    kp = np.asarray(kp, dtype=np.float64).reshape(-1, 2)
    total = len(kp)
    if total == 0:
        return mask
    n = draw_block_count(total, params.min_masked, params.max_masked, rng)
    chosen = kp[rng.choice(total, size=n, replace=False)]
    ok = np.isfinite(chosen).all(axis=1)
    c = np.floor(chosen[ok, 0] / params.patch)
    r = np.floor(chosen[ok, 1] / params.patch)
    inside = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
    mask[r[inside].astype(np.int64), c[inside].astype(np.int64)] = 1
    return mask


def pose_keypoints(p) -> np.ndarray:
    """(F*J, 2) frame-major keypoints of a pose sequence; missing ones are NaN."""
    kp = np.where(p.valid()[..., None], p.coords, np.nan)
    return kp.reshape(-1, 2)


def masked_positions(mask: np.ndarray) -> np.ndarray:
    """Row-major flat indices of the set cells, ascending."""
    return np.flatnonzero(np.asarray(mask).ravel()).astype(np.int64)


def apply_mask(cubes, mask: np.ndarray, mask_token):
    """Replace masked cubes by ``mask_token``.

    ``cubes`` is (K, ...) or (N, K, ...); ``mask`` is a (rows, cols) grid or
    a batch of them. Returns ``(masked, positions)`` where positions are the
    sorted flat indices (a list of arrays for a batch).
    """
    cubes = cubes if isinstance(cubes, Tensor) else Tensor(cubes)
    mask = np.asarray(mask)
    batched = mask.ndim == 3
    k = int(np.prod(mask.shape[-2:]))
    lead = 1 if batched else 0
    if cubes.ndim < lead + 1 or cubes.shape[lead] != k or (batched and cubes.shape[0] != mask.shape[0]):
        raise ValueError(f"mask grid {mask.shape} does not match cube set {cubes.shape}")
    flat = mask.reshape(mask.shape[:-2] + (k,)).astype(bool)
    tok = mask_token if isinstance(mask_token, Tensor) else Tensor(mask_token)
    if tuple(tok.shape) != tuple(cubes.shape[lead + 1:]):
        raise ValueError(f"mask token shape {tok.shape} does not match cube shape {cubes.shape[lead + 1:]}")
    cond = flat.reshape(flat.shape + (1,) * (cubes.ndim - lead - 1))
    out = where(cond, tok, cubes)
    pos = [masked_positions(m) for m in mask] if batched else masked_positions(mask)
    return out, pos


__all__ = ["MaskParams", "apply_mask", "draw_block_count", "generate_mask", "grid_dims", "masked_positions",
           "pose_keypoints"]
