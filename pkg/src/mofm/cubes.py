"""Thermal cubes: Ds x Ds spatial patches of the heatmap spanning all joints and frames.

Cube ``i`` covers grid cell (i // grid_cols, i % grid_cols) in row-major
order. Every positional embedding, mask grid and jigsaw piece in the
package uses this same order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CubeGeometry:
    height: int
    width: int
    patch: int

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError("patch size must be >= 1")
        for name, size in (("height", self.height), ("width", self.width)):
            if size % self.patch:
                raise ValueError(f"patch size {self.patch} does not divide {name} {size}")

    @property
    def grid_rows(self) -> int:
        return self.height // self.patch

    @property
    def grid_cols(self) -> int:
        return self.width // self.patch

    @property
    def num_cubes(self) -> int:
        return self.grid_rows * self.grid_cols

    def cube_index(self, h: int, w: int) -> int:
        return (h // self.patch) * self.grid_cols + (w // self.patch)


def segment(u: np.ndarray, geom: CubeGeometry) -> np.ndarray:
    """(..., J, F, H, W) -> (..., K, J, F, Ds, Ds)."""
    *lead, j, f, h, w = u.shape
    if (h, w) != (geom.height, geom.width):
        raise ValueError(f"volume is {h}x{w}, geometry expects {geom.height}x{geom.width}")
    d, r, c = geom.patch, geom.grid_rows, geom.grid_cols
    n = len(lead)
    x = u.reshape(*lead, j, f, r, d, c, d)
    perm = tuple(range(n)) + tuple(n + a for a in (2, 4, 0, 1, 3, 5))
    return np.ascontiguousarray(x.transpose(perm)).reshape(*lead, r * c, j, f, d, d)


def assemble(cubes: np.ndarray, geom: CubeGeometry) -> np.ndarray:
    """Inverse of :func:`segment`: (..., K, J, F, Ds, Ds) -> (..., J, F, H, W)."""
    *lead, k, j, f, d, d2 = cubes.shape
    if k != geom.num_cubes:
        raise ValueError(f"got {k} cubes, geometry has {geom.num_cubes}")
    if d != geom.patch or d2 != geom.patch:
        raise ValueError(f"cube patch is {d}x{d2}, geometry expects {geom.patch}")
    r, c = geom.grid_rows, geom.grid_cols
    n = len(lead)
    x = cubes.reshape(*lead, r, c, j, f, d, d)
    perm = tuple(range(n)) + tuple(n + a for a in (2, 3, 0, 4, 1, 5))
    return np.ascontiguousarray(x.transpose(perm)).reshape(*lead, j, f, r * d, c * d)
