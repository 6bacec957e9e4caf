"""Pose sequences to spatio-temporal Gaussian heatmaps.

A sequence of F frames with J 2D joints becomes a volume ``U`` of shape
(J, F, H, W): one Gaussian blob per joint and frame. Taking the max over
joints gives the condensed heatmap ``U_R`` of shape (F, H, W).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .kernel import get_default_dtype

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.6
DEFAULT_MARGIN = 0.9


@dataclass
class PoseSequence:
    """2D keypoints over time.

    coords is (F, J, 2) with (x, y) in heatmap pixel units; confidence is an
    optional (F, J) array in [0, 1]. NaN coordinates or zero confidence mark
    a keypoint as missing.
    """

    coords: np.ndarray
    confidence: np.ndarray | None = None
    label: int | None = None
    person_id: int | None = None
    id: str = ""
    abnormal: bool | None = None
    fps: float | None = None
    start: int = 0  # first frame of this window within the source sequence

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] != 2:
            raise ValueError(f"coords must be (frames, joints, 2), got {self.coords.shape}")
        if self.coords.shape[0] < 1 or self.coords.shape[1] < 1:
            raise ValueError("a pose sequence needs at least one frame and one joint")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
            if self.confidence.shape != self.coords.shape[:2]:
                raise ValueError("confidence must be (frames, joints)")

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def joints(self) -> int:
        return self.coords.shape[1]

    def valid(self) -> np.ndarray:
        """Boolean (F, J) mask of present keypoints."""
        ok = np.isfinite(self.coords).all(axis=-1)
        if self.confidence is not None:
            ok &= np.nan_to_num(self.confidence, nan=0.0) > 0
        return ok

    def keypoints(self) -> np.ndarray:
        """(F*J, 2) array of present keypoints in frame-major order."""
        return self.coords[self.valid()]


def normalize_pose(p: PoseSequence, height: int, width: int, margin_ratio: float = DEFAULT_MARGIN) -> PoseSequence:
    """Center the sequence-wide bounding box and scale it isotropically.

    The longer side of the box becomes ``margin_ratio * min(height, width)``.
    A box with zero extent puts every joint at the center.
    """
    ok = p.valid()
    if not ok.any():
        raise ValueError("normalize_pose needs at least one finite keypoint")
    pts = p.coords[ok]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center_in = (lo + hi) / 2.0
    center_out = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    side = float((hi - lo).max())
    coords = p.coords.copy()
    if side == 0.0:
        log.warning("degenerate pose sequence %r: all joints coincide, placing them at the center", p.id)
        coords[ok] = center_out
    else:
        scale = margin_ratio * min(height, width) / side
        coords[ok] = (pts - center_in) * scale + center_out
    return replace(p, coords=coords)


def build_heatmap(p: PoseSequence, height: int, width: int, sigma: float = DEFAULT_SIGMA,
                  use_confidence: bool = False, dtype=None) -> np.ndarray:
    """Gaussian energy volume U of shape (J, F, H, W).

    ``U[j, f, h, w] = exp(-((w - x)^2 + (h - y)^2) / (2 sigma^2))`` for the
    joint at (x, y); missing keypoints give an all-zero slice.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ok = p.valid()
    x = np.where(ok, p.coords[..., 0], 0.0)
    y = np.where(ok, p.coords[..., 1], 0.0)
    denom = 2.0 * sigma * sigma
    gx = np.exp(-((np.arange(width)[None, None, :] - x[..., None]) ** 2) / denom)
    gy = np.exp(-((np.arange(height)[None, None, :] - y[..., None]) ** 2) / denom)
    amp = ok.astype(np.float64)
    if use_confidence and p.confidence is not None:
        amp = amp * np.clip(np.nan_to_num(p.confidence, nan=0.0), 0.0, 1.0)
    gy = gy * amp[..., None]
    u = gy[..., :, None] * gx[..., None, :]  # (F, J, H, W)
    return np.ascontiguousarray(u.transpose(1, 0, 2, 3), dtype=dtype or get_default_dtype())


def condense(u: np.ndarray) -> np.ndarray:
    """Max over the joint axis: (J, F, H, W) -> (F, H, W); batched inputs keep their leading axis."""
    return u.max(axis=-4)


def heatmaps(poses, height: int, width: int, sigma: float = DEFAULT_SIGMA, use_confidence: bool = False) -> np.ndarray:
    """Stack ``build_heatmap`` over already-normalized sequences into (N, J, F, H, W)."""
    return np.stack([build_heatmap(p, height, width, sigma, use_confidence) for p in poses])
