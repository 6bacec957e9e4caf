"""Score aggregation and ranking metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve where label 1 is the positive class.

    Ties count one half (Mann-Whitney U with average ranks).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def anomaly_auc(normality, abnormal) -> float:
    """AUC for detecting abnormal items from normality scores (low = abnormal)."""
    return auc_roc(-np.asarray(normality, dtype=np.float64), abnormal)


def frame_aggregate(person_scores: dict, n_frames: int | None = None) -> np.ndarray:
    """Per-frame minimum over persons.

    ``person_scores`` maps frame index to an iterable of per-person scores.
    Frames with nobody in them score 1.0.
    """
    n = n_frames if n_frames is not None else (max(person_scores, default=-1) + 1)
    out = np.ones(n, dtype=np.float64)
    for f, vals in person_scores.items():
        vals = list(vals)
        if vals and 0 <= f < n:
            out[f] = min(vals)
    return out


def window_frame_scores(n_frames: int, starts, window: int, scores) -> np.ndarray:
    """Per-frame minimum over the windows covering each frame; uncovered frames score 1.0."""
    out = np.ones(n_frames, dtype=np.float64)
    for s, v in zip(starts, scores):
        lo, hi = max(int(s), 0), min(int(s) + window, n_frames)
        out[lo:hi] = np.minimum(out[lo:hi], v)
    return out


__all__ = ["anomaly_auc", "auc_roc", "frame_aggregate", "window_frame_scores"]
