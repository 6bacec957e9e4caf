"""Synthetic motion corpora, keypoint JSON-lines I/O, windowing and augmentation.

Keypoint records are one JSON object per line::

    {"id": "walk-0007", "fps": 12, "frames": [[[x, y, conf], ...J], ...F],
     "label": 2, "abnormal": false}

Joint order is COCO-17 for 17-joint profiles and ``DESK_JOINTS`` for the
5-joint desk profile.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .heatmap import PoseSequence, normalize_pose
from .kernel import make_rng

log = logging.getLogger(__name__)

COCO_JOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
DESK_JOINTS = ("nose", "left_wrist", "right_wrist", "left_ankle", "right_ankle")
CLASSES = ("still", "wave", "walk", "jump")

# standing template in body units (hip center at origin, y grows downward)
_TEMPLATE = {
    "nose": (0.0, -0.85), "left_eye": (-0.03, -0.88), "right_eye": (0.03, -0.88),
    "left_ear": (-0.07, -0.86), "right_ear": (0.07, -0.86),
    "left_shoulder": (-0.18, -0.6), "right_shoulder": (0.18, -0.6),
    "left_elbow": (-0.22, -0.33), "right_elbow": (0.22, -0.33),
    "left_wrist": (-0.24, -0.08), "right_wrist": (0.24, -0.08),
    "left_hip": (-0.1, 0.0), "right_hip": (0.1, 0.0),
    "left_knee": (-0.11, 0.45), "right_knee": (0.11, 0.45),
    "left_ankle": (-0.12, 0.9), "right_ankle": (0.12, 0.9),
}


def joint_names(n_joints: int) -> tuple:
    if n_joints == len(COCO_JOINTS):
        return COCO_JOINTS
    if n_joints == len(DESK_JOINTS):
        return DESK_JOINTS
    raise ValueError(f"no joint layout for {n_joints} joints")


def flip_pairs(names) -> list:
    """Index pairs (left, right) swapped by a horizontal flip."""
    idx = {n: i for i, n in enumerate(names)}
    return [(i, idx["right_" + n[5:]]) for i, n in enumerate(names) if n.startswith("left_")]


# -- synthetic motion -----------------------------------------------------
@dataclass
class SynthSpec:
    """Recipe for a synthetic corpus; generation is a pure function of it."""

    classes: tuple = CLASSES
    per_class: int = 100
    anomaly_fraction: float = 0.0
    anomaly_kinds: tuple = ("reversed_walk", "teleport_jump")
    frames: int = 12
    joints: int = 5
    fps: float = 12.0
    noise: float = 0.01
    cycles: tuple = (0.8, 1.6)
    wave_amplitude: tuple = (0.15, 0.3)
    walk_amplitude: tuple = (0.15, 0.3)
    walk_speed: tuple = (0.01, 0.03)
    jump_height: tuple = (0.2, 0.4)
    teleport_offset: tuple = (1.0, 1.6)
    scale: tuple = (80.0, 120.0)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.per_class * len(self.classes)


def _pose(t: np.ndarray, kind: str, rng: np.random.Generator, spec: SynthSpec) -> dict:
    """Joint trajectories in body units for one motion kind; t is frame index."""
    f = len(t)
    omega = 2 * np.pi * rng.uniform(*spec.cycles) / f
    phase = rng.uniform(0, 2 * np.pi)
    s = np.sin(omega * t + phase)
    pts = {n: np.tile(np.array(xy, dtype=np.float64), (f, 1)) for n, xy in _TEMPLATE.items()}
    shift = np.zeros((f, 2))
    if kind == "still":
        shift[:, 0] = 0.01 * s
    elif kind == "wave":
        amp = rng.uniform(*spec.wave_amplitude)
        pts["right_elbow"] = pts["right_shoulder"] + np.array([0.15, -0.2])
        pts["right_wrist"] = pts["right_elbow"] + np.stack([0.05 + amp * s, -0.25 + 0.0 * s], axis=1)
    elif kind in ("walk", "reversed_walk"):
        amp = rng.uniform(*spec.walk_amplitude)
        arm = -0.6 * amp
        if kind == "reversed_walk":
            amp, arm = 2.0 * amp, 1.5 * amp  # arms swing with the same-side leg, exaggerated
        for side, sign in (("left", 1.0), ("right", -1.0)):
            swing = sign * s
            lift = np.maximum(0.0, swing) * 0.1
            pts[f"{side}_ankle"] = pts[f"{side}_ankle"] + np.stack([amp * swing, -lift], axis=1)
            pts[f"{side}_knee"] = pts[f"{side}_knee"] + np.stack([0.5 * amp * swing, -lift], axis=1)
            pts[f"{side}_wrist"] = pts[f"{side}_wrist"] + np.stack([arm * swing, 0.0 * swing], axis=1)
            pts[f"{side}_elbow"] = pts[f"{side}_elbow"] + np.stack([0.5 * arm * swing, 0.0 * swing], axis=1)
        shift[:, 0] = rng.uniform(*spec.walk_speed) * t * rng.choice([-1.0, 1.0])
    elif kind in ("jump", "teleport_jump"):
        height = rng.uniform(*spec.jump_height)
        up = np.abs(s)
        shift[:, 1] = -height * up
        for side, sign in (("left", -1.0), ("right", 1.0)):
            raise_arm = np.stack([sign * 0.1 * up, -0.5 * up], axis=1)
            pts[f"{side}_wrist"] = pts[f"{side}_wrist"] + raise_arm
            pts[f"{side}_elbow"] = pts[f"{side}_elbow"] + 0.5 * raise_arm
            tuck = np.stack([0.0 * up, -0.15 * up], axis=1)
            pts[f"{side}_ankle"] = pts[f"{side}_ankle"] + tuck
        if kind == "teleport_jump":
            at = int(rng.integers(f // 3, max(2 * f // 3, f // 3 + 1)))
            off = rng.uniform(*spec.teleport_offset) * rng.choice([-1.0, 1.0])
            shift[at:, 0] += off
    else:
        raise ValueError(f"unknown motion kind {kind!r}")
    return {n: p + shift for n, p in pts.items()}


def synth_sequence(spec: SynthSpec, index: int, kind: str, label: int, abnormal: bool) -> PoseSequence:
    rng = make_rng([spec.seed, index, 7])
    names = joint_names(spec.joints)
    t = np.arange(spec.frames, dtype=np.float64)
    body = _pose(t, kind, rng, spec)
    xy = np.stack([body[n] for n in names], axis=1)  # (F, J, 2)
    xy = xy + rng.normal(0.0, spec.noise, size=xy.shape)
    scale = rng.uniform(*spec.scale)
    origin = rng.uniform(100.0, 400.0, size=2)
    coords = xy * scale + origin
    conf = np.clip(rng.uniform(0.85, 1.0, size=coords.shape[:2]), 0.0, 1.0)
    seq_id = f"{kind}-{index:05d}"
    return PoseSequence(coords=np.round(coords, 3), confidence=np.round(conf, 3), label=label, id=seq_id,
                        abnormal=abnormal, fps=spec.fps)


def gen_corpus(spec: SynthSpec) -> list:
    """Sequences for every class; the first ``round(fraction * count)`` slots go to anomalies.

    Anomalies keep the label of the motion they corrupt (walk or jump), so
    class labels and the anomaly flag are independent fields.
    """
    if spec.count == 0:
        log.warning("synthetic spec has zero sequences; corpus is empty")
        return []
    n_anom = int(round(spec.anomaly_fraction * spec.count))
    kinds = []
    for c, name in enumerate(spec.classes):
        kinds.extend((name, c, False) for _ in range(spec.per_class))
    order = make_rng([spec.seed, 1]).permutation(len(kinds))
    kinds = [kinds[i] for i in order]
    base = {"reversed_walk": "walk", "teleport_jump": "jump"}
    for i in range(n_anom):
        kind = spec.anomaly_kinds[i % len(spec.anomaly_kinds)]
        label = spec.classes.index(base[kind]) if base[kind] in spec.classes else -1
        kinds[i] = (kind, label, True)
    return [synth_sequence(spec, i, k, lab, ab) for i, (k, lab, ab) in enumerate(kinds)]


# -- JSON-lines I/O -------------------------------------------------------
def pose_to_record(p: PoseSequence) -> dict:
    conf = p.confidence if p.confidence is not None else np.ones(p.coords.shape[:2])
    frames = np.concatenate([p.coords, conf[..., None]], axis=-1)
    frames = [[[None if not np.isfinite(v) else float(v) for v in joint] for joint in frame] for frame in frames]
    rec = {"id": p.id, "fps": p.fps, "frames": frames}
    if p.label is not None:
        rec["label"] = int(p.label)
    if p.abnormal is not None:
        rec["abnormal"] = bool(p.abnormal)
    if p.person_id is not None:
        rec["person_id"] = int(p.person_id)
    return rec


def record_to_pose(rec: dict) -> PoseSequence:
    if not isinstance(rec, dict) or "frames" not in rec:
        raise ValueError("record needs a 'frames' field")
    arr = np.array([[[np.nan if v is None else v for v in joint] for joint in frame] for frame in rec["frames"]],
                   dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (2, 3):
        raise ValueError(f"'frames' must be F x J x [x, y, conf], got shape {arr.shape}")
    conf = arr[..., 2] if arr.shape[2] == 3 else None
    return PoseSequence(coords=arr[..., :2], confidence=conf, label=rec.get("label"), id=str(rec.get("id", "")),
                        abnormal=rec.get("abnormal"), fps=rec.get("fps"), person_id=rec.get("person_id"))


def write_poses(path, poses) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in poses:
            fh.write(json.dumps(pose_to_record(p), separators=(",", ":")) + "\n")


def read_poses(path) -> list:
    """Raw sequences from a keypoint JSON-lines file (no normalization)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_to_pose(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed keypoint record: {exc}") from None
    return out


def window_starts(total: int, frames: int, stride: int) -> list:
    """Window offsets covering every frame; a final window is aligned to the end if needed."""
    if not 1 <= stride <= frames:
        raise ValueError(f"window stride {stride} must lie in [1, {frames}] to cover every frame")
    if total <= frames:
        return [0]
    starts = list(range(0, total - frames + 1, stride))
    if starts[-1] + frames < total:
        starts.append(total - frames)
    return starts


def split_windows(p: PoseSequence, frames: int, stride: int) -> list:
    """Cut a sequence into ``frames``-long windows; short sequences repeat their last frame."""
    if p.frames < frames:
        pad = frames - p.frames
        coords = np.concatenate([p.coords, np.repeat(p.coords[-1:], pad, axis=0)])
        conf = None if p.confidence is None else np.concatenate(
            [p.confidence, np.repeat(p.confidence[-1:], pad, axis=0)])
        return [_window(p, coords, conf, 0)]
    out = []
    for s in window_starts(p.frames, frames, stride):
        conf = None if p.confidence is None else p.confidence[s:s + frames]
        out.append(_window(p, p.coords[s:s + frames], conf, s))
    return out


def _window(p, coords, conf, start):
    suffix = f"@{start}" if start else ""
    return PoseSequence(coords=coords, confidence=conf, label=p.label, person_id=p.person_id, id=p.id + suffix,
                        abnormal=p.abnormal, fps=p.fps, start=start)


def ingest(path, profile, stride: int | None = None, normalize: bool = True) -> list:
    """Read, validate, window and normalize a keypoint file for ``profile``."""
    stride = stride or profile.window_stride
    out = []
    for p in read_poses(path):
        if p.joints != profile.joints:
            raise ValueError(f"sequence {p.id!r} has {p.joints} joints, profile {profile.name} expects "
                             f"{profile.joints}")
        for w in split_windows(p, profile.frames, stride):
            if normalize:
                w = normalize_pose(w, profile.height, profile.width, profile.margin_ratio)
            out.append(w)
    return out


def prepare(poses, profile) -> list:
    """Normalize in-memory sequences of exactly ``profile.frames`` frames."""
    return [normalize_pose(p, profile.height, profile.width, profile.margin_ratio) for p in poses]


# -- augmentation ---------------------------------------------------------
def hflip(p: PoseSequence, width: int, pairs) -> PoseSequence:
    """Mirror x about the image center and swap left/right joints."""
    coords = p.coords.copy()
    coords[..., 0] = (width - 1) - coords[..., 0]
    conf = None if p.confidence is None else p.confidence.copy()
    for a, b in pairs:
        coords[:, [a, b]] = coords[:, [b, a]]
        if conf is not None:
            conf[:, [a, b]] = conf[:, [b, a]]
    return replace(p, coords=coords, confidence=conf)


def augment(p: PoseSequence, rng: np.random.Generator, height: int, width: int, pairs, scale=(0.9, 1.1),
            jitter: float = 0.0, flip_prob: float = 0.5) -> PoseSequence:
    """Random scale about the image center, Gaussian jitter, and horizontal flip."""
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    k = rng.uniform(*scale)
    coords = (p.coords - center) * k + center
    if jitter > 0:
        coords = coords + rng.normal(0.0, jitter, size=coords.shape)
    q = replace(p, coords=coords)
    if rng.random() < flip_prob:
        q = hflip(q, width, pairs)
    return q
