"""Profiles and hyperparameters.

Two profiles exist. ``paper`` holds the full-size architecture and
training settings. ``desk`` shrinks every dimension so the whole pipeline
trains on one CPU core in minutes. Every value can be overridden from a
flat ``section.key=value`` text file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .cubes import CubeGeometry


@dataclass
class DvedConfig:
    hidden: int = 256
    vocab: int = 8192
    code_dim: int = 256
    res_repeats: int = 2
    tau_start: float = 1.0
    tau_end: float = 0.0625
    tau_anneal_fraction: float = 0.5
    beta: float = 1e-4
    smooth_l1_beta: float = 1.0
    straight_through: bool = False
    epochs: float = 20.0
    batch_size: int = 24
    base_lr: float = 1e-6
    peak_lr: float = 3e-4
    warmup_epochs: float = 1.0
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)


@dataclass
class BackboneConfig:
    hidden: int = 768
    layers: int = 12
    heads: int = 12
    ffn: int = 3072
    max_seq: int = 384
    embed_res_layers: int = 2
    epochs: float = 20.0
    batch_size: int = 32
    base_lr: float = 1e-8
    peak_lr: float = 1.5e-4
    warmup_epochs: float = 1.0
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    mask_min: int = -1  # -1: round(0.15 * F * J)
    mask_max: int = -1  # -1: round(0.5 * F * J)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class FinetuneConfig:
    epochs: float = 20
    batch_size: int = 24
    optimizer: str = "adamw"  # "adam" couples the decay into the gradient
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 3e-4
    base_lr: float = 1e-8
    peak_lr: float = 1e-4
    warmup_epochs: float = 5.0
    schedule: str = "warmup_cosine"
    dropout: float = 0.4
    freeze_backbone: bool = False


@dataclass
class OneShotConfig(FinetuneConfig):
    epochs: float = 5
    batch_size: int = 16
    peak_lr: float = 1e-5
    warmup_epochs: float = 0.3
    temperature: float = 0.1
    samples_per_class: int = 2
    embed_dim: int = 2048
    exemplars: int = 20


@dataclass
class JigsawConfig(FinetuneConfig):
    epochs: float = 1
    batch_size: int = 16
    optimizer: str = "adam"
    weight_decay: float = 6e-4
    peak_lr: float = 6e-4
    warmup_epochs: float = 0.0
    schedule: str = "one_cycle"
    pieces: int = 12
    row_bands: int = 6
    col_bands: int = 2


@dataclass
class AnomalyConfig(FinetuneConfig):
    epochs: float = 8
    batch_size: int = 16
    optimizer: str = "adam"
    weight_decay: float = 3e-4
    peak_lr: float = 1e-4
    warmup_epochs: float = 0.0
    schedule: str = "one_cycle"
    abnormal_weight: float = 2.0
    scale_low: float = 0.9
    scale_high: float = 1.1
    jitter_ratio: float = 0.02
    flip_prob: float = 0.5


@dataclass
class Profile:
    name: str = "paper"
    joints: int = 17
    frames: int = 48
    height: int = 72
    width: int = 72
    patch: int = 4
    sigma: float = 0.6
    margin_ratio: float = 0.9
    use_confidence: bool = False
    window_stride: int = 24
    dved: DvedConfig = field(default_factory=DvedConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    classify: FinetuneConfig = field(default_factory=FinetuneConfig)
    oneshot: OneShotConfig = field(default_factory=OneShotConfig)
    jigsaw: JigsawConfig = field(default_factory=JigsawConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)

    @property
    def geometry(self) -> CubeGeometry:
        return CubeGeometry(self.height, self.width, self.patch)

    @property
    def num_cubes(self) -> int:
        return self.geometry.num_cubes

    def mask_bounds(self) -> tuple:
        n = self.frames * self.joints
        lo = self.backbone.mask_min if self.backbone.mask_min >= 0 else round(0.15 * n)
        hi = self.backbone.mask_max if self.backbone.mask_max >= 0 else round(0.5 * n)
        return lo, hi

    def validate(self) -> "Profile":
        geom = self.geometry
        b = self.backbone
        if b.hidden != b.heads * b.head_dim:
            raise ValueError(f"hidden {b.hidden} is not divisible by heads {b.heads}")
        if geom.num_cubes > b.max_seq:
            raise ValueError(f"{geom.num_cubes} cubes exceed max_seq {b.max_seq}")
        if not 1 <= self.window_stride <= self.frames:
            raise ValueError(f"window_stride {self.window_stride} must lie in [1, frames={self.frames}]")
        if self.dved.tau_end <= 0 or self.dved.beta < 0:
            raise ValueError("dved needs tau_end > 0 and beta >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def paper_profile() -> Profile:
    return Profile().validate()


def desk_profile() -> Profile:
    """CPU-scale profile; small dimensions and short training lengths."""
    p = Profile(
        name="desk", joints=5, frames=12, height=24, width=24, patch=4, sigma=2.0, window_stride=6,
        dved=DvedConfig(hidden=16, vocab=64, code_dim=32, res_repeats=1, tau_end=0.5, beta=0.01, epochs=20,
                        batch_size=24, peak_lr=3e-3, base_lr=1e-5, weight_decay=1e-4),
        backbone=BackboneConfig(hidden=128, layers=2, heads=4, ffn=512, max_seq=48, epochs=20,
                                batch_size=32, peak_lr=1e-3, base_lr=1e-6),
        classify=FinetuneConfig(epochs=6, batch_size=24, peak_lr=5e-4, base_lr=1e-6, warmup_epochs=1.0),
        oneshot=OneShotConfig(epochs=6, batch_size=16, peak_lr=3e-4, base_lr=1e-6, warmup_epochs=0.3,
                              embed_dim=128),
        jigsaw=JigsawConfig(epochs=8, batch_size=16, peak_lr=6e-4),
        anomaly=AnomalyConfig(epochs=8, batch_size=16, peak_lr=5e-4),
    )
    return p.validate()


PROFILES = {"paper": paper_profile, "desk": desk_profile}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def _coerce(text: str, current, declared: str = ""):
    if declared == "float":
        return float(text)
    if isinstance(current, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return tuple(float(v) for v in text.replace(",", " ").split())
    return text.strip()


def apply_overrides(profile: Profile, overrides: dict) -> Profile:
    """Return a copy with ``{"section.key": value}`` (or top-level ``key``) applied."""
    p = dataclasses.replace(profile)
    for section in ("dved", "backbone", "classify", "oneshot", "jigsaw", "anomaly"):
        setattr(p, section, dataclasses.replace(getattr(p, section)))
    for key, value in overrides.items():
        target, attr = p, key
        if "." in key:
            section, attr = key.split(".", 1)
            if not hasattr(p, section) or not dataclasses.is_dataclass(getattr(p, section)):
                raise KeyError(f"unknown config section {section!r} in {key!r}")
            target = getattr(p, section)
        declared = {f.name: f.type for f in dataclasses.fields(target)}
        if attr not in declared:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(target, attr)
        if isinstance(value, str):
            value = _coerce(value, current, str(declared[attr]))
        setattr(target, attr, value)
    return p.validate()


def parse_config(text: str) -> dict:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_profile(name: str, config_path=None, overrides: dict | None = None) -> Profile:
    p = get_profile(name)
    merged = {}
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            merged.update(parse_config(fh.read()))
    merged.pop("profile", None)
    merged.update(overrides or {})
    return apply_overrides(p, merged) if merged else p


def profile_from_dict(d: dict) -> Profile:
    """Rebuild a profile from :meth:`Profile.to_dict` output (e.g. a checkpoint)."""
    sections = {"dved": DvedConfig, "backbone": BackboneConfig, "classify": FinetuneConfig,
                "oneshot": OneShotConfig, "jigsaw": JigsawConfig, "anomaly": AnomalyConfig}
    kw = dict(d)
    for name, cls in sections.items():
        if name in kw:
            vals = dict(kw[name])
            if "betas" in vals:
                vals["betas"] = tuple(vals["betas"])
            kw[name] = cls(**vals)
    return Profile(**kw).validate()


def dump_config(profile: Profile) -> str:
    lines = []
    for key, value in profile.to_dict().items():
        if isinstance(value, dict):
            for sub, v in value.items():
                v = " ".join(str(x) for x in v) if isinstance(v, (list, tuple)) else v
                lines.append(f"{key}.{sub}={v}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
