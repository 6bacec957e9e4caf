"""Task heads fine-tuned on top of a pretrained backbone.

Every head pools the backbone's per-cube features and adds one fully
connected layer:

* classification: mean-pool, dropout, FC to class logits;
* one-shot: FC to an embedding on the unit sphere, trained with a
  supervised contrastive loss and evaluated against exemplar sets;
* jigsaw: cube-level piece shuffling, per-slot pooled features, FC to
  piece-origin logits; the normality score is the smallest diagonal entry
  of the slot-by-origin probability matrix;
* supervised anomaly: two-class FC trained with class-weighted CE on
  augmented keypoints; the score is P(normal).

Fine-tuning works on a deep copy, so the pretrained backbone is never
modified. ``freeze_backbone`` trains the head alone.
"""
from __future__ import annotations

import copy
import dataclasses
import logging

import numpy as np

from .backbone import Backbone
from .config import Profile
from .data import augment, flip_pairs, joint_names
from .heatmap import build_heatmap
from .kernel import Tensor, functional as F, make_rng, no_grad, where
from .kernel.nn import Linear, Module
from .training import make_state, run_epochs

log = logging.getLogger(__name__)

NORMAL, ABNORMAL = 0, 1


class PooledHead(Module):
    """Mean over the cube axis, dropout, then a linear map."""

    def __init__(self, hidden: int, n_out: int, rng, dropout: float = 0.0):
        self.fc = Linear(hidden, n_out, rng)
        self.dropout = dropout

    def forward(self, feats: Tensor, rng=None) -> Tensor:
        x = feats.mean(axis=-2)
        x = F.dropout(x, self.dropout, rng, training=self.training)
        return self.fc(x)


class Finetuned(Module):
    """A backbone copy plus a task head."""

    def __init__(self, backbone: Backbone, head: Module, task: str, freeze: bool = False, **meta):
        self.backbone = copy.deepcopy(backbone)
        self.head = head
        self.task = task
        self.freeze = freeze
        self.meta = meta

    def trainable(self) -> dict:
        if self.freeze:
            return self.head.named_parameters("head.")
        return self.named_parameters()

    def features_of_cubes(self, c) -> Tensor:
        if self.freeze:
            with no_grad():
                return Tensor(self.backbone.forward_cubes(c).data)
        return self.backbone.forward_cubes(c)

    def features(self, u) -> Tensor:
        return self.features_of_cubes(self.backbone.cubes(u))


def _fit(model: Finetuned, cfg, n_items: int, step_fn, seed: int, salt: int, on_epoch=None):
    model.train()
    state = make_state(model.trainable(), cfg, n_items)
    run_epochs(state, n_items, cfg.batch_size, cfg.epochs, step_fn, seed * 1000 + salt, on_epoch=on_epoch)
    model.eval()
    return state


def _batched(fn, u, batch_size: int = 64):
    with no_grad():
        return np.concatenate([fn(u[i:i + batch_size]) for i in range(0, len(u), batch_size)])


# -- classification -------------------------------------------------------
def finetune_classify(backbone: Backbone, heatmaps, labels, profile: Profile, seed: int,
                      num_classes: int | None = None, cfg=None, on_epoch=None) -> Finetuned:
    cfg = cfg or profile.classify
    heatmaps = np.asarray(heatmaps)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    rng = make_rng([seed, 301])
    head = PooledHead(backbone.cfg.hidden, num_classes, rng, cfg.dropout)
    model = Finetuned(backbone, head, "classify", cfg.freeze_backbone, num_classes=num_classes)

    def step(idx, erng, _):
        logits = model.head(model.features(heatmaps[idx]), erng)
        loss = F.cross_entropy(logits, labels[idx])
        return loss, {"accuracy": float((np.argmax(logits.data, -1) == labels[idx]).mean())}

    model.state = _fit(model, cfg, len(heatmaps), step, seed, 1, on_epoch)
    return model


def class_probabilities(model: Finetuned, heatmaps) -> np.ndarray:
    model.eval()
    return _batched(lambda u: F.softmax(model.head(model.features(u)), axis=-1).data, np.asarray(heatmaps))


def classify(model: Finetuned, heatmaps) -> np.ndarray:
    return np.argmax(class_probabilities(model, heatmaps), axis=-1)


# -- one-shot -------------------------------------------------------------
class EmbedHead(Module):
    def __init__(self, hidden: int, dim: int, rng):
        self.fc = Linear(hidden, dim, rng)

    def forward(self, feats: Tensor, rng=None) -> Tensor:
        return F.l2_normalize(self.fc(feats.mean(axis=-2)), axis=-1)


def supcon_loss(z, labels, temperature: float) -> Tensor:
    """Supervised contrastive loss over L2-normalized rows of ``z``.

    For anchor a with positives P(a): -mean_{p in P(a)} log softmax_{b != a}(s(a, b) / t)[p],
    averaged over anchors that have at least one positive.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    labels = np.asarray(labels)
    n = len(labels)
    sim = (z @ z.transpose(1, 0)) * (1.0 / temperature)
    eye = np.eye(n, dtype=bool)
    sim = where(eye, np.asarray(-1e9, dtype=sim.dtype), sim)
    lp = F.log_softmax(sim, axis=-1)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    npos = pos.sum(axis=1)
    anchors = npos > 0
    if not anchors.any():
        raise ValueError("supervised contrastive loss needs at least two items of one class")
    w = np.where(pos, 1.0 / np.maximum(npos, 1)[:, None], 0.0) / anchors.sum()
    return -(lp * w.astype(lp.dtype)).sum()


def class_batch(labels: np.ndarray, batch_size: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Indices for one contrastive batch: distinct classes, several samples each.

    ``batch_size // m`` classes are drawn, or every class when there are
    fewer, in which case each class contributes ``batch_size // classes``
    samples. Classes smaller than that are sampled with replacement.
    """
    classes = np.unique(labels)
    k = min(max(batch_size // m, 1), len(classes))
    per = max(m, batch_size // k)
    out = []
    for c in rng.choice(classes, size=k, replace=False):
        members = np.flatnonzero(labels == c)
        small = len(members) < per
        if small:
            log.warning("class %s has %d samples, fewer than %d; sampling with replacement", c, len(members), per)
        out.append(rng.choice(members, size=per, replace=small))
    return np.concatenate(out)


def train_oneshot(backbone: Backbone, heatmaps, labels, profile: Profile, seed: int, cfg=None,
                  on_epoch=None) -> Finetuned:
    cfg = cfg or profile.oneshot
    heatmaps = np.asarray(heatmaps)
    labels = np.asarray(labels, dtype=np.int64)
    rng = make_rng([seed, 302])
    model = Finetuned(backbone, EmbedHead(backbone.cfg.hidden, cfg.embed_dim, rng), "oneshot",
                      cfg.freeze_backbone, train_classes=sorted(int(c) for c in np.unique(labels)))

    def step(_idx, erng, __):
        idx = class_batch(labels, cfg.batch_size, cfg.samples_per_class, erng)
        z = model.head(model.features(heatmaps[idx]))
        return supcon_loss(z, labels[idx], cfg.temperature), {}

    model.state = _fit(model, cfg, len(heatmaps), step, seed, 2, on_epoch)
    return model


def embed(model: Finetuned, heatmaps) -> np.ndarray:
    model.eval()
    return _batched(lambda u: model.head(model.features(u)).data, np.asarray(heatmaps))


def nearest_exemplar_class(queries: np.ndarray, exemplars: np.ndarray, exemplar_labels) -> np.ndarray:
    """Class whose exemplar set has the highest mean cosine similarity to each query."""
    exemplar_labels = np.asarray(exemplar_labels)
    classes = np.unique(exemplar_labels)
    q = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    e = exemplars / np.linalg.norm(exemplars, axis=1, keepdims=True)
    sim = q @ e.T
    means = np.stack([sim[:, exemplar_labels == c].mean(axis=1) for c in classes], axis=1)
    return classes[np.argmax(means, axis=1)]


def oneshot_eval(model: Finetuned, heatmaps, labels, exemplars: int = 20, seed: int = 0) -> float:
    """Accuracy on held-out classes; ``exemplars`` items per class form the reference sets."""
    heatmaps = np.asarray(heatmaps)
    labels = np.asarray(labels)
    rng = make_rng([seed, 303])
    ref, query = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        if len(members) <= exemplars:
            raise ValueError(f"class {c} needs more than {exemplars} items for exemplars plus queries")
        ref.append(members[:exemplars])
        query.append(members[exemplars:])
    ref, query = np.concatenate(ref), np.concatenate(query)
    z = embed(model, heatmaps)
    pred = nearest_exemplar_class(z[query], z[ref], labels[ref])
    return float((pred == labels[query]).mean())


# -- jigsaw ---------------------------------------------------------------
def piece_layout(grid_rows: int, grid_cols: int, row_bands: int, col_bands: int) -> np.ndarray:
    """(pieces, cubes_per_piece) flat cube indices; pieces and cubes in row-major order."""
    if grid_rows % row_bands or grid_cols % col_bands:
        raise ValueError(f"a {grid_rows}x{grid_cols} cube grid cannot be cut into {row_bands}x{col_bands} "
                         "equal pieces")
    ph, pw = grid_rows // row_bands, grid_cols // col_bands
    grid = np.arange(grid_rows * grid_cols).reshape(row_bands, ph, col_bands, pw)
    return grid.transpose(0, 2, 1, 3).reshape(row_bands * col_bands, ph * pw)


def shuffle_pieces(cubes: np.ndarray, layout: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Slot s receives the cubes of piece ``perm[s]``; ``cubes`` is (..., K, cube...)."""
    out = cubes.copy()
    out[..., layout.ravel(), :, :, :, :] = cubes[..., layout[perm].ravel(), :, :, :, :]
    return out


class JigsawHead(Module):
    def __init__(self, hidden: int, pieces: int, layout: np.ndarray, rng, dropout: float = 0.0):
        self.fc = Linear(hidden, pieces, rng)
        self.layout = layout
        self.dropout = dropout

    def forward(self, feats: Tensor, rng=None) -> Tensor:
        n = feats.shape[0]
        slots = feats[:, self.layout.ravel()].reshape(n, self.layout.shape[0], self.layout.shape[1], -1)
        x = F.dropout(slots.mean(axis=2), self.dropout, rng, training=self.training)
        return self.fc(x)  # (N, slot, origin)


def jigsaw_layout(profile: Profile, cfg=None) -> np.ndarray:
    cfg = cfg or profile.jigsaw
    geom = profile.geometry
    layout = piece_layout(geom.grid_rows, geom.grid_cols, cfg.row_bands, cfg.col_bands)
    if layout.shape[0] != cfg.pieces:
        raise ValueError(f"{cfg.row_bands}x{cfg.col_bands} bands give {layout.shape[0]} pieces, "
                         f"config asks for {cfg.pieces}")
    return layout


def jigsaw_train(backbone: Backbone, heatmaps, profile: Profile, seed: int, cfg=None, on_epoch=None) -> Finetuned:
    """Fit the piece-origin head on normal data only."""
    cfg = cfg or profile.jigsaw
    heatmaps = np.asarray(heatmaps)
    layout = jigsaw_layout(profile, cfg)
    p = layout.shape[0]
    rng = make_rng([seed, 304])
    model = Finetuned(backbone, JigsawHead(backbone.cfg.hidden, p, layout, rng, cfg.dropout), "jigsaw",
                      cfg.freeze_backbone)

    def step(idx, erng, _):
        c = model.backbone.cubes(heatmaps[idx])
        perms = np.stack([erng.permutation(p) for _ in idx])
        c = np.stack([shuffle_pieces(ci, layout, pi) for ci, pi in zip(c, perms)])
        logits = model.head(model.features_of_cubes(c), erng)
        loss = F.cross_entropy(logits, perms) * float(p)  # summed over slots, mean over items
        return loss, {"accuracy": float((np.argmax(logits.data, -1) == perms).mean())}

    model.state = _fit(model, cfg, len(heatmaps), step, seed, 3, on_epoch)
    return model


def jigsaw_matrix(model: Finetuned, heatmaps) -> np.ndarray:
    """Unshuffled slot-by-origin probabilities, (N, P, P)."""
    model.eval()
    return _batched(lambda u: F.softmax(model.head(model.features(u)), axis=-1).data, np.asarray(heatmaps))


def diagonal_score(prob: np.ndarray) -> np.ndarray:
    return np.diagonal(prob, axis1=-2, axis2=-1).min(axis=-1)


def jigsaw_score(model: Finetuned, heatmaps) -> np.ndarray:
    return diagonal_score(jigsaw_matrix(model, heatmaps))


# -- supervised anomaly ---------------------------------------------------
def anomaly_heatmaps(poses, profile: Profile, rng: np.random.Generator | None = None, cfg=None) -> np.ndarray:
    """Heatmaps for normalized poses, augmented when ``rng`` is given."""
    cfg = cfg or profile.anomaly
    h, w = profile.height, profile.width
    pairs = flip_pairs(joint_names(profile.joints))
    out = []
    for p in poses:
        if rng is not None:
            p = augment(p, rng, h, w, pairs, (cfg.scale_low, cfg.scale_high), cfg.jitter_ratio * min(h, w),
                        cfg.flip_prob)
        out.append(build_heatmap(p, h, w, profile.sigma, profile.use_confidence))
    return np.stack(out)


def supervised_anomaly_train(backbone: Backbone, poses, abnormal, profile: Profile, seed: int, cfg=None,
                             on_epoch=None) -> Finetuned:
    cfg = cfg or profile.anomaly
    y = np.asarray(abnormal, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("supervised anomaly training needs both normal and abnormal samples")
    rng = make_rng([seed, 305])
    model = Finetuned(backbone, PooledHead(backbone.cfg.hidden, 2, rng, cfg.dropout), "anomaly",
                      cfg.freeze_backbone)
    weights = np.array([1.0, cfg.abnormal_weight])

    def step(idx, erng, _):
        u = anomaly_heatmaps([poses[i] for i in idx], profile, erng, cfg)
        logits = model.head(model.features(u), erng)
        return F.cross_entropy(logits, y[idx], class_weights=weights), {}

    model.state = _fit(model, cfg, len(poses), step, seed, 4, on_epoch)
    return model


def anomaly_score(model: Finetuned, heatmaps) -> np.ndarray:
    """Probability of the normal class; low means anomalous."""
    return class_probabilities(model, heatmaps)[:, NORMAL]


def with_epochs(cfg, epochs):
    return dataclasses.replace(cfg, epochs=epochs)


__all__ = ["EmbedHead", "Finetuned", "JigsawHead", "PooledHead", "anomaly_heatmaps", "anomaly_score",
           "class_batch", "class_probabilities", "classify", "diagonal_score", "embed", "finetune_classify",
           "jigsaw_layout", "jigsaw_matrix", "jigsaw_score", "jigsaw_train", "nearest_exemplar_class",
           "oneshot_eval", "piece_layout", "shuffle_pieces", "supcon_loss", "supervised_anomaly_train",
           "train_oneshot"]
