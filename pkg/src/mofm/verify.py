"""Self-checks behind ``mofm verify``.

Each suite returns ``Check`` records; a suite passes when all of its
checks do. The pipeline suite runs a miniature end-to-end job twice and
demands byte-identical artifacts.
"""
from __future__ import annotations

import json
import logging
import math
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import Profile
from .cubes import assemble, segment
from .heatmap import PoseSequence, build_heatmap, condense
from .kernel import Tensor, default_dtype, functional as F, make_rng
from .kernel import tensor as T
from .kernel.gradcheck import check_gradients, leaf, projected_loss
from .masking import MaskParams, generate_mask
from .metrics import auc_roc, frame_aggregate

log = logging.getLogger(__name__)

DTYPES = (np.float32, np.float64)


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}: {self.name}" + (f" ({self.detail})" if self.detail else "")


# -- gradient catalog -----------------------------------------------------
def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def _unary(op, positive=False, kink=False):
    def make(rng, dt):
        x = rng.uniform(0.5, 2.0, (3, 4)) if positive else _away_from_zero(rng, (3, 4)) if kink else \
            rng.standard_normal((3, 4))
        x = leaf(x, dt)
        _, probe = projected_loss(op(x), rng)
        return lambda: probe(op(x)), {"x": x}
    return make


def _binary(op, b_shape=(1, 4), positive_b=False):
    def make(rng, dt):
        a = leaf(rng.standard_normal((3, 4)), dt)
        b = leaf(rng.uniform(0.5, 2.0, b_shape) if positive_b else rng.standard_normal(b_shape), dt)
        _, probe = projected_loss(op(a, b), rng)
        return lambda: probe(op(a, b)), {"a": a, "b": b}
    return make


def _conv3d(dense: bool):
    def make(rng, dt):
        shape = (2, 3, 4, 5, 5) if dense else (2, 3, 6, 9, 9)
        x = leaf(rng.standard_normal(shape), dt)
        w = leaf(rng.standard_normal((4, 3, 3, 3, 3)) * 0.3, dt)
        b = leaf(rng.standard_normal(4), dt)
        stride = (1, 2, 2) if rng.random() < 0.5 else (1, 1, 1)
        limit = F.DENSE_LIMIT if dense else 0

        def f():
            saved, F.DENSE_LIMIT = F.DENSE_LIMIT, limit
            try:
                return F.conv3d(x, w, b, stride, 1)
            finally:
                F.DENSE_LIMIT = saved

        _, probe = projected_loss(f(), rng)
        return lambda: probe(f()), {"x": x, "w": w, "b": b}
    return make


def _conv2d(rng, dt):
    x = leaf(rng.standard_normal((2, 3, 6, 7)), dt)
    w = leaf(rng.standard_normal((2, 3, 3, 3)) * 0.3, dt)
    b = leaf(rng.standard_normal(2), dt)
    _, probe = projected_loss(F.conv2d(x, w, b, 1, 1), rng)
    return lambda: probe(F.conv2d(x, w, b, 1, 1)), {"x": x, "w": w, "b": b}


def _conv_t(rng, dt):
    x = leaf(rng.standard_normal((2, 3, 3, 4)), dt)
    w = leaf(rng.standard_normal((3, 2, 4, 4)) * 0.3, dt)
    b = leaf(rng.standard_normal(2), dt)
    _, probe = projected_loss(F.conv2d_transposed(x, w, b, 2, 1), rng)
    return lambda: probe(F.conv2d_transposed(x, w, b, 2, 1)), {"x": x, "w": w, "b": b}


def _linear(rng, dt):
    x, w, b = (leaf(rng.standard_normal(s), dt) for s in ((2, 3, 5), (4, 5), (4,)))
    _, probe = projected_loss(F.linear(x, w, b), rng)
    return lambda: probe(F.linear(x, w, b)), {"x": x, "w": w, "b": b}


def _layer_norm(rng, dt):
    x, g, b = (leaf(rng.standard_normal(s), dt) for s in ((3, 6), (6,), (6,)))
    _, probe = projected_loss(F.layer_norm(x, g, b), rng)
    return lambda: probe(F.layer_norm(x, g, b)), {"x": x, "g": g, "b": b}


def _attention(rng, dt):
    q, k, v = (leaf(rng.standard_normal((2, 3, 4)), dt) for _ in range(3))
    mask = rng.random((1, 1, 3, 3)) < 0.8
    mask[..., 0] = True
    _, probe = projected_loss(F.multi_head_attention(q, k, v, 2, mask), rng)
    return lambda: probe(F.multi_head_attention(q, k, v, 2, mask)), {"q": q, "k": k, "v": v}


def _dropout(rng, dt):
    x = leaf(rng.standard_normal((3, 5)), dt)
    seed = int(rng.integers(1 << 30))
    _, probe = projected_loss(x, rng)
    return lambda: probe(F.dropout(x, 0.4, make_rng(seed), True)), {"x": x}


def _getitem(rng, dt):
    x = leaf(rng.standard_normal((4, 5)), dt)
    idx = (np.array([0, 2, 2, 3]), np.array([1, 1, 1, 4]))
    _, probe = projected_loss(x[idx], rng)
    return lambda: probe(x[idx]), {"x": x}


def _concat(rng, dt):
    a, b = leaf(rng.standard_normal((2, 3)), dt), leaf(rng.standard_normal((2, 2)), dt)
    _, probe = projected_loss(T.concat([a, b], axis=1), rng)
    return lambda: probe(T.concat([a, b], axis=1)), {"a": a, "b": b}


def _where(rng, dt):
    a, b = leaf(rng.standard_normal((3, 4)), dt), leaf(rng.standard_normal((1, 4)), dt)
    cond = rng.random((3, 4)) < 0.5
    _, probe = projected_loss(T.where(cond, a, b), rng)
    return lambda: probe(T.where(cond, a, b)), {"a": a, "b": b}


def _losses(kind):
    def make(rng, dt):
        x = leaf(rng.standard_normal((4, 5)) * 2.0, dt)
        if kind == "smooth_l1":
            t = x.data + _away_from_zero(rng, (4, 5), 0.05) * 0.8
            return lambda: F.smooth_l1(x, Tensor(t, dtype=dt)), {"x": x}
        if kind == "cross_entropy":
            tgt = rng.integers(0, 5, 4)
            w = rng.uniform(0.5, 2.0, 4)
            return lambda: F.cross_entropy(x, tgt, weights=w, class_weights=np.linspace(1, 2, 5)), {"x": x}
        return lambda: F.kl_to_uniform(x).sum(), {"x": x}
    return make


def _gumbel(rng, dt):
    from .dved import gumbel_noise, gumbel_softmax

    x = leaf(rng.standard_normal((3, 6)), dt)
    g = gumbel_noise(rng, x.shape)
    _, probe = projected_loss(x, rng)
    return lambda: probe(gumbel_softmax(x, 0.7, noise=g)[0]), {"x": x}


def _tiny_profile() -> Profile:
    from .config import apply_overrides, desk_profile

    return apply_overrides(desk_profile(), {
        "joints": 5, "frames": 4, "window_stride": 2, "height": 8, "width": 8,
        "dved.hidden": 4, "dved.vocab": 8, "dved.code_dim": 4,
        "backbone.hidden": 8, "backbone.heads": 2, "backbone.ffn": 16, "backbone.layers": 1,
        "backbone.max_seq": 4, "backbone.embed_res_layers": 1,
    })


def _sample_heatmap(profile: Profile, rng) -> np.ndarray:
    coords = rng.uniform(0, profile.width - 1, (profile.frames, profile.joints, 2))
    return build_heatmap(PoseSequence(coords), profile.height, profile.width, profile.sigma)[None]


def _random_biases(model, rng) -> None:
    # zero-initialised biases put ReLU inputs exactly on the kink wherever the activations vanish
    for name, p in model.named_parameters().items():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.1, p.shape)


def _dved_loss(rng, dt):
    from .dved import DVED, dved_loss, gumbel_noise

    prof = _tiny_profile()
    model = DVED(prof.joints, prof.frames, prof.geometry, prof.dved, rng)
    # unit-scale codes so the encoder path carries a gradient well above round-off
    model.codebook.data[...] = rng.standard_normal(model.codebook.shape)
    _random_biases(model, rng)
    u = _sample_heatmap(prof, rng).astype(dt)
    noise = gumbel_noise(rng, (1, prof.num_cubes, prof.dved.vocab))
    params = model.named_parameters()
    return lambda: dved_loss(model, u, condense(u), 0.5, noise=noise)[0], params


def _pretrain_step(rng, dt):
    from .backbone import Backbone, pretrain_step

    prof = _tiny_profile()
    model = Backbone(prof.joints, prof.frames, prof.geometry, prof.dved.vocab, prof.backbone, rng)
    _random_biases(model, rng)
    u = np.concatenate([_sample_heatmap(prof, rng) for _ in range(2)]).astype(dt)
    tokens = rng.integers(0, prof.dved.vocab, (2, prof.num_cubes))
    masks = np.zeros((2, prof.geometry.grid_rows, prof.geometry.grid_cols), dtype=np.uint8)
    masks[0, 0, 1] = masks[1, 1, 0] = masks[1, 1, 1] = 1
    params = model.named_parameters()
    return lambda: pretrain_step(model, u, tokens, masks)[0], params


GRAD_CASES = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(lambda a, b: a - b, (3, 1)),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b, positive_b=True),
    "power": _unary(lambda x: x ** 3),
    "exp": _unary(lambda x: x.exp()),
    "log": _unary(lambda x: x.log(), positive=True),
    "sqrt": _unary(lambda x: x.sqrt(), positive=True),
    "matmul": _binary(lambda a, b: a @ b, (4, 2)),
    "sum": _unary(lambda x: x.sum(axis=1)),
    "mean": _unary(lambda x: x.mean(axis=0, keepdims=True)),
    "max": _unary(lambda x: x.max(axis=1)),
    "reshape_transpose": _unary(lambda x: x.reshape(2, 6).transpose(1, 0)),
    "getitem": _getitem,
    "concat": _concat,
    "where": _where,
    "relu": _unary(F.relu, kink=True),
    "gelu": _unary(F.gelu),
    "softmax": _unary(lambda x: F.softmax(x, axis=-1)),
    "log_softmax": _unary(lambda x: F.log_softmax(x, axis=0)),
    "l2_normalize": _unary(F.l2_normalize),
    "dropout": _dropout,
    "linear": _linear,
    "layer_norm": _layer_norm,
    "conv3d_dense": _conv3d(True),
    "conv3d_im2col": _conv3d(False),
    "conv2d": _conv2d,
    "conv2d_transposed": _conv_t,
    "multi_head_attention": _attention,
    "smooth_l1": _losses("smooth_l1"),
    "cross_entropy": _losses("cross_entropy"),
    "kl_to_uniform": _losses("kl"),
    "gumbel_softmax": _gumbel,
    "dved_loss": _dved_loss,
    "pretrain_step": _pretrain_step,
}
COMPOSED = {"dved_loss", "pretrain_step"}


def gradient_suite(instances: int = 10, seed: int = 0, names=None, max_coords: int = 40) -> list:
    out = []
    for name in names or GRAD_CASES:
        for dt in DTYPES:
            worst, ok = 0.0, True
            for i in range(instances):
                key = [seed, i, sum(map(ord, name))]
                ref = None
                if dt is not np.float64:
                    with default_dtype(np.float64):
                        ref = GRAD_CASES[name](make_rng(key), np.float64)
                rng = make_rng(key)
                with default_dtype(dt):
                    fn, inputs = GRAD_CASES[name](rng, dt)
                    res = check_gradients(fn, inputs, name, rng=rng, reference=ref,
                                          max_coords=max_coords if name in COMPOSED else None)
                worst = max(worst, res.rel_error)
                ok &= res.passed
            out.append(Check("gradients", f"{name} [{np.dtype(dt).name}]", ok,
                             f"max rel err {worst:.2e} over {instances}"))
    return out


# -- statistical and oracle suites ---------------------------------------
def gumbel_suite(seed: int = 0, draws: int = 100_000) -> list:
    from .dved import gumbel_softmax

    rng = make_rng([seed, 11])
    logits = np.log(np.array([[0.7, 0.2, 0.1]]).repeat(draws, axis=0))
    y, z = gumbel_softmax(Tensor(logits, dtype=np.float64), 1.0, rng=rng)
    freq = np.bincount(z, minlength=3) / draws
    sums = np.abs(y.data.sum(axis=-1) - 1.0).max()
    return [Check("gumbel", "hard-sample frequencies within 0.01", bool(np.abs(freq - [0.7, 0.2, 0.1]).max() <= 0.01),
                  f"freq {np.round(freq, 4).tolist()}"),
            Check("gumbel", "soft samples on the simplex", bool(sums <= 1e-6), f"max |sum-1| {sums:.1e}")]


def reference_mask(kp, h, w, ds, min_n, max_n, rng) -> np.ndarray:
    """Literal loop-by-loop reference masking, with the draw clamp."""
    total_rows = h // ds + (1 if h % ds else 0)
    total_cols = w // ds + (1 if w % ds else 0)
    final = np.zeros((total_rows, total_cols), dtype=np.uint8)
    total_points = len(kp)
    if total_points == 0:
        return final
    alpha = max(1, min(min_n, total_points))
    beta = min(max_n, total_points)
    num = int(rng.integers(alpha, beta + 2))
    num = min(num, total_points)
    selected = rng.choice(total_points, size=num, replace=False)
    for x, y in (kp[i] for i in selected):
        if not (math.isfinite(x) and math.isfinite(y)):
            continue
        col, row = math.floor(x / ds), math.floor(y / ds)
        if 0 <= row < total_rows and 0 <= col < total_cols:
            final[row, col] = 1
    return final


def masking_suite(seed: int = 0, cases: int = 1000) -> list:
    bad = 0
    for i in range(cases):
        rng = make_rng([seed, i, 21])
        h, w, ds = (int(v) for v in rng.integers(4, 40, 3))
        ds = max(1, ds // 4)
        n = int(rng.integers(0, 60))
        kp = rng.uniform(-5, max(h, w) + 5, (n, 2))
        lo = int(rng.integers(1, 20))
        hi = lo + int(rng.integers(0, 30))
        a = generate_mask(kp, MaskParams(lo, hi, ds, h, w), make_rng([seed, i, 22]))
        b = reference_mask(kp, h, w, ds, lo, hi, make_rng([seed, i, 22]))
        bad += int(a.shape != b.shape or not np.array_equal(a, b))
    return [Check("masking", f"matches pseudocode oracle on {cases} cases", bad == 0, f"{bad} mismatches")]


def geometry_suite(profile: Profile, seed: int = 0, volumes: int = 100) -> list:
    from .config import paper_profile

    rng = make_rng([seed, 31])
    geom = profile.geometry
    ok = True
    for _ in range(volumes):
        u = rng.standard_normal((profile.joints, profile.frames, profile.height, profile.width)).astype(np.float32)
        ok &= bool(np.array_equal(assemble(segment(u, geom), geom), u))
    p = paper_profile()
    c = segment(np.zeros((p.joints, p.frames, p.height, p.width), dtype=np.float32), p.geometry)
    k = (profile.height // profile.patch) * (profile.width // profile.patch)
    return [Check("geometry", f"segment/assemble roundtrip on {volumes} volumes", ok),
            Check("geometry", "reference cube set is 324 x 17x48x4x4", c.shape == (324, 17, 48, 4, 4), str(c.shape)),
            Check("geometry", f"{profile.name} cube count matches HW/Ds^2", geom.num_cubes == k, f"K={geom.num_cubes}")]


def heatmap_suite(profile: Profile, seed: int = 0) -> list:
    rng = make_rng([seed, 41])
    s = profile.sigma
    x, y = 7.0, 9.0
    u = build_heatmap(PoseSequence(np.array([[[x, y]]])), 24, 24, s, dtype=np.float64)
    at_sigma = build_heatmap(PoseSequence(np.array([[[x + s, y]]])), 24, 24, s, dtype=np.float64)[0, 0, 9, 7]
    vol = rng.random((profile.joints, profile.frames, 6, 5)).astype(np.float32)
    brute = np.array([[[max(vol[j, f, h, w] for j in range(vol.shape[0])) for w in range(5)] for h in range(6)]
                      for f in range(vol.shape[1])])
    return [Check("heatmap", "joint-centred pixel is 1", u[0, 0, 9, 7] == 1.0),
            Check("heatmap", "value at distance sigma is exp(-1/2)", abs(at_sigma - math.exp(-0.5)) <= 1e-6,
                  f"{at_sigma:.9f}"),
            Check("heatmap", "condense equals brute-force max", bool(np.array_equal(condense(vol), brute)))]


def brute_auc(scores, labels) -> float:
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def scoring_suite(seed: int = 0) -> list:
    from .heads import diagonal_score

    rng = make_rng([seed, 51])
    auc_ok, agg_ok = True, True
    for _ in range(50):
        n = int(rng.integers(4, 60))
        s = np.round(rng.random(n), 1)
        lab = rng.random(n) < 0.4
        lab[0], lab[1] = True, False
        auc_ok &= abs(auc_roc(s, lab) - brute_auc(s, lab)) <= 1e-9
        persons = {f: list(rng.random(int(rng.integers(0, 4)))) for f in range(10)}
        expect = [min(v) if v else 1.0 for v in persons.values()]
        agg_ok &= bool(np.array_equal(frame_aggregate(persons, 10), expect))
    logits = rng.standard_normal((5, 12, 12))
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    simplex = bool(np.allclose(p.sum(-1), 1.0) and (p >= 0).all())
    diag = np.allclose(diagonal_score(p), [min(m[i, i] for i in range(12)) for m in p])
    return [Check("scoring", "AUC matches pairwise oracle", bool(auc_ok)),
            Check("scoring", "frame score is min over persons", bool(agg_ok)),
            Check("scoring", "jigsaw rows are simplex points, score is min diagonal", simplex and bool(diag))]


def format_suite(seed: int = 0) -> list:
    rng = make_rng([seed, 61])
    checks = []
    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        t = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.int64)}
        io.write_checkpoint(d / "c.mofm", {"k": 1}, t)
        cfg, back = io.read_checkpoint(d / "c.mofm")
        checks.append(Check("formats", "checkpoint roundtrip", cfg == {"k": 1} and all(
            np.array_equal(back[k], v) and back[k].dtype == v.dtype for k, v in t.items())))
        book = rng.standard_normal((8, 3)).astype(np.float32)
        io.write_codebook(d / "b.mbk", book)
        checks.append(Check("formats", "codebook roundtrip", bool(np.array_equal(io.read_codebook(d / "b.mbk"), book))))
        img = rng.random((5, 7))
        io.write_pgm(d / "f.pgm", img)
        checks.append(Check("formats", "PGM roundtrip", bool(np.array_equal(io.read_pgm(d / "f.pgm"),
                                                                             np.round(img * 255).astype(np.uint8)))))
    return checks


# -- end-to-end -----------------------------------------------------------
def pipeline_suite(profile: Profile, seed: int = 0) -> list:
    """Run a miniature pipeline twice through the CLI and compare every artifact byte for byte."""
    from .cli import main

    overrides = ["dved.epochs=1", "backbone.epochs=1", "classify.epochs=1", "oneshot.epochs=1",
                 "jigsaw.epochs=1", "anomaly.epochs=1", "oneshot.exemplars=2"]
    runs = []
    for _ in range(2):
        d = Path(tempfile.mkdtemp(prefix="mofm-verify-"))
        g = ["--profile", profile.name, "--seed", str(seed)] + sum((["--set", o] for o in overrides), [])
        steps = [
            ["gen-data", "--per-class", "6", "--anomaly-fraction", "0.25", "--out", str(d / "corpus.jsonl")],
            ["train-dved", "--in", str(d / "corpus.jsonl"), "--out", str(d / "dved.mofm")],
            ["tokenize", "--in", str(d / "corpus.jsonl"), "--dved", str(d / "dved.mofm"), "--out", str(d / "tok.jsonl")],
            ["pretrain", "--in", str(d / "corpus.jsonl"), "--dved", str(d / "dved.mofm"), "--out", str(d / "bb.mofm")],
            ["finetune", "classify", "--in", str(d / "corpus.jsonl"), "--backbone", str(d / "bb.mofm"),
             "--out", str(d / "cls.mofm")],
            ["finetune", "jigsaw", "--in", str(d / "corpus.jsonl"), "--backbone", str(d / "bb.mofm"),
             "--out", str(d / "jig.mofm")],
            ["finetune", "anomaly", "--in", str(d / "corpus.jsonl"), "--backbone", str(d / "bb.mofm"),
             "--out", str(d / "anom.mofm")],
            ["score", "--in", str(d / "corpus.jsonl"), "--model", str(d / "anom.mofm"), "--out", str(d / "s.csv")],
            ["render", "--in", str(d / "corpus.jsonl"), "--frame", "0", "--out", str(d / "f.pgm")],
        ]
        codes = [main(s[:1] + (s[1:2] if s[0] == "finetune" else []) + g + s[2 if s[0] == "finetune" else 1:])
                 for s in steps]
        runs.append((d, codes))
    (d1, c1), (d2, c2) = runs
    names = sorted(p.name for p in d1.iterdir() if not p.name.endswith(".manifest.json"))
    same = [n for n in names if (d1 / n).read_bytes() == (d2 / n).read_bytes()]
    has_manifest = all((d1 / (n + ".manifest.json")).is_file() for n in names)
    # replay each manifest's argv in step order; outputs must hash to what it recorded
    replayed = bad = 0
    for step in steps:
        out = Path(step[step.index("--out") + 1])
        man_path = d2 / (out.name + ".manifest.json")
        if not man_path.is_file():
            bad += 1
            continue
        man = json.loads(man_path.read_text(encoding="utf-8"))
        code = main(man["argv"])
        replayed += 1
        bad += int(code != 0 or any(io.file_digest(o) != h for o, h in man["outputs"].items()))
    for d in (d1, d2):
        shutil.rmtree(d, ignore_errors=True)
    return [Check("pipeline", "every CLI step exits 0", all(c == 0 for c in c1 + c2), f"codes {c1}"),
            Check("pipeline", "reruns are byte-identical", len(same) == len(names) and len(names) > 0,
                  f"{len(same)}/{len(names)} artifacts identical"),
            Check("pipeline", "every artifact has a manifest", has_manifest and len(names) > 0),
            Check("pipeline", "manifest argv reproduces recorded hashes", bad == 0 and replayed == len(steps),
                  f"{replayed - bad}/{len(steps)} replays matched")]


def run_all(profile: Profile, seed: int = 0, quick: bool = False, report=print) -> list:
    suites = [
        ("gradients", lambda: gradient_suite(3 if quick else 10, seed)),
        ("gumbel", lambda: gumbel_suite(seed)),
        ("masking", lambda: masking_suite(seed)),
        ("geometry", lambda: geometry_suite(profile, seed)),
        ("heatmap", lambda: heatmap_suite(profile, seed)),
        ("scoring", lambda: scoring_suite(seed)),
        ("formats", lambda: format_suite(seed)),
        ("pipeline", lambda: pipeline_suite(profile, seed)),
    ]
    out = []
    for name, fn in suites:
        t0 = time.time()
        checks = fn()
        for c in checks:
            report(c.line())
        log.info("%s suite took %.1fs", name, time.time() - t0)
        out.extend(checks)
    return out


__all__ = ["Check", "GRAD_CASES", "brute_auc", "gradient_suite", "reference_mask", "run_all"]
