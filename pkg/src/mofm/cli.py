"""Command-line entry point: ``mofm <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io

log = logging.getLogger("mofm")

TASKS = ("classify", "oneshot", "jigsaw", "anomaly")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--profile", choices=("paper", "desk"), default=None,
                   help="model profile (default: the input checkpoint's, else desk)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="key=value file of profile overrides")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="single override, repeatable")
    g.add_argument("--out", help="output path")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="mofm", description="Motion tokenizer, backbone and task heads.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    p = add("gen-data", "write a synthetic keypoint corpus")
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--anomaly-fraction", type=float, default=0.0)
    p.add_argument("--frames", type=int, help="frames per sequence (default: profile frames)")

    p = add("train-dved", "train the tokenizer and export its codebook")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--epochs", type=float)
    p.add_argument("--codebook", help="codebook path (default: <out>.mbk)")

    p = add("tokenize", "write token ids for every window")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--dved", required=True)

    p = add("pretrain", "masked token pretraining of the backbone")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--dved", required=True)
    p.add_argument("--tokens", help="precomputed token file (default: tokenize on the fly)")
    p.add_argument("--epochs", type=float)
    p.add_argument("--resume", help="continue from a backbone checkpoint")
    p.add_argument("--stop-epoch", type=int, help="stop after this many epochs in total")

    p = sub.add_parser("finetune", help="fine-tune a task head", description="fine-tune a task head")
    tsub = p.add_subparsers(dest="task", required=True, metavar="task")
    for task in TASKS:
        t = tsub.add_parser(task, parents=[common], help=f"{task} head")
        t.add_argument("--in", dest="inp", required=True)
        t.add_argument("--backbone", required=True)
        t.add_argument("--epochs", type=float)
        t.add_argument("--freeze", action="store_true", help="train the head only")
        t.add_argument("--classes", help="comma-separated labels to train on")

    p = add("score", "per-frame normality scores (or class predictions) for a keypoint file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--model", required=True)

    p = add("evaluate", "frame-level AUC-ROC of a score file against ground truth")
    p.add_argument("--scores", required=True)
    p.add_argument("--truth", required=True)

    p = add("render", "write one condensed heatmap frame as a PGM image")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--index", type=int, default=0, help="record index in the file")
    p.add_argument("--dved", help="render the tokenizer's reconstruction instead")

    p = add("verify", "run the self-check suites")
    p.add_argument("--quick", action="store_true", help="fewer gradient-check instances")
    return parser


# -- helpers --------------------------------------------------------------
def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _profile(args, base=None):
    """Profile from the input checkpoint (if any), then --config and --set overrides."""
    from .config import apply_overrides, load_profile, parse_config

    if base is None:
        return load_profile(args.profile or "desk", args.config, _overrides(args))
    if args.profile and args.profile != base.name:
        raise ValueError(f"--profile {args.profile} conflicts with the checkpoint's {base.name} profile")
    merged = {}
    if args.config:
        merged.update(parse_config(Path(args.config).read_text(encoding="utf-8")))
    merged.pop("profile", None)
    merged.update(_overrides(args))
    return apply_overrides(base, merged) if merged else base


def _require_out(args) -> Path:
    if not args.out:
        raise ValueError("--out is required for this command")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    return Path(args.out)


def _manifest(args, argv, profile, outputs, inputs=()):
    inputs = [p for p in inputs if p]
    for out in map(Path, outputs):
        io.write_manifest(out.with_name(out.name + ".manifest.json"), args.command, argv, profile, args.seed,
                          outputs, inputs)


def _windows(path, profile):
    from .data import ingest
    from .heatmap import heatmaps

    wins = ingest(path, profile)
    if not wins:
        raise ValueError(f"{path}: no sequences")
    return wins, heatmaps(wins, profile.height, profile.width, profile.sigma, profile.use_confidence)


# -- commands -------------------------------------------------------------
def cmd_gen_data(args, argv):
    from .data import SynthSpec, gen_corpus, write_poses

    profile = _profile(args)
    out = _require_out(args)
    spec = SynthSpec(per_class=args.per_class, anomaly_fraction=args.anomaly_fraction,
                     frames=args.frames or profile.frames, joints=profile.joints, seed=args.seed)
    poses = gen_corpus(spec)
    write_poses(out, poses)
    print(f"wrote {len(poses)} sequences to {out}")
    _manifest(args, argv, profile, [out])


def cmd_train_dved(args, argv):
    from .checkpoints import export_codebook, save_model
    from .dved import codebook_stats, tokenize, train_dved

    profile = _profile(args)
    out = _require_out(args)
    _, u = _windows(args.inp, profile)
    model, state = train_dved(u, profile, args.seed, epochs=args.epochs)
    save_model(out, model, profile, args.seed, state)
    book = Path(args.codebook) if args.codebook else out.with_suffix(".mbk")
    io.write_codebook(book, export_codebook(model))
    stats = codebook_stats(tokenize(model, u), model.vocab)
    if state.history:
        print(f"final reconstruction {state.history[-1]['recon']:.5f} (epoch 1: {state.history[0]['recon']:.5f})")
    print(f"codebook usage {stats['usage']:.3f}, perplexity {stats['perplexity']:.2f}")
    _manifest(args, argv, profile, [out, book], [args.inp])


def cmd_tokenize(args, argv):
    from .checkpoints import load_model
    from .dved import tokenize

    model, base, _ = load_model(args.dved, "dved")
    profile = _profile(args, base)
    out = _require_out(args)
    wins, u = _windows(args.inp, profile)
    io.write_tokens(out, [w.id for w in wins], tokenize(model, u))
    print(f"wrote tokens for {len(wins)} windows to {out}")
    _manifest(args, argv, profile, [out], [args.inp, args.dved])


def cmd_pretrain(args, argv):
    from .backbone import build_backbone, masked_accuracy, pretrain
    from .checkpoints import load_model, restore_state, save_model
    from .dved import tokenize
    from .masking import pose_keypoints

    dved, dved_profile, _ = load_model(args.dved, "dved")
    model = state = None
    if args.resume:
        model, base, cfg = load_model(args.resume, "backbone")
        profile = _profile(args, base)
    else:
        profile = _profile(args, dved_profile if not (args.profile or args.config) else None)
    out = _require_out(args)
    wins, u = _windows(args.inp, profile)
    if args.tokens:
        ids, tokens = io.read_tokens(args.tokens)
        if ids != [w.id for w in wins]:
            raise ValueError(f"{args.tokens} does not list the windows of {args.inp} in order")
    else:
        tokens = tokenize(dved, u)
    kp = [pose_keypoints(w) for w in wins]
    epochs = args.epochs if args.epochs is not None else profile.backbone.epochs
    if model is None:
        model = build_backbone(profile, args.seed)
    else:
        state = restore_state(model, profile, cfg, model.checkpoint_tensors, len(wins), epochs)
    model.check_tokenizer(dved)
    model, state = pretrain(u, kp, tokens, profile, args.seed, model=model, state=state, epochs=epochs,
                            stop_epoch=args.stop_epoch)
    save_model(out, model, profile, args.seed, state)
    if state.history:
        h = state.history[-1]
        print(f"epoch {h['epoch']}: loss {h['loss']:.4f}, masked accuracy {h['accuracy']:.3f}")
    print(f"held-out-mask accuracy {masked_accuracy(model, u, kp, tokens, profile, args.seed):.3f}")
    _manifest(args, argv, profile, [out], [args.inp, args.dved, args.tokens, args.resume])


def _labels(wins, field):
    vals = [getattr(w, field) for w in wins]
    if any(v is None for v in vals):
        raise ValueError(f"every record needs a {field!r} field for this task")
    return np.array([int(v) for v in vals])


def cmd_finetune(args, argv):
    import dataclasses

    from .checkpoints import load_model, save_model
    from .heads import finetune_classify, jigsaw_train, supervised_anomaly_train, train_oneshot

    backbone, base, _ = load_model(args.backbone, "backbone")
    profile = _profile(args, base)
    out = _require_out(args)
    cfg = getattr(profile, args.task)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    if args.freeze:
        cfg = dataclasses.replace(cfg, freeze_backbone=True)
    wins, u = _windows(args.inp, profile)
    keep = np.ones(len(wins), dtype=bool)
    if args.classes:
        wanted = {int(c) for c in args.classes.split(",")}
        keep = np.array([w.label in wanted for w in wins])
    if args.task == "classify":
        y = _labels(wins, "label")
        model = finetune_classify(backbone, u[keep], y[keep], profile, args.seed,
                                  num_classes=int(y.max()) + 1, cfg=cfg)
    elif args.task == "oneshot":
        y = _labels(wins, "label")
        model = train_oneshot(backbone, u[keep], y[keep], profile, args.seed, cfg=cfg)
    elif args.task == "jigsaw":
        keep &= np.array([not w.abnormal for w in wins])
        model = jigsaw_train(backbone, u[keep], profile, args.seed, cfg=cfg)
    else:
        y = np.array([bool(w.abnormal) for w in wins])
        model = supervised_anomaly_train(backbone, [w for w, k in zip(wins, keep) if k], y[keep], profile,
                                         args.seed, cfg=cfg)
    save_model(out, model, dataclasses.replace(profile, **{args.task: cfg}), args.seed, None,
               history=model.state.history)
    if model.state.history:
        print(f"{args.task}: final loss {model.state.history[-1]['loss']:.4f}")
    _manifest(args, argv, profile, [out], [args.inp, args.backbone])


def cmd_score(args, argv):
    from .checkpoints import load_model
    from .data import read_poses, split_windows
    from .heads import anomaly_score, class_probabilities, jigsaw_score
    from .heatmap import heatmaps, normalize_pose
    from .metrics import frame_aggregate, window_frame_scores

    model, base, _ = load_model(args.model, "finetuned")
    profile = _profile(args, base)
    out = _require_out(args)
    records = read_poses(args.inp)
    if not records:
        raise ValueError(f"{args.inp}: no sequences")
    if model.task == "classify":
        wins = [normalize_pose(w, profile.height, profile.width, profile.margin_ratio)
                for r in records for w in split_windows(r, profile.frames, profile.window_stride)]
        prob = class_probabilities(model, heatmaps(wins, profile.height, profile.width, profile.sigma,
                                                   profile.use_confidence))
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("id,label,probability\n")
            for w, p in zip(wins, prob):
                fh.write(f"{w.id},{int(np.argmax(p))},{float(p.max())!r}\n")
        print(f"wrote predictions for {len(wins)} windows to {out}")
    elif model.task in ("jigsaw", "anomaly"):
        fn = jigsaw_score if model.task == "jigsaw" else anomaly_score
        per_frame = {}
        n_frames = 0
        for r in records:
            wins = [normalize_pose(w, profile.height, profile.width, profile.margin_ratio)
                    for w in split_windows(r, profile.frames, profile.window_stride)]
            s = fn(model, heatmaps(wins, profile.height, profile.width, profile.sigma, profile.use_confidence))
            track = window_frame_scores(r.frames, [w.start for w in wins], profile.frames, s)
            for f, v in enumerate(track):
                per_frame.setdefault(r.start + f, []).append(float(v))
            n_frames = max(n_frames, r.start + r.frames)
        scores = frame_aggregate(per_frame, n_frames)
        io.write_scores(out, scores)
        print(f"wrote {len(scores)} frame scores to {out}")
    else:
        raise ValueError("score supports classify, jigsaw and anomaly models; one-shot models need exemplars")
    _manifest(args, argv, profile, [out], [args.inp, args.model])


def cmd_evaluate(args, argv):
    from .metrics import anomaly_auc

    f_s, s = io.read_scores(args.scores)
    f_t, t = io.read_ground_truth(args.truth)
    truth = dict(zip(f_t.tolist(), t.tolist()))
    missing = [f for f in f_s.tolist() if f not in truth]
    if missing:
        raise ValueError(f"{len(missing)} scored frames have no ground truth (first: {missing[0]})")
    labels = np.array([truth[f] for f in f_s.tolist()])
    auc = anomaly_auc(s, labels)
    print(f"AUC-ROC {auc:.6f} over {len(s)} frames")
    if args.out:
        out = _require_out(args)
        out.write_text(f"auc_roc,{auc!r}\n", encoding="utf-8")
        _manifest(args, argv, _profile(args), [out], [args.scores, args.truth])


def cmd_render(args, argv):
    from .checkpoints import load_model
    from .heatmap import condense

    dved = None
    if args.dved:
        dved, base, _ = load_model(args.dved, "dved")
        profile = _profile(args, base)
    else:
        profile = _profile(args)
    out = _require_out(args)
    wins, _ = _windows(args.inp, profile)
    sources = sorted({w.id.split("@")[0] for w in wins}, key=[w.id.split("@")[0] for w in wins].index)
    if not 0 <= args.index < len(sources):
        raise ValueError(f"--index {args.index} out of range for {len(sources)} records")
    mine = [w for w in wins if w.id.split("@")[0] == sources[args.index]]
    cover = [w for w in mine if w.start <= args.frame < w.start + profile.frames]
    if not cover:
        raise ValueError(f"--frame {args.frame} is outside record {sources[args.index]!r}")
    w = cover[0]
    from .heatmap import build_heatmap

    u = build_heatmap(w, profile.height, profile.width, profile.sigma, profile.use_confidence)
    if dved is not None:
        from .dved import tokenize

        frame = dved.decode_ids(tokenize(dved, u)[None]).data[0, args.frame - w.start]
    else:
        frame = condense(u)[args.frame - w.start]
    io.write_pgm(out, frame)
    print(f"wrote {out}")
    _manifest(args, argv, profile, [out], [args.inp, args.dved])


def cmd_verify(args, argv):
    from .verify import run_all

    profile = _profile(args)
    checks = run_all(profile, args.seed, quick=args.quick)
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if args.out:
        out = _require_out(args)
        out.write_text("\n".join(c.line() for c in checks) + "\n", encoding="utf-8")
        _manifest(args, argv, profile, [out])
    return 1 if failed else 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train-dved": cmd_train_dved, "tokenize": cmd_tokenize, "pretrain": cmd_pretrain,
    "finetune": cmd_finetune, "score": cmd_score, "evaluate": cmd_evaluate, "render": cmd_render,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = COMMANDS[args.command](args, argv)
    except (ValueError, KeyError, OSError) as exc:
        print(f"mofm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
