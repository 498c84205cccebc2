"""Command-line entry points.

    protosep gen-data          --out DIR
    protosep augment           --data DIR --out DIR --fold N
    protosep train             --data DIR --out CKPT [--variant V]
    protosep eval              --checkpoint CKPT --data DIR
    protosep attack            --checkpoint CKPT --data DIR --attack K ...
    protosep export-heatmaps   --checkpoint CKPT --data DIR --image-id N
    protosep export-prototypes --checkpoint CKPT --data DIR --out CSV

Global flags: --seed N and --config FILE (flat key=value overrides).
"""

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from . import config as cfgmod
from .attacks import ATTACK_KINDS, LOSS_MODES, run_attack
from .autodiff import InvalidArgumentError
from .checkpoint import load_model, save_model
from .data import augment_dataset, gen_dataset, load_dataset
from .evaluate import (accuracy_percent, attack_chunked, evaluate_report,
                       predict_chunked, render_csv, render_text,
                       standard_cells)
from .export import export_heatmaps, export_prototype_vectors
from .model import (SUBSTITUTE_ARCHS, GlobalPoolNet, SeparationNet,
                    make_substitute)
from .training import train_model


def build_parser():
    parser = argparse.ArgumentParser(
        prog="protosep",
        description="Attention-guided prototype network workbench")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed (default 0, or the checkpoint's "
                             "stored seed when resuming)")
    parser.add_argument("--config", default=None,
                        help="key=value config file overriding defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark")
    p.add_argument("--out", required=True)

    p = sub.add_parser("augment", help="expand a dataset by warped variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=30)

    p = sub.add_parser("train", help="run the three-phase schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.add_argument("--variant", default=None,
                   choices=["full", "baseline", "attention"]
                   + sorted(SUBSTITUTE_ARCHS),
                   help="model variant or substitute architecture")
    p.add_argument("--fast-adv", action="store_true",
                   help="train on single-step adversaries")
    p.add_argument("--metrics", default=None, help="per-epoch CSV log path")
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")

    p = sub.add_parser("eval", help="robustness report over the test split")
    p.add_argument("--checkpoint", required=True, action="append",
                   help="model to evaluate; repeatable")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--substitute", action="append", default=[],
                   help="substitute checkpoint for black-box columns; "
                        "repeatable")
    p.add_argument("--no-attacks", action="store_true",
                   help="clean accuracy only")
    p.add_argument("--subset", type=int, default=None,
                   help="evaluate only the first N samples")
    p.add_argument("--out-prefix", default=None,
                   help="write PREFIX.txt and PREFIX.csv")

    p = sub.add_parser("attack", help="run one attack and report accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--head", default="prototype",
                   choices=["prototype", "attention", "pool"])
    p.add_argument("--save-adv", default=None,
                   help="write the adversarial batch to this .npy file")
    _attack_flags(p)

    p = sub.add_parser("export-heatmaps",
                       help="top prototype activation maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--adversarial", action="store_true",
                   help="also export maps for the attacked image")
    _attack_flags(p)

    p = sub.add_parser("export-prototypes",
                       help="prototype vectors and metadata as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def _attack_flags(p):
    p.add_argument("--attack", default=None, choices=list(ATTACK_KINDS))
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--target", default=None, choices=list(LOSS_MODES))


def _attack_overrides(args):
    pairs = {"attack.kind": args.attack, "attack.eps": args.eps,
             "attack.alpha": args.alpha, "attack.steps": args.steps,
             "attack.mu": args.mu, "attack.target": args.target}
    if args.attack == "fgsm" and args.steps is None:
        pairs["attack.steps"] = 1  # single-step by definition
    return {k: v for k, v in pairs.items() if v is not None}


def _load_split(path, split, subset=None):
    data = load_dataset(path, split=split)
    if len(data) == 0:
        raise InvalidArgumentError(f"no {split!r} images under {path}")
    if subset is not None:
        if subset < 1:
            raise InvalidArgumentError("--subset must be >= 1")
        data = dataclasses.replace(
            data, images=data.images[:subset], labels=data.labels[:subset],
            ids=data.ids[:subset], paths=data.paths[:subset],
            split=data.split[:subset])
    return data


def cmd_gen_data(args, cfg, seed):
    ds_cfg = cfgmod.dataset_config(cfg)
    rows = gen_dataset(ds_cfg, seed, args.out)
    n_train = sum(1 for r in rows if r[2] == "train")
    print(f"wrote {len(rows)} images ({n_train} train, "
          f"{len(rows) - n_train} test) to {args.out}")
    return 0


def cmd_augment(args, cfg, seed):
    rows = augment_dataset(args.data, args.out, args.fold, seed)
    print(f"wrote {len(rows)} images to {args.out} (fold {args.fold})")
    return 0


def _metrics_writer(path):
    if path is None:
        return None, None
    fh = open(path, "w", newline="", encoding="utf-8")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["epoch", "phase", "lr", "loss", "ce_attention",
                     "ce_prototype", "regularization"])
    return fh, writer


def cmd_train(args, cfg, seed):
    if args.variant is not None:
        if args.variant in SUBSTITUTE_ARCHS:
            cfg = dict(cfg)  # substitute arch ignores model.* keys
        else:
            cfg = dict(cfg, **{"model.variant": args.variant})
    if args.fast_adv:
        cfg = dict(cfg, **{"train.fast_adv": "true"})

    train_data = _load_split(args.data, "train")
    schedule = cfgmod.train_schedule(cfg)
    loss_cfg = cfgmod.loss_config(cfg)
    fast_adv = cfgmod.fast_adv_config(cfg)

    start_epoch, opt_state = 0, None
    if args.resume is not None:
        model, ckpt = load_model(args.resume)
        stored = {k: v for k, v in ckpt.config.items()
                  if k in cfgmod.DEFAULTS}
        cfg = cfgmod.load_config(path=None, overrides=stored)
        schedule = cfgmod.train_schedule(cfg)
        loss_cfg = cfgmod.loss_config(cfg)
        fast_adv = cfgmod.fast_adv_config(cfg)
        if seed is None and "run.seed" in ckpt.config:
            seed = int(ckpt.config["run.seed"])
        if "train.epoch" in ckpt.tensors:
            start_epoch = int(round(float(ckpt.tensors["train.epoch"][0])))
        opt_state = {k: v for k, v in ckpt.tensors.items()
                     if k.startswith("opt.")}
        print(f"resuming from {args.resume} at epoch {start_epoch}")
    elif args.variant in SUBSTITUTE_ARCHS:
        size = cfgmod.as_int(cfg, "data.image_size")
        classes = cfgmod.as_int(cfg, "data.classes")
        model = make_substitute(args.variant, classes, input_size=size,
                                seed=seed or 0)
    else:
        model = SeparationNet(cfgmod.model_config(cfg), seed=seed or 0)
    seed = seed or 0

    fh, writer = _metrics_writer(args.metrics)
    echo = dict(cfg, **{"run.seed": str(seed)})
    ran = []

    def on_epoch(model, stats, optimizer):
        ran.append(stats.epoch)
        if writer is not None:
            writer.writerow([stats.epoch, stats.phase, repr(stats.lr),
                             repr(stats.loss), repr(stats.ce_attention),
                             repr(stats.ce_prototype),
                             repr(stats.regularization)])
            fh.flush()
        extra = dict(optimizer.state_arrays())
        extra["train.epoch"] = np.array([float(stats.epoch)])
        save_model(args.out, model, config=echo, extra_tensors=extra)
        print(f"epoch {stats.epoch:3d} [{stats.phase:10s}] "
              f"lr={stats.lr:.2e} loss={stats.loss:.4f}")

    try:
        train_model(model, train_data, schedule, loss_cfg, seed=seed,
                    fast_adv=fast_adv, start_epoch=start_epoch,
                    optimizer_state=opt_state, on_epoch=on_epoch)
    finally:
        if fh is not None:
            fh.close()
    if not ran:
        save_model(args.out, model, config=echo, extra_tensors={
            "train.epoch": np.array([float(start_epoch)])})
        print("schedule already complete; checkpoint copied unchanged")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args, cfg, seed):
    data = _load_split(args.data, args.split, args.subset)
    named = []
    for path in args.checkpoint:
        model, _ = load_model(path)
        name = _model_name(model, path)
        named.append((name, model))
    substitutes = []
    for path in args.substitute:
        model, _ = load_model(path)
        substitutes.append((_model_name(model, path), model))
    cells = [] if args.no_attacks else standard_cells()
    report = evaluate_report(named, data.images, data.labels, cells,
                             seed=seed or 0, substitutes=substitutes,
                             meta={"split": args.split})
    text = render_text(report)
    print(text, end="")
    if args.out_prefix is not None:
        with open(args.out_prefix + ".txt", "w", encoding="utf-8") as out:
            out.write(text)
        with open(args.out_prefix + ".csv", "w", encoding="utf-8") as out:
            out.write(render_csv(report))
        print(f"report written to {args.out_prefix}.txt / .csv")
    return 0


def _model_name(model, path):
    stem = os.path.splitext(os.path.basename(path))[0]
    if isinstance(model, SeparationNet):
        return f"{stem}:{model.config.variant}"
    return f"{stem}:pool"


def cmd_attack(args, cfg, seed):
    cfg = dict(cfg, **{k: str(v) for k, v in _attack_overrides(args).items()})
    attack_cfg = cfgmod.attack_config(cfg)
    model, _ = load_model(args.checkpoint)
    data = _load_split(args.data, args.split, args.subset)
    seed = seed or 0
    head = args.head
    if isinstance(model, GlobalPoolNet):
        head = "pool"
    clean = accuracy_percent(predict_chunked(model, data.images, head),
                             data.labels)
    x_adv = attack_chunked(model, data.images, data.labels, attack_cfg, seed)
    adv = accuracy_percent(predict_chunked(model, x_adv, head), data.labels)
    print(f"{attack_cfg.kind}(steps={attack_cfg.steps}, "
          f"eps={attack_cfg.eps:.6g}, alpha={attack_cfg.alpha:.6g}) "
          f"on {len(data)} samples, {head} head:")
    print(f"  clean accuracy:       {clean:.2f}%")
    print(f"  adversarial accuracy: {adv:.2f}%")
    if args.save_adv is not None:
        np.save(args.save_adv, x_adv)
        print(f"  adversarial batch saved to {args.save_adv}")
    return 0


def cmd_export_heatmaps(args, cfg, seed):
    model, _ = load_model(args.checkpoint)
    data = load_dataset(args.data)
    index = np.flatnonzero(data.ids == args.image_id)
    if len(index) == 0:
        raise InvalidArgumentError(
            f"image id {args.image_id} not found in {args.data}")
    i = int(index[0])
    image = data.images[i]
    records = export_heatmaps(model, image, args.out, top_n=args.top_n,
                              tag=f"img{args.image_id:05d}")
    print(f"exported {len(records)} heatmaps for image {args.image_id} "
          f"(label {data.labels[i]}) to {args.out}")
    if args.adversarial:
        cfg = dict(cfg,
                   **{k: str(v) for k, v in _attack_overrides(args).items()})
        attack_cfg = cfgmod.attack_config(cfg)
        x_adv = run_attack(model, image[None],
                           np.asarray([data.labels[i]]), attack_cfg,
                           seed=seed or 0)
        adv_records = export_heatmaps(model, x_adv[0], args.out,
                                      top_n=args.top_n,
                                      tag=f"img{args.image_id:05d}_adv")
        print(f"exported {len(adv_records)} adversarial heatmaps "
              f"({attack_cfg.kind}, eps={attack_cfg.eps:.6g})")
    return 0


def cmd_export_prototypes(args, cfg, seed):
    model, _ = load_model(args.checkpoint)
    data = load_dataset(args.data)
    path = export_prototype_vectors(model, data, args.out)
    print(f"wrote {model.bank.m} prototype rows to {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "export-heatmaps": cmd_export_heatmaps,
    "export-prototypes": cmd_export_prototypes,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        return COMMANDS[args.command](args, cfg, args.seed)
    except InvalidArgumentError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
