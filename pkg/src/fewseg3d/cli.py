"""Command line interface.

Subcommands: gen-data, pretrain-il, pretrain-dl, meta-train, evaluate,
ablate, sweep-pam, sweep-nway. Run commands accept --config FILE (JSON with
the run-config schema) plus overriding flags.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import engine
from .data import SceneManifest, build_corpus
from .diffusion import DLConfig, DLTrainConfig, load_dl, pretrain_dl, save_dl
from .intrinsic import ILConfig, ILTrainConfig, load_il, pretrain_il, save_il
from .pam import load_pam, save_pam


def _load_config(args) -> engine.RunConfig:
    if args.config:
        cfg = engine.RunConfig.from_file(args.config)
    else:
        cfg = engine.RunConfig()
    doc = cfg.to_dict()
    if getattr(args, "data", None):
        doc["data"] = args.data
    if getattr(args, "n_way", None) is not None:
        doc["n_way"] = args.n_way
    if getattr(args, "k_shot", None) is not None:
        doc["k_shot"] = args.k_shot
    if getattr(args, "episodes", None) is not None:
        doc["episodes"] = args.episodes
    if getattr(args, "seed", None) is not None:
        doc["seeds"] = [args.seed]
    if getattr(args, "out", None):
        doc["out_dir"] = args.out
    return engine.RunConfig.from_dict(doc)


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run config", default=None)
    p.add_argument("--data", help="manifest.json path override", default=None)
    p.add_argument("--n-way", type=int, default=None)
    p.add_argument("--k-shot", type=int, default=None)
    p.add_argument("--seed", type=int, default=None,
                   help="replace the config seed list with this single seed")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory override")


def cmd_gen_data(args) -> int:
    man = build_corpus(args.out, n_scenes=args.scenes, n_classes=args.classes,
                       diversity=args.diversity, seed=args.seed,
                       room_size=args.room_size, block_size=args.block_size,
                       points_per_instance=args.points_per_instance)
    total = sum(len(man.scene(i)) for i in range(man.n_scenes))
    print(f"wrote {man.n_scenes} scenes ({total} points) and manifest to {args.out}")
    return 0


def cmd_pretrain_il(args) -> int:
    man = SceneManifest.load(Path(args.data) / "manifest.json"
                             if Path(args.data).is_dir() else args.data)
    cfg = ILTrainConfig(epochs=args.epochs, steps_per_epoch=args.steps,
                        lr=args.lr, n_points=args.n_points, seed=args.seed,
                        model=ILConfig(k=args.k))
    il, curve = pretrain_il(man, args.split, cfg)
    save_il(args.out, il, extra_meta={"loss_curve": curve, "split": args.split})
    print(f"pretrained intrinsic learner: {len(curve)} epochs, "
          f"loss {curve[0]:.4f} -> {curve[-1]:.4f}" if curve else
          "pretrained intrinsic learner: 0 epochs (init only)")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_pretrain_dl(args) -> int:
    man = SceneManifest.load(Path(args.data) / "manifest.json"
                             if Path(args.data).is_dir() else args.data)
    model = DLConfig(mask_ratio=args.mask_ratio, timesteps=args.timesteps)
    cfg = DLTrainConfig(epochs=args.epochs, steps_per_epoch=args.steps, lr=args.lr,
                        n_points=args.n_points, seed=args.seed, model=model)
    dl, curve = pretrain_dl(man, args.split, cfg)
    save_dl(args.out, dl, extra_meta={"loss_curve_tail": curve[-20:],
                                      "split": args.split})
    if curve:
        print(f"pretrained diffusion learner: {len(curve)} steps, "
              f"loss {np.mean(curve[:10]):.4f} -> {np.mean(curve[-10:]):.4f}")
    else:
        print("pretrained diffusion learner: 0 steps (init only)")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_meta_train(args) -> int:
    cfg = _load_config(args)
    man = SceneManifest.load(cfg.data)
    il = load_il(cfg.il_ckpt)
    dl = load_dl(cfg.dl_ckpt) if cfg.dl_ckpt else None
    flags = engine.ModuleFlags.from_variant(args.variant)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in cfg.seeds:
        pam, log, calls = engine.meta_train(cfg, man, il, dl, flags=flags, seed=s)
        if pam is None:
            print(f"seed {s}: variant {args.variant} has no trainable parameters")
            continue
        path = out / f"pam_{args.variant}_seed{s}.npz"
        save_pam(path, pam, extra_meta={"seed": s, "variant": args.variant,
                                        "config_digest": cfg.digest()})
        with open(out / f"train_log_{args.variant}_seed{s}.jsonl", "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
        print(f"seed {s}: trained {len(log)} episodes, "
              f"final total loss {log[-1]['total']:.4f} -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    man = SceneManifest.load(cfg.data)
    il = load_il(cfg.il_ckpt)
    flags = engine.ModuleFlags.from_variant(args.variant)
    dl = load_dl(cfg.dl_ckpt) if (cfg.dl_ckpt and flags.use_dl) else None
    pam = load_pam(args.params) if args.params else None
    rep = engine.evaluate(cfg, man, il, dl, pam, flags=flags,
                          episodes=args.eval_episodes, variant=args.variant)
    name = args.name or f"eval_{args.variant}_{cfg.digest()}"
    path = engine.write_report(rep, cfg.out_dir, name)
    print(f"mean IoU {rep.mean_iou:.4f} over {rep.episodes} episodes x "
          f"{len(rep.seeds)} seeds -> {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    res = engine.ablate(args.variant, cfg)
    print(f"variant {args.variant}: seed-mean IoU {res.seed_mean_iou:.4f} "
          f"({[round(r.mean_iou, 4) for r in res.reports]})")
    return 0


def cmd_sweep_pam(args) -> int:
    cfg = _load_config(args)
    results = engine.pam_variant_sweep(cfg)
    for name in sorted(results):
        print(f"{name}: seed-mean IoU {results[name].seed_mean_iou:.4f}")
    return 0


def cmd_sweep_nway(args) -> int:
    cfg = _load_config(args)
    n_values = tuple(int(x) for x in args.n_values.split(","))
    k_values = tuple(int(x) for x in args.k_values.split(","))
    reports = engine.nway_sweep(cfg, n_values=n_values, k_values=k_values)
    cells = {}
    for r in reports:
        cells.setdefault((r.n_way, r.k_shot), []).append(r.mean_iou)
    for (n, k), vals in sorted(cells.items()):
        print(f"{n}-way {k}-shot: mean IoU {np.mean(vals):.4f}")
    print(f"artifacts in {cfg.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fewseg3d",
                                 description="few-shot 3D point cloud segmentation "
                                             "on synthetic scenes")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--diversity", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--room-size", type=float, default=4.0)
    p.add_argument("--block-size", type=float, default=2.0)
    p.add_argument("--points-per-instance", type=int, default=320)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-il", help="supervised pre-training")
    p.add_argument("--data", required=True, help="corpus dir or manifest path")
    p.add_argument("--split", default="S0", help="split held out for meta-testing")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-points", type=int, default=512)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_il)

    p = sub.add_parser("pretrain-dl", help="self-supervised diffusion pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="S0")
    p.add_argument("--mask-ratio", type=float, default=0.8)
    p.add_argument("--timesteps", type=int, default=100)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-points", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_dl)

    p = sub.add_parser("meta-train", help="episodic training of the alignment stack")
    _add_run_flags(p)
    p.add_argument("--variant", default="F", choices=list("ABCDEF"))
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("evaluate", help="test-split evaluation")
    _add_run_flags(p)
    p.add_argument("--params", default=None, help="alignment checkpoint (.npz)")
    p.add_argument("--variant", default="F", choices=list("ABCDEF"))
    p.add_argument("--eval-episodes", type=int, default=None)
    p.add_argument("--name", default=None, help="report file name")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train+evaluate one ablation variant")
    _add_run_flags(p)
    p.add_argument("--variant", required=True, choices=list("ABCDEF"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-pam", help="push-pull structure and iteration sweep")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep_pam)

    p = sub.add_parser("sweep-nway", help="N-way / K-shot generalization sweep")
    _add_run_flags(p)
    p.add_argument("--n-values", default="2,3,4,5,6")
    p.add_argument("--k-values", default="1,5")
    p.set_defaults(func=cmd_sweep_nway)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
