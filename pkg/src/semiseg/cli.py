"""Command line entry point: ``semiseg {train,eval,ablation,augment-preview,report,generate,pretrain-teacher}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .data import load_dataset_dir, load_test_samples, save_dataset_dir
from .experiment import build_data, evaluate, run_ablation, run_experiment, write_eval
from .foundation import foundation_weights
from .report import preview_from_state, write_report
from .synthetic import SyntheticSpec, generate_synthetic_dataset, make_samples
from .trainer import build_state, load_checkpoint


def _add_train(sub):
    p = sub.add_parser("train", help="train one configuration and evaluate it")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", help="named preset applied on top of the config")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int, help="override schedule.t_max")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--runs", default="runs", help="parent directory of run folders")
    p.add_argument("--name", help="run folder name (default: config name)")


def cmd_train(args):
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.iterations:
        over["schedule"] = {"t_max": args.iterations}
    if args.deterministic:
        over["deterministic"] = True
    cfg = load_config(args.config, args.preset, **over)
    run_dir = Path(args.runs) / (args.name or f"{cfg.name}-s{cfg.seed}")
    summary = run_experiment(cfg, run_dir)
    print(json.dumps({"run_dir": str(run_dir), "dice": summary["dice"], "hd95": summary["hd95"]}))


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint, for_training=False)
    if args.data:
        samples = load_test_samples(args.data)
    else:
        samples = build_data(state.cfg)[1]
    reports, summary = evaluate(state, samples, state.cfg.num_classes)
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else (ckpt if ckpt.is_dir() else ckpt.parent) / "eval"
    write_eval(out, samples, reports, summary)
    print(json.dumps({"out": str(out), "dice": summary["dice"], "n": summary["n"]}))


def cmd_ablation(args):
    over = {}
    if args.iterations:
        over["schedule"] = {"t_max": args.iterations}
    base = load_config(args.config, **over)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(args.preset, base, seeds, args.out)
    for r in rows:
        print(f"{r['preset']:<22} seed={r['seed']} dice={r['dice']:.4f} hd95={r['hd95']:.2f}")


def cmd_preview(args):
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, for_training=False)
        cfg = state.cfg
    else:
        cfg = load_config(args.config)
        state = build_state(cfg)
    if args.data:
        split = load_dataset_dir(args.data, cfg.num_classes)
    else:
        split = build_data(cfg)[0]
    lab = next((s for s in split.labeled if s.id == args.labeled_id), split.labeled[0])
    pool = split.unlabeled or split.labeled
    unl = next((s for s in pool if s.id == args.unlabeled_id), pool[0])
    preview_from_state(state, lab, unl, args.out, seed=args.seed, k=cfg.ugda.topk)
    print(args.out)


def cmd_report(args):
    info = write_report(args.runs, args.out)
    print(json.dumps(info))


def cmd_generate(args):
    spec = SyntheticSpec(n=args.n, size=args.size)
    split = generate_synthetic_dataset(spec, args.seed, args.labeled_fraction)
    test = make_samples(SyntheticSpec(n=args.test_n, size=args.size, prefix="test"), args.seed + 1)
    save_dataset_dir(args.out, split, test)
    print(json.dumps({"out": args.out, "labeled": split.n_labeled, "unlabeled": split.n_unlabeled,
                      "test": len(test)}))


def cmd_pretrain(args):
    cfg = load_config(args.config)
    m = cfg.model
    path = foundation_weights(cfg.in_channels, cfg.num_classes, m.teacher_dim, m.teacher_depth,
                              m.teacher_heads, cfg.image_size, cfg.foundation, root=args.cache)
    print(json.dumps({"weights": str(path)}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiseg")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)
    _add_train(sub)

    p = sub.add_parser("eval", help="evaluate a checkpoint (per-sample CSV + aggregate JSON)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root; its 'test' ids are evaluated")
    p.add_argument("--out")

    p = sub.add_parser("ablation", help="run a preset group over several seeds")
    p.add_argument("--preset", required=True, help="group (views, losses, ugda) or preset name")
    p.add_argument("--config")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", default="runs/ablation")

    p = sub.add_parser("augment-preview", help="4-panel figure of one uncertainty-guided mix")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--labeled-id")
    p.add_argument("--unlabeled-id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="augment_preview.png")

    p = sub.add_parser("report", help="aggregate run folders into CSV + plots")
    p.add_argument("--runs", required=True)
    p.add_argument("--out")

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--test-n", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeled-fraction", type=float, default=0.1)

    p = sub.add_parser("pretrain-teacher", help="pretrain and cache the stand-in teacher backbone")
    p.add_argument("--config")
    p.add_argument("--cache", help="cache directory (default: $SEMISEG_CACHE or ~/.cache/semiseg)")
    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
    "augment-preview": cmd_preview,
    "report": cmd_report,
    "generate": cmd_generate,
    "pretrain-teacher": cmd_pretrain,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    COMMANDS[args.cmd](args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
