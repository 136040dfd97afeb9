"""Command-line entry point: ``ppap {synth-data,train,eval,zero-shot,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ppap.config import TrainConfig
from ppap.data import QUAD_LIMBS, default_species, load_dataset, write_dataset
from ppap.errors import InvalidArgument
from ppap.runner import build_dataset, evaluate, load_checkpoint, plot_outputs, train, zero_shot_protocol


def _load_config(path, paper_scale: bool = False) -> TrainConfig:
    cfg = TrainConfig.load(path) if path else TrainConfig()
    return cfg.paper_scale() if paper_scale else cfg


def _split(names: str) -> list[str]:
    return [n.strip() for n in names.split(",") if n.strip()]


def cmd_synth_data(args) -> int:
    cfg = _load_config(args.config)
    if cfg.data.dataset:
        raise InvalidArgument("synth-data needs a config without data.dataset")
    records, vocab = build_dataset(cfg)
    species = default_species()
    manifest = write_dataset(records, args.out, vocab, skeleton=species[cfg.data.species[0]].limbs,
                             extra={"seed": cfg.data.seed, "noise_level": cfg.data.noise_level})
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.paper_scale)
    records, vocab = build_dataset(cfg)
    res = train(cfg, records, vocab, out_dir=args.out, eval_every=args.eval_every)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"epochs": len(res.history), "final_total": last.get("total"),
                      "train_pck": last.get("train_pck"), "out": str(args.out)}))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    records, vocab = load_dataset(args.data)
    res = evaluate(model, records, alpha=args.alpha, stochastic_eval=args.stochastic_eval, vocab=vocab)
    report = json.dumps(res.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(report)
    print(report)
    return 0


def cmd_zero_shot(args) -> int:
    cfg = _load_config(args.config)
    report = zero_shot_protocol(cfg, _split(args.train_species), _split(args.test_species),
                                control=args.control, alpha=args.alpha, out_dir=args.out)
    print(json.dumps(report, indent=2))
    return 0


def cmd_plot(args) -> int:
    model = load_checkpoint(args.ckpt)
    if args.data:
        records, _ = load_dataset(args.data)
    else:
        records, _ = build_dataset(model.cfg)
    match = [r for r in records if r.id == args.instance]
    if not match:
        raise InvalidArgument(f"no instance with id {args.instance}")
    for p in plot_outputs(model, match[0], args.out, limbs=QUAD_LIMBS if model.vocab.num_keypoints == 5 else ()):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render the synthetic dataset to disk")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--paper-scale", action="store_true", help="use the reported schedule and resolution")
    p.add_argument("--eval-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--stochastic-eval", type=int, default=0, metavar="N")
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zero-shot", help="train on some species, evaluate on others")
    p.add_argument("--config")
    p.add_argument("--train-species", required=True, help="comma separated")
    p.add_argument("--test-species", required=True, help="comma separated")
    p.add_argument("--control", action="store_true", help="same-species sanity run on held-out instances")
    p.add_argument("--alpha", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("plot", help="write overlay and score-map images for one instance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--instance", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory (default: regenerate from the checkpoint config)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InvalidArgument, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
