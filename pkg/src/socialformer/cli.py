"""Command line entry point: synth, train, eval, predict, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .checkpoint import load_checkpoint, save_checkpoint, write_predictions
from .config import load_config
from .plotting import plot_scene
from .scene import read_scenes, write_scenes
from .synth import TOPOLOGIES, generate_scenes
from .training import evaluate, predict, train


def _dump(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_synth(args):
    scenes = generate_scenes(args.topology, args.count, args.seed, n_agents=args.agents,
                             n_pedestrians=args.pedestrians, noise_std=args.noise)
    write_scenes(args.out, scenes)
    _dump({"written": len(scenes), "out": args.out})


def cmd_train(args):
    config = load_config(args.config)
    if args.out:
        config = config.replace(checkpoint=args.out)
    if not config.checkpoint:
        raise SystemExit("no checkpoint path: set checkpoint in the config or pass --out")
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        def on_step(rec):
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

        result = train(config, on_step=on_step)
        if log_fh:
            for entry in result.epochs:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(result.model, config.checkpoint)
    for entry in result.epochs:
        _dump(entry)


def cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    _dump(evaluate(model, read_scenes(args.scenes), args.k))


def cmd_predict(args):
    model = load_checkpoint(args.ckpt)
    scenes = read_scenes(args.scenes)
    write_predictions(args.out, [s.scene_id for s in scenes], predict(model, scenes))
    _dump({"written": len(scenes), "out": args.out})


def cmd_plot(args):
    model = load_checkpoint(args.ckpt)
    scenes = {s.scene_id: s for s in read_scenes(args.scenes)}
    if args.scene_id not in scenes:
        raise SystemExit(f"unknown scene id {args.scene_id!r}")
    scene = scenes[args.scene_id]
    plot_scene(scene, predict(model, [scene])[0], args.out)
    _dump({"out": args.out})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="socialformer")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--topology", choices=TOPOLOGIES, default="straight")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--agents", type=int, default=3)
    s.add_argument("--pedestrians", type=int, default=0)
    s.add_argument("--noise-std", "--noise", dest="noise", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a key=value config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="checkpoint path (overrides the config)")
    s.add_argument("--log", help="write per-step and per-epoch records as JSON lines")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics of a checkpoint on a scene file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--k", type=int, choices=(5, 10), default=5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="write sf-pred/1 predictions")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("plot", help="render one scene with its predicted modes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--scene-id", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
