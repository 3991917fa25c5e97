"""Command line entry point: ``wmnav train`` and ``wmnav eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from wmnav.checkpoint import CheckpointError
from wmnav.harness import ConfigError, RunConfig, evaluate, load_config, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wmnav", description="LIDAR navigation: world-model and model-free agents")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--algo", choices=["dreamer", "sac", "ddpg", "td3"])
    t.add_argument("--stage", type=int)
    t.add_argument("--beams", type=int, choices=[10, 360])
    t.add_argument("--episodes", type=int)
    t.add_argument("--eval-episodes", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--init-from")
    t.add_argument("--out")
    t.add_argument("--realtime", action="store_true", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint with the deterministic policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--stage", type=int)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="write per-episode outcomes CSV here")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _run_config(args) -> RunConfig:
    overrides = {"algorithm": args.algo, "stage": args.stage, "n_beams": args.beams, "episodes": args.episodes,
                 "eval_episodes": args.eval_episodes, "eval_every": args.eval_every, "seed": args.seed,
                 "init_from": args.init_from, "out": args.out, "realtime": args.realtime}
    if args.config:
        return load_config(args.config, **overrides)
    return RunConfig(**{k: v for k, v in overrides.items() if v is not None})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args) if args.command == "train" else None
        if cfg is not None:
            cfg.validate()
    except (ConfigError, TypeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if cfg is not None:
            result = train(cfg)
            print(json.dumps({k: v for k, v in result.items() if k != "evals"}, indent=2))
        else:
            result = evaluate(args.checkpoint, args.stage, args.episodes, args.seed, args.out)
            result.pop("outcomes")
            print(json.dumps(result, indent=2))
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
