"""Operator entry point: ``python -m app.main <command> ...``.

Commands:
    gen-demos   scripted-expert demonstrations for one task
    train       train a policy (one per hand) on a demonstration directory
    eval        roll a trained policy out on fresh scenes and write a results CSV
    reproduce   run one experiment matrix end to end (ablation, placement-shift, background-shift, demo-count)

Exit codes: 0 success, 2 configuration error, 3 data error, 4 anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from app import experiments
from app.experiments import EXPERIMENTS, Variant, Workbench
from ofa.config import DATA_ROOT, LOG_PATH, ConfigError, default_workers, load_config
from ofa.dataset import METHODS, SEGMENTS, EmptySampleSetError, EpisodeFormatError
from ofa.env.scene import BACKGROUNDS
from ofa.env.tasks import TASKS, UnknownTaskError
from ofa.imageio import ImageFileError
from ofa.policy import PolicyFileError
from ofa.resources import get_current_version

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FAILURE = 4

DATA_ERRORS = (EpisodeFormatError, EmptySampleSetError, ImageFileError, PolicyFileError)


def setup_logging(debug: bool = False) -> None:
    """Root logger: OFA_LOG_PATH (appended) when set, stderr otherwise."""
    level = logging.DEBUG if debug else logging.INFO
    fmt = "%(asctime)s %(levelname)s %(message)s"
    if LOG_PATH:
        logging.basicConfig(filename=LOG_PATH, filemode="a", level=level, format=fmt, force=True)
    else:
        logging.basicConfig(stream=sys.stderr, level=level, format=fmt, force=True)


# Commands


def cmd_gen_demos(args, config) -> int:
    bench = Workbench.from_run_config(config)
    task = args.task or config.get("task")
    count = args.count if args.count is not None else int(config.get("experiments.demos"))
    out = args.out or os.path.join(DATA_ROOT, "demos", task, args.segment)
    produced = experiments.generate_dataset(bench, task, count, out, args.segment)
    print(f"{produced}/{count} demonstrations of {task} written to {out}")
    if produced < count:
        logger.error(f"gen-demos: attempt budget exhausted with {produced} of {count} demonstrations")
        return EXIT_DATA
    return EXIT_OK


def cmd_train(args, config) -> int:
    bench = Workbench.from_run_config(config)
    trained = experiments.train_policy(bench, args.data, args.method, args.out, hand=args.hand, demos=args.demos)
    for hand in trained:
        print(f"{hand}: {Path(args.out) / f'policy_{hand}.params'}")
    return EXIT_OK


def _variant(args) -> Variant:
    parts = []
    if args.position_offset is not None:
        parts.append("offset=" + ",".join(f"{v:g}" for v in args.position_offset))
    if args.background is not None:
        parts.append(f"background={args.background}")
    if not parts:
        return experiments.IN_DISTRIBUTION
    offset = tuple(args.position_offset) if args.position_offset is not None else None
    return Variant(" ".join(parts), placement_offset=offset, background=args.background)


def cmd_eval(args, config) -> int:
    bench = Workbench.from_run_config(config)
    method, params = experiments.load_policy(args.params)
    task = args.task or config.get("task")
    episodes = args.episodes if args.episodes is not None else int(config.get("experiments.episodes"))
    rows = experiments.evaluate(
        bench, method, params, task, episodes, _variant(args), config.seed, args.workers, args.log_dir
    )
    out = args.out or os.path.join(args.params, f"eval_{task}.csv")
    experiments.write_results(out, rows, config.digest, config.seed)
    successes = sum(row["success"] for row in rows)
    print(f"{task} {method.name}: success rate {experiments.success_rate(rows):.1%} ({successes}/{len(rows)})")
    print(f"results: {out}")
    return EXIT_OK


def cmd_reproduce(args, config) -> int:
    bench = Workbench.from_run_config(config)
    out = args.out or os.path.join(DATA_ROOT, "reproduce", args.experiment)
    experiments.reproduce(bench, args.experiment, out, args.workers)
    print(f"report: {Path(out) / f'{args.experiment}.md'}")
    return EXIT_OK


# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofa", description="Object-focus manipulation pipeline in simulation.")
    parser.add_argument("--version", action="version", version=get_current_version())
    parser.add_argument(
        "--config", action="append", default=[], metavar="FILE", help="JSON config layered over the defaults"
    )
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted config override"
    )
    parser.add_argument("--debug", action="store_true", help="debug logging")
    parser.add_argument("--workers", type=int, default=None, help="worker threads (default: OFA_WORKERS or CPU count)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-demos", help="generate scripted-expert demonstrations")
    gen.add_argument("--task", choices=sorted(TASKS))
    gen.add_argument("--count", type=int)
    gen.add_argument("--seed", type=int, help="master seed (overrides config seed)")
    gen.add_argument("--segment", choices=SEGMENTS, default="object_focus")
    gen.add_argument("--out", help="output directory")
    gen.set_defaults(handler=cmd_gen_demos)

    tr = sub.add_parser("train", help="train a policy on a demonstration directory")
    tr.add_argument("--data", required=True, help="demonstration directory (with index.json)")
    tr.add_argument("--method", choices=list(METHODS), default="ofa")
    tr.add_argument("--hand", choices=("right", "left"), help="train only this hand")
    tr.add_argument("--demos", type=int, help="use the first N demonstrations")
    tr.add_argument("--seed", type=int, help="policy seed (overrides policy.seed)")
    tr.add_argument("--out", required=True, help="output directory for parameters and loss curves")
    tr.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a trained policy")
    ev.add_argument("--params", required=True, help="directory written by train")
    ev.add_argument("--task", choices=sorted(TASKS))
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--position-offset", type=float, nargs=2, metavar=("DX", "DY"))
    ev.add_argument("--background", choices=BACKGROUNDS)
    ev.add_argument("--seed", type=int, help="master seed (overrides config seed)")
    ev.add_argument("--log-dir", help="write per-rollout logs here")
    ev.add_argument("--out", help="results CSV (default: <params>/eval_<task>.csv)")
    ev.set_defaults(handler=cmd_eval)

    rep = sub.add_parser("reproduce", help="run an experiment matrix")
    rep.add_argument("experiment", choices=EXPERIMENTS)
    rep.add_argument("--seed", type=int, help="master seed (overrides config seed)")
    rep.add_argument("--out", help="output directory")
    rep.set_defaults(handler=cmd_reproduce)
    return parser


def _seed_overrides(args) -> list:
    if getattr(args, "seed", None) is None:
        return []
    key = "policy.seed" if args.command == "train" else "seed"
    return [f"{key}={args.seed}"]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.debug)
    try:
        if args.workers is None:
            args.workers = default_workers()
        config = load_config(args.config, args.overrides + _seed_overrides(args))
        logger.info(f"main: {args.command} with config digest {config.digest}")
        return args.handler(args, config)
    except (ConfigError, UnknownTaskError) as e:
        logger.error(f"main: configuration error: {e}")
        return EXIT_CONFIG
    except DATA_ERRORS as e:
        logger.error(f"main: data error: {e}")
        return EXIT_DATA
    except Exception as e:
        logger.exception(f"main: {args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
