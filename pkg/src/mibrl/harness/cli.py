"""Command line entry point: ``mibrl train | eval | plot``.

Results go to stdout as comma-separated ``key,value`` lines so they can be
piped or grepped; logging goes to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..envs import BACKGROUND_MODES, PerturbationConfig
from .config import ABLATIONS, dump_config, load_config
from .plotting import plot_log
from .train import evaluate, load_checkpoint, make_task, robustness_eval, train

log = logging.getLogger("mibrl")


def _print_rows(rows: list[tuple[str, object]]) -> None:
    print("key,value")
    for key, value in rows:
        print(f"{key},{value}")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(
        args.config,
        task=args.task,
        seed=args.seed,
        steps=args.steps,
        ablation=args.ablation,
        work_dir=args.work_dir,
    )
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    (work / "config.txt").write_text(dump_config(cfg))
    result = train(cfg, resume=args.resume)
    mean, std = result.final_return
    _print_rows([
        ("task", cfg.task), ("ablation", cfg.ablation), ("seed", cfg.seed), ("steps", cfg.steps),
        ("updates", result.updates), ("eval_return_mean", mean), ("eval_return_std", std),
        ("checkpoint", result.checkpoint), ("metrics", work / "metrics.jsonl"),
    ])
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    agent, cfg, manifest = load_checkpoint(args.checkpoint)
    env = make_task(cfg)
    mean, std = evaluate(agent, env, args.episodes, seed=args.seed)
    rows = [("checkpoint", args.checkpoint), ("step", manifest["step"]), ("episodes", args.episodes),
            ("return_mean", mean), ("return_std", std)]
    perturbation = PerturbationConfig(args.noise_std, args.background)
    if not perturbation.is_identity:
        pmean, pstd = robustness_eval(agent, env, perturbation, args.episodes, seed=args.seed)
        rows += [("noise_std", args.noise_std), ("background", args.background),
                 ("perturbed_return_mean", pmean), ("perturbed_return_std", pstd)]
    _print_rows(rows)
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    fig, csv_path, text = plot_log(args.log, args.out)
    sys.stdout.write(text)
    log.info("wrote %s and %s", fig, csv_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mibrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent; flags override the config file")
    p.add_argument("--config", type=Path, help="flat 'key = value' file")
    p.add_argument("--task")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="environment steps, action repeat included")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--work-dir")
    p.add_argument("--resume", action="store_true", help="continue from work-dir/checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=10_000)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--background", choices=BACKGROUND_MODES, default="none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="plot a metrics log to an image, table alongside")
    p.add_argument("--log", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
