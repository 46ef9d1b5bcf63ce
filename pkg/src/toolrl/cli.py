"""Command-line entry point: ``toolrl {train,eval,ablate,dump-manifest,plot}``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys

from .errors import ToolRLError
from .hopqa import SEARCH_SPEC, load_instances, vocab_for
from .policy import MLPPolicy, load_checkpoint
from .tool_protocol import render_tool_manifest, save_tool_specs
from .trainer import RunConfig, evaluate, eval_instances, load_config, run_ablation, train

log = logging.getLogger("toolrl")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    rl = {}
    if args.algorithm:
        rl["algorithm"] = args.algorithm
    if args.no_loss_mask:
        rl["loss_mask_enabled"] = False
    if args.no_advantage_mask:
        rl["advantage_mask_enabled"] = False
    changes = {"rl": rl} if rl else {}
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


@contextlib.contextmanager
def _threads(single: bool):
    if not single:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def cmd_train(args) -> int:
    cfg = _config(args)
    with _threads(args.single_thread):
        result = train(cfg, args.out, dump_trajectories=args.dump_trajectories, progress=True)
    print(f"untrained EM {result.untrained_eval_em:.3f} -> final EM {result.final_eval_em:.3f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    params, header = load_checkpoint(args.checkpoint)
    vocab = vocab_for(cfg.task)
    if header["V"] != len(vocab):
        raise ToolRLError(f"checkpoint vocabulary size {header['V']} does not match task ({len(vocab)})")
    instances = load_instances(args.instances, cfg.task) if args.instances else eval_instances(cfg)
    with _threads(args.single_thread):
        em, records = evaluate(MLPPolicy(params, vocab.PAD), instances, vocab, cfg.env)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    print(f"EM {em:.3f} over {len(records)} instances")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    with _threads(args.single_thread):
        rows = run_ablation(cfg, args.out, n_jobs=1 if args.single_thread else args.jobs)
    seen = {}
    for r in rows:
        seen.setdefault(r["arm"], r["median_eval_em"])
    for arm, med in seen.items():
        print(f"{cfg.rl.algorithm:5s} {arm:20s} median EM {med:.3f}")
    return 0


def cmd_dump_manifest(args) -> int:
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_tool_specs([SEARCH_SPEC], os.path.join(args.out, "tools.json"))
        with open(os.path.join(args.out, "manifest.txt"), "w") as fh:
            fh.write(render_tool_manifest([SEARCH_SPEC]))
    else:
        sys.stdout.write(render_tool_manifest([SEARCH_SPEC]))
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.metrics) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ToolRLError(f"{args.metrics} has no rows")
    upd = [int(r["update"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(upd, [float(r["mean_episode_reward"]) for r in rows])
    axes[0].set_title("mean episode reward")
    ev = [(int(r["update"]), float(r["eval_em"])) for r in rows if r["eval_em"]]
    if ev:
        axes[1].plot(*zip(*ev), marker="o")
    axes[1].set_title("eval EM")
    axes[1].set_ylim(0, 1)
    axes[2].plot(upd, [float(r["mean_traj_length"]) for r in rows])
    axes[2].set_title("trajectory length")
    for ax in axes:
        ax.set_xlabel("update")
    fig.tight_layout()
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "training.png")
    fig.savefig(path, dpi=100)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="JSON file mirroring RunConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--algorithm", choices=("ppo", "grpo", "rloo", "reinforce_pp", "reinforce_pp_baseline"))
        p.add_argument("--no-loss-mask", action="store_true")
        p.add_argument("--no-advantage-mask", action="store_true")
        p.add_argument("--single-thread", action="store_true", help="limit BLAS pools to one thread")
        p.add_argument("--out", default="runs/latest")

    p = sub.add_parser("train", help="train a policy")
    run_flags(p)
    p.add_argument("--dump-trajectories", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instances", help="JSON-lines instance file (default: generated eval set)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="mask ablation over config seeds")
    run_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-manifest", help="print the tool manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_manifest)

    p = sub.add_parser("plot", help="plot a metrics.csv")
    p.add_argument("metrics")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ToolRLError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
