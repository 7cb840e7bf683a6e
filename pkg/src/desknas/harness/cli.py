"""Command-line entry point.

Every configuration key is also a flag spelled like its dotted path, e.g.
``--alpha.lr 0.003`` or ``--dataset.name synthetic-blobs``. Flags override
values read from ``--config``.
"""

import argparse
import logging
import os
import sys

import numpy as np
import yaml

from ..errors import DeskNASError
from .config import METHOD_SECTIONS, SECTIONS, ExperimentConfig, flat_keys, set_key

log = logging.getLogger("desknas")


def _add_config_flags(p):
    p.add_argument("--config", help="YAML config file")
    grp = p.add_argument_group("config keys")
    for key in flat_keys():
        if key == "seed":
            continue
        grp.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="desknas", description="Desk-scale architecture search.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("search", help="run a search (or the two-stage pipeline)")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")

    p = sub.add_parser("derive", help="print the derived architecture of a finished run")
    p.add_argument("run_dir")

    p = sub.add_parser("eval", help="evaluate a run's derived architecture on the validation split")
    p.add_argument("run_dir")
    p.add_argument("--retrain-epochs", type=int,
                   help="retrain from scratch for this many epochs instead of using shared weights")

    p = sub.add_parser("tau", help="Kendall tau between two score columns of a CSV")
    p.add_argument("csv")
    p.add_argument("--search-col", default="search_top1")
    p.add_argument("--retrain-col", default="retrain_top1")
    p.add_argument("--item-col", default="arch")
    p.add_argument("--mode", choices=("inter", "intra"), default="inter")
    p.add_argument("--out", help="write the pair table here")

    p = sub.add_parser("bench-complexity", help="per-step MAC / activation counters across n")
    p.add_argument("--n", default="2,4,8", help="comma-separated candidate counts")
    p.add_argument("--methods", default="dsnas,snas,proxyless-st,spos")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference check on random small graphs")
    p.add_argument("--graphs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def config_from_args(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    # the method decides which method-specific section exists, so apply it first
    if "method" in overrides:
        set_key(cfg, "method", overrides.pop("method"))
        # untouched defaults of the previous method's section go; edited ones stay and fail
        for section, method in METHOD_SECTIONS.items():
            value = getattr(cfg, section)
            if method != cfg.method and value is not None and value == SECTIONS[section]():
                setattr(cfg, section, None)
        cfg.__post_init__()
    for key, value in overrides.items():
        set_key(cfg, key, value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_search(args):
    from .run import run
    cfg = config_from_args(args)
    res = run(cfg, force=args.force, resume=args.resume, max_steps=args.max_steps)
    print(f"output: {res.output_dir}")
    if "derived" in res.summary:
        print("derived: " + "-".join(str(i) for i in res.summary["derived"]))
    if res.summary.get("tau_intra") is not None:
        print(f"tau_intra: {res.summary['tau_intra']:.6f}")
    return 0


def _load_run(run_dir):
    from .checkpoint import load_checkpoint, restore_state
    from .data import load_dataset
    from .run import CHECKPOINT
    cfg = ExperimentConfig.load(os.path.join(run_dir, "config.yaml"))
    dataset = load_dataset(cfg.dataset, cfg.seed)
    state = restore_state(load_checkpoint(os.path.join(run_dir, CHECKPOINT)), cfg, dataset)
    return cfg, dataset, state


def _run_indices(run_dir, state):
    from ..supernet import derived_indices
    summary_path = os.path.join(run_dir, "summary.yaml")
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            summary = yaml.safe_load(fh) or {}
        if summary.get("derived") is not None:
            return tuple(summary["derived"])
    return derived_indices(state.net)


def _cmd_derive(args):
    from ..supernet import dump_architecture
    _, _, state = _load_run(args.run_dir)
    sys.stdout.write(dump_architecture(state.net, _run_indices(args.run_dir, state)))
    return 0


def _cmd_eval(args):
    from ..baselines import evaluate_arch, retrain_arch
    cfg, dataset, state = _load_run(args.run_dir)
    indices = _run_indices(args.run_dir, state)
    if args.retrain_epochs is not None:
        cfg.pipeline.retrain_epochs = args.retrain_epochs
        top1 = retrain_arch(cfg, dataset, indices, cfg.seed)
        print(f"retrained val top1: {top1:.6f}")
    else:
        top1 = evaluate_arch(state.net, indices, dataset.x_val, dataset.y_val)
        print(f"shared-weight val top1: {top1:.6f}")
    return 0


def _cmd_tau(args):
    from ..metrics import read_scores_csv, tau_report
    search, retrain, items = read_scores_csv(args.csv, args.search_col, args.retrain_col,
                                             args.item_col)
    rep = tau_report(search, retrain, args.mode, items=items)
    if args.out:
        rep.write_csv(args.out)
    print(f"tau_{args.mode}: {rep.tau:.6f} (concordant {rep.concordant}, "
          f"discordant {rep.discordant}, n {len(search)})")
    return 0


def _cmd_bench(args):
    from ..metrics import write_counter_csv
    from .bench import bench_complexity
    try:
        ns = [int(t) for t in args.n.split(",") if t.strip()]
    except ValueError:
        raise SystemExit(f"desknas bench-complexity: --n expects integers, got {args.n!r}")
    rows = bench_complexity(ns, methods=[m.strip() for m in args.methods.split(",")])
    write_counter_csv(args.out or sys.stdout, rows)
    return 0


def _cmd_gradcheck(args):
    from ..tensorcore.randgraph import run_gradcheck
    worst = run_gradcheck(args.graphs, np.random.default_rng(args.seed), args.epsilon)
    print(f"max relative error over {args.graphs} graphs: {worst:.3e}")
    return 0 if worst < args.tolerance else 1


COMMANDS = {"search": _cmd_search, "derive": _cmd_derive, "eval": _cmd_eval, "tau": _cmd_tau,
            "bench-complexity": _cmd_bench, "gradcheck": _cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help()
        return 0
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DeskNASError as exc:
        print(f"desknas {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
