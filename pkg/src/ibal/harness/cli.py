"""Command-line entry point: train, eval, mi-dump, redundancy, ablate, selfcheck."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from ..attackers import GroupPartition
from ..training import TrainingAborted, train
from .ablation import ablate
from .checkpoint import checkpoint_fn, load_checkpoint
from .config import ExperimentConfig, load_config, save_config
from .diagnostics import redundancy_report, selfcheck
from .evaluation import run_eval
from .metrics import MetricsWriter
from .midump import mi_dump


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_train(seed=args.seed)
    return cfg


def _partition(spec: str, n: int, K: int) -> GroupPartition:
    g1 = tuple(sorted(int(x) for x in spec.split(",") if x.strip())) if spec else ()
    return GroupPartition(g1, tuple(i for i in range(n) if i not in g1), max(K, len(g1)))


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    try:
        with MetricsWriter(out / "metrics.csv") as writer:
            train(cfg.train, on_row=writer, checkpoint_fn=checkpoint_fn(out))
    except TrainingAborted as exc:
        print(f"training aborted: {exc} (diagnostic checkpoint: {exc.checkpoint})", file=sys.stderr)
        return 2
    print(f"wrote {out / 'metrics.csv'} and {out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed + s for s in cfg.seeds])
    if args.episodes:
        cfg = dataclasses.replace(cfg, episodes=args.episodes)
    report = run_eval(args.checkpoint, cfg, policy=args.policy)
    out = Path(args.out)
    report.write(out / "eval.json")
    report.write(out / "eval.csv")
    print(report.table())
    return 0


def cmd_mi_dump(args) -> int:
    state = load_checkpoint(args.checkpoint)
    n = state.config.env.n_agents
    dump = mi_dump(state, _partition(args.g1, n, state.config.K), str(Path(args.out) / "midump.json"),
                   seed=args.seed or 0)
    print(f"precision {dump.precision:.3f} recall {dump.recall:.3f} "
          f"masked/max {dump.masked_max_ratio:.4f}")
    return 0


def cmd_redundancy(args) -> int:
    state = load_checkpoint(args.checkpoint)
    g1 = [int(x) for x in args.g1.split(",")]
    rep = redundancy_report(state, g1, seed=args.seed or 0, steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "redundancy.json").write_text(json.dumps(dataclasses.asdict(rep), indent=2) + "\n")
    ratio = abs(rep.residual) / rep.individual if rep.individual > 0 else float("inf")
    print(f"group-wise {rep.groupwise:.4f} individual {rep.individual:.4f} "
          f"residual {rep.residual:.4f} ({100 * ratio:.1f}% of individual)")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    report = ablate(cfg, args.variant, args.out)
    print(report.table())
    return 0


def cmd_selfcheck(args) -> int:
    results = selfcheck(seed=args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<22} {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ibal", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment config JSON (defaults built in)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="runs/out")
        sp.set_defaults(func=fn)
        return sp

    add("train", cmd_train, "train a policy and write metrics.csv plus checkpoints")
    sp = add("eval", cmd_eval, "evaluate a checkpoint over attacks and perturbations")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--policy", default="policy")
    sp.add_argument("--episodes", type=int, default=0)
    sp = add("mi-dump", cmd_mi_dump, "dump normalized MI before/after masking")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--g1", default="0", help="comma-separated attacked agents")
    sp = add("redundancy", cmd_redundancy, "group-wise vs summed dimension-wise MI")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--g1", default="0")
    sp.add_argument("--steps", type=int, default=1500)
    sp = add("ablate", cmd_ablate, "train and evaluate one ablation variant")
    sp.add_argument("--variant", required=True)
    add("selfcheck", cmd_selfcheck, "gradient, monotonicity, schedule and equivalence checks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
