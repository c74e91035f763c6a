"""Command-line entry point: experiment runs, aggregation, self-checks."""

from __future__ import annotations

import argparse
import os
import sys

# Single-threaded BLAS before numpy loads: reruns stay bit-identical and
# parallel seed workers don't fight over the cores.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from . import harness  # noqa: E402
from .harness import ExperimentSpec  # noqa: E402


def _parse_value(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def load_overrides(path: str) -> dict:
    """`key=value` lines; blank lines and `#` comments ignored."""
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed override line: {line!r}")
            key, raw = line.split("=", 1)
            out[key.strip()] = _parse_value(raw.strip())
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fourroom-lab",
        description="Exploration/replay-diversity experiments in a 4-room gridworld",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment recipe (idempotent)")
    run.add_argument("recipe", choices=harness.RECIPES)
    run.add_argument("--scale", choices=harness.SCALES, default="desk")
    run.add_argument("--seeds", type=int, default=10, help="number of seeds (0..N-1)")
    run.add_argument("--out", default="experiments", help="output root directory")
    run.add_argument("--jobs", type=int, default=min(2, os.cpu_count() or 1))
    run.add_argument("--config", help="key=value override file applied to every run config")

    agg = sub.add_parser("aggregate", help="mean and 95% CI per config/step/metric")
    agg.add_argument("recipe_dir", help="a recipe output directory containing runs/")

    oc = sub.add_parser("oracle-check", help="exactness checks for the brute-force oracles")
    oc.add_argument("--pairs", type=int, default=20)
    oc.add_argument("--seed", type=int, default=0)

    gc = sub.add_parser("grad-check", help="finite-difference check of the loss gradient")
    gc.add_argument("--seeds", type=int, default=5)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        spec = ExperimentSpec(
            recipe=args.recipe,
            scale=args.scale,
            seeds=tuple(range(args.seeds)),
            out_dir=args.out,
            jobs=args.jobs,
            overrides=load_overrides(args.config) if args.config else {},
        )
        manifest = harness.run_experiment(spec)
        failed = [n for n, r in manifest["runs"].items() if r["status"] != "done"]
        print(f"{len(manifest['runs']) - len(failed)}/{len(manifest['runs'])} runs complete "
              f"-> {spec.recipe_dir}")
        return 1 if failed else 0
    if args.command == "aggregate":
        out = harness.aggregate(args.recipe_dir)
        print(f"wrote {out}")
        return 0
    if args.command == "oracle-check":
        return 0 if harness.oracle_check(n_pairs=args.pairs, seed=args.seed) else 1
    if args.command == "grad-check":
        return 0 if harness.grad_check(n_seeds=args.seeds) else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
