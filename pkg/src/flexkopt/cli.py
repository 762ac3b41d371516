"""Command line: dataset generation, training, solving, and evaluation.

Exit codes: 0 ok, 2 usage (argparse), 3 configuration, 4 data, 5 internal.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import (
    ConfigError,
    DataError,
    FlexkoptError,
    InfeasibleConstructionError,
    MalformedInputError,
    UnsupportedFormatError,
)
from .instance import CVRP, TSP, generate_uniform, read_dataset, write_dataset
from .oracle import verify_tour
from .search import solve_batch
from .solution import Tour, capacity_violation, objective
from .training import Config, load_checkpoint, train


def _int_at_least(minimum: int):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"not an integer: {text}") from exc
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {value}")
        return value

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexkopt",
        description="Learning-to-search routing solver with flexible k-opt.",
    )
    parser.add_argument(
        "--threads", type=_int_at_least(1), default=1,
        help="worker/thread cap (default 1, keeps runs deterministic)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a JSONL instance dataset")
    p_gen.add_argument("--problem", choices=[TSP, CVRP], required=True)
    p_gen.add_argument("--n", type=_int_at_least(3), required=True,
                       help="customers (cvrp) or nodes (tsp)")
    p_gen.add_argument("--count", type=_int_at_least(1), required=True)
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--config", required=True,
                         help="flat key=value config file")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_solve = sub.add_parser("solve", help="solve instances with a checkpoint")
    p_solve.add_argument("--ckpt", required=True)
    p_solve.add_argument("--instances", required=True)
    p_solve.add_argument("--T", type=_int_at_least(1), required=True,
                         help="search steps per augmentation copy")
    p_solve.add_argument("--d2a", type=_int_at_least(1), default=1,
                         help="number of augmentation copies")
    p_solve.add_argument("--t-d2a", type=_int_at_least(1), default=10,
                         dest="t_d2a", help="stall steps before re-augmentation")
    p_solve.add_argument("--seed", type=int, required=True)
    p_solve.add_argument("--out", required=True)
    p_solve.set_defaults(func=cmd_solve)

    p_eval = sub.add_parser("eval", help="score results against a reference")
    p_eval.add_argument("--results", required=True)
    p_eval.add_argument("--reference", required=True)
    p_eval.add_argument("--instances", default=None,
                        help="optional instance JSONL for feasibility checks")
    p_eval.add_argument("--out", default=None, help="optional summary JSON path")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def cmd_gen(args: argparse.Namespace) -> int:
    instances = [
        generate_uniform(args.problem, args.n, args.seed + i)
        for i in range(args.count)
    ]
    write_dataset(args.out, instances)
    print(f"wrote {len(instances)} {args.problem} instances to {args.out}")
    return 0


def _read_config_file(path: str) -> Config:
    raw: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        raw[key.strip()] = value.strip()
    return Config.from_mapping(raw)


def cmd_train(args: argparse.Namespace) -> int:
    config = _read_config_file(args.config)
    rng = np.random.default_rng(config.seed)
    bundle = train(config, rng, out_dir=args.out)
    print(
        f"trained {config.epochs} epochs; best validation objective "
        f"{bundle.val_obj:.6f} at epoch {bundle.epoch}; artifacts in {args.out}"
    )
    return 0


def cmd_solve(args: argparse.Namespace) -> int:
    bundle = load_checkpoint(args.ckpt)
    instances = read_dataset(args.instances)
    rng = np.random.default_rng(args.seed)
    results = solve_batch(
        instances, bundle, args.T, args.d2a, args.t_d2a, rng
    )
    with open(args.out, "w") as fh:
        for inst, res in zip(instances, results):
            seq = np.asarray(res.best_tour, dtype=np.int64)
            succ = np.empty(inst.n_total, dtype=np.int64)
            succ[seq] = np.roll(seq, -1)
            report = verify_tour(inst, succ)
            if not report.ok:
                raise FlexkoptError(
                    f"solver output for {inst.uid} failed verification: "
                    f"{report.failures}"
                )
            fh.write(json.dumps(res.to_json_dict(), sort_keys=True) + "\n")
    print(f"solved {len(instances)} instances -> {args.out}")
    return 0


def _read_jsonl(path: str) -> list[dict]:
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: bad JSON: {exc}") from exc
    return rows


def cmd_eval(args: argparse.Namespace) -> int:
    results = _read_jsonl(args.results)
    reference = {row["id"]: row for row in _read_jsonl(args.reference)}
    instances = None
    if args.instances is not None:
        instances = {inst.uid: inst for inst in read_dataset(args.instances)}

    if not results:
        raise DataError(f"{args.results}: no result rows")
    gaps = []
    costs = []
    feasible = 0
    for row in results:
        rid = row.get("id")
        if rid not in reference:
            raise DataError(f"result id {rid!r} missing from reference")
        cost = float(row["best_cost"])
        opt = float(reference[rid]["best_cost"])
        costs.append(cost)
        gaps.append((cost - opt) / opt)
        if instances is not None:
            if rid not in instances:
                raise DataError(f"result id {rid!r} missing from instances")
            inst = instances[rid]
            tour = Tour.from_sequence(np.asarray(row["best_tour"], dtype=np.int64))
            recomputed = objective(inst, tour)
            if abs(recomputed - cost) > 1e-6 * max(1.0, cost):
                raise DataError(
                    f"{rid}: reported cost {cost} != recomputed {recomputed}"
                )
            violation = (
                capacity_violation(inst, tour) if inst.kind == CVRP else 0.0
            )
            feasible += violation == 0.0
        else:
            # Solver outputs are best-so-far tours, which are feasible by
            # construction; without instances we take the rows at face value.
            feasible += 1

    summary = {
        "count": len(results),
        "mean_obj": float(np.mean(costs)),
        "mean_gap": float(np.mean(gaps)),
        "feasibility_rate": feasible / len(results),
    }
    print(f"count: {summary['count']}")
    print(f"mean_obj: {summary['mean_obj']:.6f}")
    print(f"mean_gap: {summary['mean_gap'] * 100.0:.4f}%")
    print(f"feasibility_rate: {summary['feasibility_rate']:.4f}")
    if args.out is not None:
        Path(args.out).write_text(json.dumps(summary, sort_keys=True) + "\n")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (
        DataError,
        MalformedInputError,
        UnsupportedFormatError,
        InfeasibleConstructionError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except FlexkoptError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 5
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
