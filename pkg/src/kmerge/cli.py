"""Command-line front door.

Exit codes: 0 success, 1 runtime/domain error, 2 usage or configuration
error. Every subcommand is deterministic given its flags and seeds,
apart from measured wall-clock fields in reports.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import FORMAT_VERSION, read_adapter, write_adapter
from .bench import (
    GEOMETRY_PRESETS,
    GeneratorConfig,
    OrderingSpec,
    adapter_file_bytes,
    generate_suite,
    load_suite,
    lora_param_count,
    run_simulation,
    save_suite,
    threshold_sweep,
)
from .engine import MANIFEST_VERSION, MergeEngine, PolicyConfig
from .errors import ConfigError, KMergeError
from .merging import (
    MergedDelta,
    MergeOperator,
    RankPolicy,
    dare_merge,
    dare_ties_merge,
    linear_merge,
    refactor,
    running_average_merge,
    ties_merge,
)
from .merging import delta_map
from .similarity import calibrate_threshold, similarity_matrix

OPERATOR_FLAGS = ("running-average", "linear", "ties", "dare", "dare-ties")


def _operator_from_flags(args) -> MergeOperator:
    return MergeOperator(
        kind=args.operator.replace("-", "_"),
        density=args.density,
        drop_rate=args.drop_rate,
        rng_seed=args.op_seed,
    )


def _policy_from_flags(args) -> PolicyConfig:
    return PolicyConfig(
        budget_k=args.k,
        variant=args.variant.replace("-", "_"),
        threshold_s=args.threshold,
        operator=_operator_from_flags(args),
        rank_policy=RankPolicy(mode=args.rank_mode, target_rank=args.target_rank),
    )


def _policy_from_config_file(path: str) -> PolicyConfig:
    manifest = json.loads(Path(path).read_text())
    return PolicyConfig(
        budget_k=int(manifest["budget_k"]),
        variant=str(manifest["variant"]),
        threshold_s=manifest.get("threshold_s"),
        operator=MergeOperator(**manifest["operator"]),
        rank_policy=RankPolicy(**manifest["rank_policy"]),
    )


def cmd_gen(args) -> int:
    config = GeneratorConfig(
        alpha_types=args.alpha,
        beta_langs=args.beta,
        rank=args.rank,
        n_layers=args.layers,
        layer_spec=((args.width, args.width),) * 4,
        type_strength=args.type_strength,
        lang_strength=args.lang_strength,
        noise_strength=args.noise_strength,
        seed=args.seed,
    )
    adapters, tasks = generate_suite(config)
    save_suite(adapters, tasks, args.out)
    print(f"wrote {len(adapters)} adapters to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    adapters, _ = _load_any_suite(args.suite)
    s = calibrate_threshold(adapters)
    print(f"{s:.6f}")
    return 0


def _load_any_suite(directory: str):
    directory = Path(directory)
    if (directory / "tasks.json").exists():
        return load_suite(directory)
    adapters = [read_adapter(p) for p in sorted(directory.glob("*.kmrg"))]
    return adapters, None


def cmd_run(args) -> int:
    adapters, tasks = load_suite(args.suite)
    if args.config:
        base = _policy_from_config_file(args.config)
    else:
        base = _policy_from_flags(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def one(seed: int):
        ordering = OrderingSpec(kind=args.ordering.replace("-", "_"), seed=seed)
        store_dir = None
        if args.store_dir and seed == args.seeds[-1]:
            store_dir = args.store_dir
        report = run_simulation(adapters, tasks, ordering, base, store_dir=store_dir)
        report.to_json(f"{out}_seed{seed}.json")
        report.to_csv(f"{out}_seed{seed}.csv")
        return report.final_score

    if args.parallel and len(args.seeds) > 1:
        with ThreadPoolExecutor(max_workers=min(4, len(args.seeds))) as pool:
            scores = list(pool.map(one, args.seeds))
    else:
        scores = [one(seed) for seed in args.seeds]
    print(f"final S: mean={np.mean(scores):.4f} std={np.std(scores):.4f} over seeds {args.seeds}")
    return 0


def cmd_sweep(args) -> int:
    adapters, tasks = load_suite(args.suite)
    args.variant = "k-merge-pp"
    if args.threshold is None:
        args.threshold = 0.0  # placeholder; replaced by each swept value
    config = _policy_from_flags(args)
    table = threshold_sweep(
        adapters, tasks, config, args.s_values, OrderingSpec("random", args.seeds[0])
    )
    for row in table:
        print(f"s={row['s']:.4f}  S={row['final_score']:.4f}  occupied={row['occupied']}")
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=2))
    return 0


def cmd_merge(args) -> int:
    x = read_adapter(args.inputs[0])
    y = read_adapter(args.inputs[1])
    operator = _operator_from_flags(args)
    kind = operator.kind
    if kind == "running_average":
        merged = running_average_merge(x, 1, y)
    elif kind == "linear":
        merged = linear_merge(x, y, weight=args.weight)
    elif kind == "ties":
        merged = ties_merge([delta_map(x), delta_map(y)], operator.density)
    elif kind == "dare":
        merged = dare_merge(x, y, operator)
    else:
        merged = dare_ties_merge(x, y, operator)
    target_rank = args.target_rank or max(x.rank, y.rank)
    result = refactor(
        merged,
        RankPolicy(mode="svd_truncate", target_rank=target_rank),
        task_id=f"merged-{x.task_id}-{y.task_id}",
        scale_numerator=x.scaling * target_rank,
    )
    write_adapter(result.adapter, args.out)
    report = {
        "operator": kind,
        "merge_count": merged.merge_count,
        "target_rank": target_rank,
        "per_layer_residuals": {str(k): v for k, v in sorted(result.residuals.items(), key=lambda kv: kv[0].sort_key())},
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2))
    print(f"wrote merged adapter to {args.out}")
    return 0


def cmd_sim(args) -> int:
    adapters, _ = _load_any_suite(args.suite)
    matrix = similarity_matrix(adapters)
    if args.csv:
        matrix.to_csv(args.csv)
        print(f"wrote {len(matrix.adapter_ids)}x{len(matrix.adapter_ids)} matrix to {args.csv}")
    else:
        for name, row in zip(matrix.adapter_ids, matrix.values):
            print(name, " ".join(f"{v:+.4f}" for v in row))
    return 0


def cmd_route(args) -> int:
    engine = MergeEngine.restore(args.store)
    slot = engine.route(args.task)
    print(slot)
    return 0


def cmd_inspect(args) -> int:
    if args.geometry:
        modules = GEOMETRY_PRESETS[args.geometry]
        params = lora_param_count(modules, args.rank)
        # header size for a representative merged-adapter metadata block
        header = json.dumps(
            {
                "task_id": "slot-1",
                "problem_type": "merged",
                "language": "merged",
                "rank": args.rank,
                "scale_numerator": 128.0,
                "layers": [
                    {"layer": i, "proj": "query", "d_in": d_in, "d_out": d_out}
                    for i, (d_in, d_out) in enumerate(modules)
                ],
            }
        ).encode()
        size = adapter_file_bytes(len(header), params)
        print(f"geometry: {args.geometry}")
        print(f"adapted modules: {len(modules)}")
        print(f"parameters per adapter (rank {args.rank}): {params}")
        print(f"file bytes per adapter: {size}")
        return 0
    manifest = json.loads((Path(args.store) / "manifest.json").read_text())
    print(json.dumps(manifest, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kmerge",
        description="Budget-constrained continual merging of low-rank adapters.",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"kmerge {__version__} (adapter format v{FORMAT_VERSION}, manifest v{MANIFEST_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic adapter suite")
    p.add_argument("--alpha", type=int, default=5)
    p.add_argument("--beta", type=int, default=8)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--type-strength", type=float, default=1.0)
    p.add_argument("--lang-strength", type=float, default=0.1)
    p.add_argument("--noise-strength", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", help="median pairwise similarity of a held-out suite")
    p.add_argument("suite")
    p.set_defaults(func=cmd_calibrate)

    def policy_flags(p):
        p.add_argument("--k", type=int, required=True)
        p.add_argument("--variant", choices=["k-merge", "k-merge-pp"], default="k-merge")
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--operator", choices=list(OPERATOR_FLAGS), default="running-average")
        p.add_argument("--density", type=float, default=0.5)
        p.add_argument("--drop-rate", type=float, default=0.5)
        p.add_argument("--op-seed", type=int, default=0)
        p.add_argument("--rank-mode", choices=["svd_truncate", "factor_average"], default="svd_truncate")
        p.add_argument("--target-rank", type=int, default=4)

    p = sub.add_parser("run", help="replay a stream and write score reports")
    p.add_argument("--suite", required=True)
    policy_flags(p)
    p.add_argument("--config", help="JSON policy config (manifest schema); overrides flags")
    p.add_argument("--ordering", choices=["random", "problem-types", "worst"], default="random")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--store-dir", help="persist the final store of the last seed here")
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="threshold ablation for k-merge-pp")
    p.add_argument("--suite", required=True)
    policy_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--s-values", type=float, nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("merge", help="one-shot merge of two adapter files")
    p.add_argument("inputs", nargs=2, metavar="ADAPTER")
    p.add_argument("--op", dest="operator", choices=list(OPERATOR_FLAGS), required=True)
    p.add_argument("--weight", type=float, default=0.5)
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--drop-rate", type=float, default=0.5)
    p.add_argument("--seed", dest="op_seed", type=int, default=0)
    p.add_argument("--target-rank", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write a JSON merge report here")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("sim", help="pairwise similarity matrix of a suite")
    p.add_argument("suite")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("route", help="look up the slot serving a task index")
    p.add_argument("--store", required=True)
    p.add_argument("--task", type=int, required=True)
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("inspect", help="pretty-print a store manifest or a geometry's storage cost")
    p.add_argument("--store")
    p.add_argument("--geometry", choices=sorted(GEOMETRY_PRESETS))
    p.add_argument("--rank", type=int, default=32)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "inspect" and not (args.store or args.geometry):
        parser.error("inspect needs --store or --geometry")
    if args.command == "run" and args.variant == "k-merge-pp" and args.threshold is None and not args.config:
        parser.error("k-merge-pp requires --threshold")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KMergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
