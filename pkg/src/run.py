from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy.stats import chisquare

from src.checkpoint import describe_checkpoint
from src.config import DEFAULT_GRIDS, SWEEP_AXES, parse_config
from src.errors import FedVCError
from src.experiment import build_data, run_experiment, run_sweep
from src.report import format_summary
from src.util import annotate, configure_logging, write_json

logger = logging.getLogger(__name__)

INTEGER_AXES = ("M", "d")


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML experiment configuration.")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a dotted config key, e.g. --set federation.rounds=5 (repeatable).",
    )
    parser.add_argument("--seed", type=int, default=None, help="Random seed (overrides the config).")
    parser.add_argument("--out", default=None, help="Output directory (overrides output.out).")
    parser.add_argument(
        "--strategy",
        nargs="+",
        default=None,
        help="Strategies to train, e.g. --strategy fedvc_em fedavg (overrides strategy.name).",
    )


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Federated virtual-concept learning simulator.")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO).")
    parser.add_argument("--summary-json", default=None, help="Optional path to write a JSON execution summary.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Train the configured strategies and write run artifacts.")
    _add_config_args(run)

    sweep = sub.add_parser("sweep", help="One run per value of a concept hyperparameter.")
    _add_config_args(sweep)
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES), help="Hyperparameter to sweep.")
    sweep.add_argument("--values", nargs="+", type=float, default=None,
                       help="Values to try (default: the ablation grid for the axis).")
    sweep.add_argument("--jobs", type=int, default=1, help="Child runs executed concurrently.")
    sweep.add_argument("--timeout", type=int, default=3600, help="Timeout in seconds per child run.")
    sweep.add_argument("--python", default=sys.executable, help="Python executable used for child runs.")

    inspect = sub.add_parser("inspect-ckpt", help="List the entries of a checkpoint.")
    inspect.add_argument("path", type=Path)

    audit = sub.add_parser("partition-audit", help="Build the partition and print per-group histograms.")
    _add_config_args(audit)
    return parser.parse_args(argv)


def _load(args: argparse.Namespace):
    return parse_config(args.config, args.overrides, seed=args.seed, out=args.out, strategies=args.strategy)


def _axis_values(axis: str, raw: list[float] | None) -> list[float]:
    values = raw if raw else DEFAULT_GRIDS[axis]
    return [int(v) if axis in INTEGER_AXES else float(v) for v in values]


def cmd_run(args: argparse.Namespace) -> tuple[int, dict]:
    cfg = _load(args)
    result = run_experiment(cfg)
    print(format_summary(result.summary))
    logger.info("Artifacts written to %s", result.out_dir)
    return 0, {
        "out_dir": str(result.out_dir),
        "outcomes": {name: asdict(o) for name, o in result.outcomes.items()},
        "summary": result.summary.to_dict(orient="records"),
    }


def cmd_sweep(args: argparse.Namespace) -> tuple[int, dict]:
    cfg = _load(args)
    values = _axis_values(args.axis, args.values)
    table, results = run_sweep(cfg, args.axis, values, jobs=args.jobs, timeout=args.timeout, python_cmd=args.python)
    failed = [r for r in results if r.status == "failed"]

    logger.info("Sweep summary:")
    for result in results:
        logger.info("- %s=%s: %s | %s (%.2fs)", result.axis, result.value, result.status,
                    result.message, result.duration_seconds)
    if not table.empty:
        print(table.to_string(index=False))
    return (1 if failed else 0), {
        "axis": args.axis,
        "results": [asdict(r) for r in results],
        "failed_count": len(failed),
    }


def cmd_inspect(args: argparse.Namespace) -> tuple[int, dict]:
    rows = describe_checkpoint(args.path)
    for row in rows:
        print(f"{row['name']:<32} {row['dtype']:<8} {str(tuple(row['shape'])):<16} {row['l2_norm']:.6g}")
    return 0, {"path": str(args.path), "entries": rows}


def cmd_partition_audit(args: argparse.Namespace) -> tuple[int, dict]:
    cfg = _load(args)
    ds, partition = build_data(cfg)
    manifest = partition.write_manifest(Path(cfg.output.out) / "partition.yaml")
    hist = partition.group_histograms(ds)
    roles = Counter(partition.roles)

    print(f"clients: {partition.num_clients} (train={roles['train']}, test={roles['test']})")
    groups = []
    for g in range(partition.num_groups):
        members = int(np.sum(partition.groups == g))
        line = f"group {g}: clients={members} heldout={g in partition.heldout_groups} classes={hist[g].tolist()}"
        entry = {"group": g, "clients": members, "histogram": hist[g].tolist()}
        if partition.expected_counts is not None:
            expected = partition.expected_counts[g]
            keep = expected > 0
            pvalue = float(chisquare(hist[g][keep], expected[keep] * hist[g].sum() / expected[keep].sum()).pvalue)
            line += f" chi2_p={pvalue:.4f}"
            entry["chi2_pvalue"] = pvalue
        print(line)
        groups.append(entry)
    logger.info("Manifest written to %s", manifest)
    return 0, {"manifest": str(manifest), "roles": dict(roles), "groups": groups}


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "inspect-ckpt": cmd_inspect,
    "partition-audit": cmd_partition_audit,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    configure_logging(args.log_level)

    try:
        code, summary = COMMANDS[args.command](args)
    except FedVCError as exc:
        logger.error("%s failed: %s", args.command, exc)
        annotate("error", args.command, str(exc))
        code, summary = 1, {"error": str(exc), "error_type": type(exc).__name__}

    if args.summary_json:
        path = write_json(Path(args.summary_json), {"command": args.command, "returncode": code, **summary})
        logger.info("Summary written to %s", path)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
