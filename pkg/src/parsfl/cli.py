"""Command-line runner: ``parsfl run`` and ``parsfl compare``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .clustering import plan_to_dict
from .config import SCENARIOS, STRATEGIES, ExperimentConfig, scenario
from .engine import RoundMetrics, Simulation, TrainingResult, GlobalModelState
from .errors import ConfigurationError

log = logging.getLogger("parsfl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parsfl", description="Clustered parallel split learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and write its metrics")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="JSON experiment config")
    src.add_argument("--scenario", help=f"preset: {', '.join(SCENARIOS)}")
    r.add_argument("--strategy", help=f"one of {', '.join(STRATEGIES)}")
    r.add_argument("--seed", type=int)
    r.add_argument("--rounds", type=int)
    r.add_argument("--out", type=Path, help="output directory (overrides output.out_dir)")

    c = sub.add_parser("compare", help="compare two metrics CSV files")
    c.add_argument("a", type=Path)
    c.add_argument("b", type=Path)
    c.add_argument("--target-acc", type=float, help="default: the lower of the two final accuracies")
    c.add_argument("--out", type=Path, help="also write the table as JSON here")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "run":
        return cmd_run(args)
    return cmd_compare(args)


# -- run -----------------------------------------------------------------------


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else scenario(args.scenario)
    doc = cfg.to_dict()
    if args.strategy is not None:
        doc["strategy"] = args.strategy
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.rounds is not None:
        doc["rounds"] = args.rounds
    if args.out is not None:
        doc["output"]["out_dir"] = str(args.out)
    return ExperimentConfig.from_dict(doc)


def cmd_run(args) -> int:
    try:
        cfg = resolve_config(args)
    except ConfigurationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        run_to_directory(cfg)
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime failure
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def run_to_directory(cfg: ExperimentConfig) -> TrainingResult:
    """Train and stream metrics into ``cfg.output.out_dir``."""
    out = Path(cfg.output.out_dir)
    plan_dir = out / "plans"
    out.mkdir(parents=True, exist_ok=True)
    if cfg.output.write_plans:
        plan_dir.mkdir(exist_ok=True)

    sim = Simulation(cfg)
    metrics, plans = [], []
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RoundMetrics.CSV_COLUMNS)
        for _ in range(cfg.rounds):
            m, plan = sim.step()
            writer.writerow(m.csv_row())
            fh.flush()
            if cfg.output.write_plans:
                (plan_dir / f"round_{m.round:03d}.json").write_text(json.dumps(plan_to_dict(plan), indent=1))
            metrics.append(m)
            plans.append(plan)
            log.info("round %d  t=%.3fs  acc=%.4f  clusters=%d", m.round, m.sim_time, m.test_accuracy,
                     len(plan.clusters))

    summary = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "rounds": len(metrics),
        "final_accuracy": metrics[-1].test_accuracy,
        "total_sim_time": float(sum(m.sim_time for m in metrics)),
        "total_traffic_bytes": int(sum(m.traffic_bytes for m in metrics)),
        "mean_intra_waiting": float(np.mean([m.intra_waiting for m in metrics])),
        "mean_inter_waiting": float(np.mean([m.inter_waiting for m in metrics])),
        "shard_label_histograms": sim.partition.histograms().tolist(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return TrainingResult(metrics, GlobalModelState(sim.params.copy(), sim.round), plans, sim.arch, sim.partition)


# -- compare -------------------------------------------------------------------


class SchemaMismatch(ValueError):
    pass


def read_metrics(path: Path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RoundMetrics.CSV_COLUMNS:
            raise SchemaMismatch(f"{path}: header {header} does not match {list(RoundMetrics.CSV_COLUMNS)}")
        rows = [r for r in reader if r]
    if not rows:
        raise SchemaMismatch(f"{path}: no rows")
    try:
        cols = {name: np.array([float(r[k]) for r in rows]) for k, name in enumerate(header)}
    except (ValueError, IndexError) as exc:
        raise SchemaMismatch(f"{path}: malformed row ({exc})") from exc
    return cols


def time_to_accuracy(cols: dict, target: float):
    """Cumulative simulated time at the first round reaching ``target``, or None."""
    hit = np.flatnonzero(cols["test_accuracy"] >= target)
    if len(hit) == 0:
        return None
    return float(np.cumsum(cols["sim_time"])[hit[0]])


def summarize(cols: dict, target: float) -> dict:
    return {
        "time_to_accuracy": time_to_accuracy(cols, target),
        "final_accuracy": float(cols["test_accuracy"][-1]),
        "total_sim_time": float(cols["sim_time"].sum()),
        "total_traffic_bytes": float(cols["traffic_bytes"].sum()),
        "mean_intra_waiting": float(cols["intra_waiting"].mean()),
        "mean_inter_waiting": float(cols["inter_waiting"].mean()),
    }


def compare_tables(a: dict, b: dict, target: float | None = None) -> dict:
    if target is None:
        target = min(a["test_accuracy"][-1], b["test_accuracy"][-1])
    sa, sb = summarize(a, target), summarize(b, target)
    rows = {}
    for key in sa:
        va, vb = sa[key], sb[key]
        delta = None if va is None or vb is None else vb - va
        rows[key] = {"a": va, "b": vb, "delta": delta}
    return {"target_accuracy": float(target), "rows": rows}


def format_table(table: dict) -> str:
    def cell(v):
        if v is None:
            return "not reached"
        return f"{v:.6g}"

    lines = [f"target accuracy: {table['target_accuracy']:.4f}",
             f"{'metric':<22}{'a':>16}{'b':>16}{'b - a':>16}"]
    for key, r in table["rows"].items():
        delta = "n/a" if r["delta"] is None else cell(r["delta"])
        lines.append(f"{key:<22}{cell(r['a']):>16}{cell(r['b']):>16}{delta:>16}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    try:
        a, b = read_metrics(args.a), read_metrics(args.b)
    except SchemaMismatch as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cannot read metrics: {exc}", file=sys.stderr)
        return EXIT_USAGE
    table = compare_tables(a, b, args.target_acc)
    print(format_table(table))
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(table, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
