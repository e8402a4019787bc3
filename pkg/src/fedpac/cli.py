"""Command-line runner: ``fedpac run <config>`` and ``fedpac validate <config>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Cell, ConfigError, ExperimentConfig, build_task, load_config, suite_cells
from .federation import DivergenceError, default_threads, run_federated
from .metrics import emit_reports, rounds_to_target, summarize

log = logging.getLogger("fedpac")

SUMMARY_KEYS = ("final_acc", "final_test_loss", "final_train_loss", "final_grad_norm", "mean_drift_frob")


@dataclass
class RunOutcome:
    cell: Cell
    seed: int
    summary: dict | None
    error: str | None = None


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Fold command-line overrides into the config and revalidate."""
    data = cfg.model_dump()
    if args.seeds:
        data["seeds"] = args.seeds
    if args.engine:
        data["engine"] = args.engine
    if args.optimizer:
        data["optimizer"] = args.optimizer
    if args.beta is not None:
        data["beta_mix"] = args.beta
    if args.alpha is not None:
        data["task"]["alpha"] = None if args.alpha.lower() in ("iid", "none") else float(args.alpha)
    if args.out:
        data["output"] = args.out
    return ExperimentConfig.model_validate(data)


def _slug(label: str) -> str:
    return label.replace("=", "").replace(".", "p")


def run_cell(cfg: ExperimentConfig, cell: Cell, seed: int, out_dir: Path, threads: int = 1) -> RunOutcome:
    rc = cfg.round_config(seed, threads=threads, **dict(cell.overrides))
    task = build_task(cfg, seed)
    try:
        reports = run_federated(task, rc, cell.engine)
    except DivergenceError as err:
        log.warning("%s seed %d diverged: %s", cell.label, seed, err)
        return RunOutcome(cell, seed, None, str(err))
    path = out_dir / f"{_slug(cell.label)}_seed{seed}.csv"
    emit_reports(reports, path)
    summary = summarize(reports)
    if cfg.target_loss is not None:
        summary["rounds_to_target"] = rounds_to_target(reports, cfg.target_loss)
    return RunOutcome(cell, seed, summary)


def aggregate(outcomes: list[RunOutcome], cells: list[Cell]) -> list[dict]:
    """One row per cell: mean and std over completed seeds."""
    rows = []
    for cell in cells:
        done = [o for o in outcomes if o.cell == cell and o.summary is not None]
        row = {"cell": cell.label, "engine": cell.engine, "completed": len(done),
               "diverged": sum(1 for o in outcomes if o.cell == cell and o.summary is None)}
        for key in SUMMARY_KEYS + (("rounds_to_target",) if done and "rounds_to_target" in done[0].summary else ()):
            vals = [o.summary[key] for o in done if o.summary.get(key) is not None]
            if vals:
                row[f"{key}_mean"] = float(np.mean(vals))
                row[f"{key}_std"] = float(np.std(vals))
        rows.append(row)
    return rows


def write_aggregate(rows: list[dict], out_dir: Path) -> None:
    (out_dir / "summary.json").write_text(json.dumps(rows, indent=2, sort_keys=True, default=str) + "\n")
    cols = sorted({k for r in rows for k in r} - {"cell", "engine"})
    lines = [",".join(["cell", "engine"] + cols)]
    for r in rows:
        lines.append(",".join([r["cell"], r["engine"]] + [repr(r[c]) if c in r else "" for c in cols]))
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")


def run(config_path, args=None) -> int:
    try:
        cfg = load_config(config_path)
        if args is not None:
            cfg = apply_overrides(cfg, args)
    except ConfigError as err:
        for d in err.diagnostics:
            print(d, file=sys.stderr)
        return 2
    except ValueError as err:  # override produced an invalid config
        print(f"{config_path}: {err}", file=sys.stderr)
        return 2

    out_dir = Path(cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = suite_cells(cfg)
    jobs = [(cell, seed) for cell in cells for seed in cfg.seeds]
    threads = default_threads()
    log.info("%s: %d runs into %s", cfg.name, len(jobs), out_dir)
    # runs are independent and seeded, so parallel execution does not change any output byte
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(lambda j: run_cell(cfg, j[0], j[1], out_dir), jobs))
    else:
        outcomes = [run_cell(cfg, cell, seed, out_dir) for cell, seed in jobs]

    rows = aggregate(outcomes, cells)
    write_aggregate(rows, out_dir)
    for row in rows:
        acc = row.get("final_acc_mean")
        loss = row.get("final_train_loss_mean")
        print(f"{row['cell']:>14s}  done={row['completed']}  "
              f"train_loss={loss if loss is None else f'{loss:.4f}'}  acc={acc if acc is None else f'{acc:.4f}'}")
    return 0 if any(o.summary is not None for o in outcomes) else 1


def validate(config_path) -> list[str]:
    try:
        load_config(config_path)
    except ConfigError as err:
        return err.diagnostics
    return []


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpac", description="Federated second-order optimization simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides config 'output')")
    r.add_argument("--seeds", type=_seed_list, help="comma-separated seeds, e.g. 42,43,44")
    r.add_argument("--engine", choices=("fedavg", "fedsoa", "fedpac"))
    r.add_argument("--optimizer", choices=("sophia", "muon", "soap"))
    r.add_argument("--beta", type=float, help="correction mixing coefficient")
    r.add_argument("--alpha", help="Dirichlet concentration, or 'iid'")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "validate":
        diags = validate(args.config)
        for d in diags:
            print(d)
        if not diags:
            print(f"{args.config}: ok")
        return 1 if diags else 0
    return run(args.config, args)


if __name__ == "__main__":
    sys.exit(main())
