"""Command-line entry point: ``run``, ``train-vision`` and ``report``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import MODES, ConfigError, canonical_strategy, load_scenario
from .harness import (columns_to_csv, read_csv, run_monte_carlo, training_samples,
                      write_results)
from .vision_fusion import TrainingError, train_error_table

log = logging.getLogger("isacslam")


def _cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    over: dict = {}
    if args.strategy:
        names = [canonical_strategy(s) for part in args.strategy for s in part.split(",") if s]
        over["beam"] = {"strategies": tuple(names)}
    if args.mode:
        over["run"] = {"mode": args.mode}
    if args.table:
        if cfg.camera is None:
            raise ConfigError("camera", "scenario has no camera, --table does not apply")
        over["camera"] = {"table": str(Path(args.table).resolve())}
    if over:
        cfg = cfg.with_overrides(**over)
    runs = args.runs if args.runs is not None else cfg.run.runs
    seed = args.seed if args.seed is not None else cfg.run.seed
    log.info("running %s: %d runs from seed %d (%s)", cfg.name, runs, seed, cfg.run.mode)
    result = run_monte_carlo(cfg, runs, seed, args.parallel)
    stem = cfg.name if not args.strategy else f"{cfg.name}_{'+'.join(cfg.beam.strategies)}"
    if args.mode:
        stem += f"_{args.mode}"
    ext = "csv" if args.format == "csv" else "jsonl"
    paths = write_results(result, Path(args.out) / f"{stem}.{ext}", args.format, args.per_run)
    for p in paths[:1]:
        print(p)
    return 0


def _cmd_train_vision(args) -> int:
    cfg = load_scenario(args.scenario)
    c = cfg.camera
    if c is None:
        raise ConfigError("camera", "scenario has no camera section")
    n = args.trajectories if args.trajectories is not None else c.train_trajectories
    if n < 1:
        raise TrainingError("need at least one training trajectory")
    samples = training_samples(cfg, n, args.seed if args.seed is not None else c.train_seed)
    table = train_error_table(samples, c.u_cell, c.v_cell, c.width, c.height_px)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.save(out)
    log.info("%d samples, %d of %d blocks trained", len(samples),
             int((~table.empty_blocks).sum()), table.empty_blocks.size)
    print(out)
    return 0


def merge_result_files(paths) -> dict[str, np.ndarray]:
    """One comparison table from several result CSVs.

    ``se_*`` columns keep their names (first file wins); every other column
    is prefixed with its file stem. Shorter series are padded with NaN.
    """
    tables = [(Path(p).stem, read_csv(p)) for p in sorted(paths)]
    if not tables:
        raise ValueError("no result files to merge")
    longest = max((cols for _, cols in tables), key=lambda c: len(c["t"]))
    K = len(longest["t"])
    out = {"t": longest["t"]}
    for stem, cols in tables:
        for name, vals in cols.items():
            if name == "t":
                continue
            key = name if name.startswith("se_") and name not in out else f"{stem}:{name}"
            padded = np.full(K, np.nan)
            padded[:len(vals)] = vals
            out[key] = padded
    return out


def _cmd_report(args) -> int:
    src = Path(args.inp)
    if not src.is_dir():
        raise FileNotFoundError(f"{src}: not a directory")
    out = Path(args.out).resolve()
    files = [p for p in src.glob("*.csv") if p.resolve() != out and "_seed" not in p.stem]
    merged = merge_result_files(files)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(columns_to_csv(merged), encoding="utf-8")
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ap = argparse.ArgumentParser(prog="isacslam", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="Monte Carlo simulation of a scenario")
    r.add_argument("--scenario", required=True, help="TOML path or bundled scenario name")
    r.add_argument("--runs", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--strategy", action="append",
                   help="beam strategy (repeatable or comma separated; 'none' disables)")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--parallel", type=int, default=1)
    r.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    r.add_argument("--per-run", action="store_true", help="also write one file per seed")
    r.add_argument("--table", help="vision error table to use instead of training one")
    r.set_defaults(func=_cmd_run)

    t = sub.add_parser("train-vision", parents=[common], help="train and save a vision error table")
    t.add_argument("--scenario", required=True)
    t.add_argument("--trajectories", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train_vision)

    p = sub.add_parser("report", parents=[common], help="merge result CSVs into one comparison CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "parallel", 1) < 1:
        print("error: --parallel must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
