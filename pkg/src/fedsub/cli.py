"""Command-line entry point: ``fedsub run|analyze|merge-test|gen-data <config>``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, ExperimentConfig, build_scenario, load_config, load_dataset
from .data import DataError, write_csv
from .federation import RoundReport, mean_ci, run_experiment

log = logging.getLogger("fedsub")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _finite(v: float) -> float:
    if not math.isfinite(v):
        raise ValueError(f"non-finite metric {v!r}")
    return v


def write_rounds(reports: list[RoundReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client_id", "f1", "loss"])
        for rep in reports:
            for cid, f1, loss in zip(rep.client_ids, rep.f1, rep.loss):
                w.writerow([rep.round, cid, repr(_finite(float(f1))), repr(_finite(float(loss)))])


def summarize(reports: list[RoundReport], cfg: ExperimentConfig) -> dict:
    out: dict = {"config": cfg.to_dict(), "rounds": len(reports)}
    if reports:
        last = reports[-1]
        f1m, f1ci = mean_ci(last.f1)
        lm, lci = mean_ci(last.loss)
        out["final"] = {"f1": f1m, "f1_ci95": f1ci, "loss": lm, "loss_ci95": lci}
        # time-average each client first, then the interval is across clients
        per_f1 = np.mean([r.f1 for r in reports], axis=0)
        per_loss = np.mean([r.loss for r in reports], axis=0)
        f1m, f1ci = mean_ci(per_f1)
        lm, lci = mean_ci(per_loss)
        out["mean"] = {"f1": f1m, "f1_ci95": f1ci, "loss": lm, "loss_ci95": lci}
    out["per_round"] = [r.to_dict() for r in reports]
    return out


def cmd_run(cfg: ExperimentConfig) -> int:
    scenario = build_scenario(cfg)
    reports = run_experiment(scenario, cfg.server())
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rounds(reports, out / "rounds.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(summarize(reports, cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if reports:
        log.info("final mean F1 %.4f", reports[-1].f1_mean)
    return EXIT_OK


def cmd_analyze(cfg: ExperimentConfig) -> int:
    report = analysis.class_report(load_dataset(cfg), seed=cfg.seed)
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_merge_test(cfg: ExperimentConfig, a: str, b: str) -> int:
    scenario = build_scenario(cfg)
    for cid in (a, b):
        if cid not in scenario.dataset.clients:
            raise ConfigError("--a/--b", f"unknown client {cid!r}")
    report = analysis.merge_test(scenario.dataset, scenario.split, a, b, cfg.server())
    print(report.table())
    return EXIT_OK


def cmd_gen_data(cfg: ExperimentConfig, out: str) -> int:
    if cfg.dataset is not None:
        raise ConfigError("dataset", "gen-data needs a synthetic source, not a csv path")
    write_csv(load_dataset(cfg), out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsub", description="Personalized federated learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", help="run an experiment").add_argument("config")
    sub.add_parser("analyze", help="per-class Hopkins statistics as JSON").add_argument("config")
    m = sub.add_parser("merge-test", help="train two clients locally and average them")
    m.add_argument("config")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    g = sub.add_parser("gen-data", help="write the synthetic dataset to csv")
    g.add_argument("config")
    g.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        if args.command == "merge-test":
            return cmd_merge_test(cfg, args.a, args.b)
        return cmd_gen_data(cfg, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG if e.filename == args.config else EXIT_RUNTIME
    except (DataError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
