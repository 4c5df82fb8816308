"""Command line entry point: ``trajpref {demos,sft,run,eval,score,report}``.

Exit codes: 0 ok, 2 configuration error, 3 missing input artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_config, parse_overrides, save_config
from .network import ConfigurationError, load_model, save_model
from .orchestrate import (
    DatasetError,
    MetricsRow,
    evaluate_suites,
    load_dataset,
    make_demos,
    persist_dataset,
    read_metrics,
    run_alignment,
    sft_policy,
    write_jsonl,
    write_metrics,
)
from .scoring import load_cost_spec, preset, score_trajectory
from .simenv import default_suites, load_suite, save_suite

log = logging.getLogger("trajpref")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class MissingArtifact(Exception):
    pass


def _need(path: str | None, what: str, fallback: Path | None = None) -> Path:
    p = Path(path) if path else fallback
    if p is None or not p.exists():
        raise MissingArtifact(f"{what} not found: {p if p is not None else '(no path given)'}")
    return p


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _suites(cfg: RunConfig) -> dict:
    suites = default_suites()
    if cfg.task_suite:
        suites[cfg.train_suite] = load_suite(_need(cfg.task_suite, "task suite"))
    unknown = [s for s in (cfg.train_suite, *cfg.eval_suites) if s not in suites]
    if unknown:
        raise ConfigError([f"unknown suite {s!r}; known: {sorted(suites)}" for s in unknown])
    return suites


def _spec(cfg: RunConfig):
    if cfg.cost_spec:
        return load_cost_spec(_need(cfg.cost_spec, "cost spec"))
    return preset(cfg.cost_preset)


def cmd_demos(cfg: RunConfig) -> Path:
    out = _out(cfg)
    tasks = _suites(cfg)[cfg.train_suite]
    demos = make_demos(tasks, cfg.demos_per_task, cfg.seed, cfg.t_max)
    if not demos:
        log.warning("demos_per_task is 0: writing an empty demonstration file")
    failed = [d.task_id for d in demos if not d.success]
    if failed:
        raise RuntimeError(f"scripted expert failed on {sorted(set(failed))}")
    persist_dataset(demos, out / "demos.jsonl")
    save_suite(tasks, out / "tasks.json")
    log.info("wrote %d demonstrations to %s", len(demos), out / "demos.jsonl")
    return out / "demos.jsonl"


def cmd_sft(cfg: RunConfig) -> Path:
    out = _out(cfg)
    demos = load_dataset(_need(cfg.demos, "demonstration file", out / "demos.jsonl"))
    if not demos:
        raise DatasetError("demonstration file holds no trajectories")
    params, losses = sft_policy(demos, cfg.seed, cfg.sft_epochs, hidden=cfg.hidden, lr=cfg.sft_lr,
                                batch_size=cfg.sft_batch_size, weight_decay=cfg.weight_decay)
    save_model(params, out / "model.json")
    if losses:
        log.info("sft: %d steps, final loss %.4f", len(losses), losses[-1])
    return out / "model.json"


def cmd_run(cfg: RunConfig) -> Path:
    out = _out(cfg)
    policy = load_model(_need(cfg.model, "initial model", out / "model.json"))
    run_alignment(cfg, policy, spec=_spec(cfg), suites=_suites(cfg), out_dir=out)
    save_config(cfg, out / "config.json")
    return out


def cmd_eval(cfg: RunConfig) -> Path:
    out = _out(cfg)
    policy = load_model(_need(cfg.model, "model", out / "model.json"))
    rows = evaluate_suites(policy, cfg, _suites(cfg), iteration=0)
    write_metrics(rows, out / "eval.csv")
    for r in rows:
        log.info("%s: success %.3f collision %.3f steps %.1f", r.suite, r.success_rate, r.collision_rate, r.step_length)
    return out / "eval.csv"


def cmd_score(cfg: RunConfig) -> Path:
    out = _out(cfg)
    trajs = load_dataset(_need(cfg.trajectories, "trajectory file"))
    policy = load_model(_need(cfg.model, "sampling-policy model", out / "model.json"))
    spec = _spec(cfg)
    by_id = {t.task_id: t for suite in _suites(cfg).values() for t in suite}
    missing = sorted({t.task_id for t in trajs} - set(by_id))
    if missing:
        raise DatasetError(f"trajectories reference unknown tasks {missing}")
    scored = [score_trajectory(t, by_id[t.task_id], spec, policy, cfg.lambdas) for t in trajs]
    write_jsonl((s.to_dict() for s in scored), out / "scored.jsonl")
    return out / "scored.jsonl"


REPORT_FIELDS = ("success_rate", "grasp_rate", "collision_rate", "step_length")


def aggregate_metrics(runs: list[list[MetricsRow]]) -> list[dict]:
    """Mean and (population) standard deviation per (suite, iteration) across runs."""
    cells: dict[tuple[str, int], list[MetricsRow]] = defaultdict(list)
    suites: list[str] = []
    for rows in runs:
        for r in rows:
            cells[(r.suite, r.iteration)].append(r)
            if r.suite not in suites:
                suites.append(r.suite)
    table = []
    for suite, it in sorted(cells, key=lambda k: (suites.index(k[0]), k[1])):
        rows = cells[(suite, it)]
        rec = {"suite": suite, "iteration": it, "runs": len(rows)}
        for f in REPORT_FIELDS:
            vals = np.array([getattr(r, f) for r in rows])
            rec[f"{f}_mean"] = float(vals.mean())
            rec[f"{f}_std"] = float(vals.std())
        table.append(rec)
    return table


def cmd_report(cfg: RunConfig, run_dirs: list[str]) -> Path:
    if not run_dirs:
        raise ConfigError(["report needs at least one run directory"])
    runs = [read_metrics(_need(None, "metrics file", Path(d) / "metrics.csv")) for d in run_dirs]
    table = aggregate_metrics(runs)
    out = _out(cfg)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    for rec in table:
        print(f"{rec['suite']:>10} iter {rec['iteration']}: success {rec['success_rate_mean']:.3f} "
              f"+- {rec['success_rate_std']:.3f} (n={rec['runs']})")
    return out / "report.csv"


COMMANDS = {"demos": cmd_demos, "sft": cmd_sft, "run": cmd_run, "eval": cmd_eval, "score": cmd_score}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (required, here or in the config)")
    common.add_argument("--out", help="output directory (else $TRAJPREF_OUT_DIR, else the config's out_dir)")
    common.add_argument("--workers", type=int, help="accepted for interface compatibility; runs are sequential")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="trajpref", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("demos", parents=[common], help="write scripted-expert demonstrations")
    sub.add_parser("sft", parents=[common], help="behaviour-clone a policy from demonstrations")
    sub.add_parser("run", parents=[common], help="iterative preference alignment from a model")
    sub.add_parser("eval", parents=[common], help="evaluate a model on the evaluation suites")
    sub.add_parser("score", parents=[common], help="score a trajectory file against a cost spec")
    rep = sub.add_parser("report", parents=[common], help="aggregate metrics.csv over seed runs")
    rep.add_argument("runs", nargs="+", help="run directories holding metrics.csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.set)
        if args.command == "report":
            # aggregation needs no seed; fill a placeholder so validation passes
            overrides.setdefault("seed", "0")
        cfg = build_config(args.config, overrides, seed=args.seed, out_dir=args.out, workers=args.workers)
        if args.command == "report":
            path = cmd_report(cfg, args.runs)
        else:
            path = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
