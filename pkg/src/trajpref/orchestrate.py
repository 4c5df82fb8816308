"""Iterative sample -> score -> rank -> pair -> train loop, evaluation, datasets."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .network import PolicyParams, init_params, save_model
from .policy import train_sft
from .scoring import (
    CostSpec,
    PreferencePair,
    ScoredTrajectory,
    preset,
    random_success_draws,
    random_success_pair,
    rank_and_pair,
    score_trajectory,
)
from .simenv import (
    N_ACTIONS,
    OBS_DIM,
    T_MAX,
    Task,
    Trajectory,
    default_suites,
    rollout_many,
    scripted_expert,
)
from .tpo import margin_report, train_preferences

log = logging.getLogger(__name__)

# seed-space partition: evaluation seeds carry bit 62, everything else does not
EVAL_BIT = 1 << 62
_STREAM_TRAIN, _STREAM_EVAL, _STREAM_DEMO, _STREAM_PAIR = 0, 1, 2, 3


def derive_seed(master: int, *keys: int) -> int:
    words = np.random.SeedSequence(master, spawn_key=keys).generate_state(2, np.uint32)
    return (int(words[0]) << 32 | int(words[1])) & (EVAL_BIT - 1)


PAIRINGS = ("gcpg", "random_success", "random_draws")


class DatasetError(ValueError):
    pass


@dataclass
class IterationConfig:
    seed: int | None = None
    iterations: int = 3
    samples_per_task: int = 5
    m: int = 1
    # None means: take the weights from the cost spec
    lambdas: tuple[float, float, float] | None = None
    beta: float = 0.1
    lr: float = 5e-4
    weight_decay: float = 0.01
    # the published recipe trains a single epoch per iteration on a 7B model;
    # a 64-unit network needs many more passes over its handful of pairs
    epochs: int = 1
    batch_size: int = 16
    loss: str = "tpo"
    pairing: str = "gcpg"
    ref_mode: str = "iteration"
    train_suite: str = "in_domain"
    eval_suites: tuple[str, ...] = ("in_domain", "subject", "physical", "semantic")
    eval_episodes: int = 50
    t_max: int = T_MAX
    cost_preset: str = "task-completion"

    def validate(self) -> list[str]:
        errs = []
        if self.seed is None:
            errs.append("seed must be given explicitly")
        if self.iterations < 1:
            errs.append("iterations (K) must be >= 1")
        if self.m < 1:
            errs.append("m must be >= 1")
        if self.samples_per_task < 2 * self.m:
            errs.append(f"samples_per_task (N_t={self.samples_per_task}) must be >= 2m ({2 * self.m})")
        if self.lambdas is not None and (len(self.lambdas) != 3 or min(self.lambdas) < 0):
            errs.append("lambdas must be three non-negative numbers")
        if not self.beta > 0:
            errs.append("beta must be > 0")
        if self.lr <= 0:
            errs.append("lr must be > 0")
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.loss not in ("tpo", "stepdpo"):
            errs.append(f"loss must be 'tpo' or 'stepdpo', not {self.loss!r}")
        if self.pairing not in PAIRINGS:
            errs.append(f"pairing must be one of {PAIRINGS}, not {self.pairing!r}")
        if self.ref_mode not in ("iteration", "sft"):
            errs.append(f"ref_mode must be 'iteration' or 'sft', not {self.ref_mode!r}")
        if self.eval_episodes < 1:
            errs.append("eval_episodes must be >= 1")
        if self.t_max < 1:
            errs.append("t_max must be >= 1")
        return errs


@dataclass
class MetricsRow:
    iteration: int
    suite: str
    success_rate: float
    grasp_rate: float
    collision_rate: float
    step_length: float
    episodes: int

    FIELDS = ("iteration", "suite", "success_rate", "grasp_rate", "collision_rate", "step_length", "episodes")


def episode_seed(master: int, suite_index: int, task_index: int, episode: int) -> int:
    # common random numbers across iterations and methods for the same master seed
    return derive_seed(master, _STREAM_EVAL, suite_index, task_index, episode) | EVAL_BIT


def evaluate(
    policy,
    suite: Sequence[Task],
    episodes: int,
    seed: int,
    suite_name: str = "suite",
    iteration: int = 0,
    t_max: int = T_MAX,
    suite_index: int = 0,
) -> MetricsRow:
    if not suite:
        raise ValueError("evaluation suite is empty")
    plan = [(task, episode_seed(seed, suite_index, ti, e)) for ti, task in enumerate(suite) for e in range(episodes)]
    trajs = rollout_many(policy, plan, t_max=t_max)
    return metrics_from(trajs, suite_name, iteration)


def metrics_from(trajs: Sequence[Trajectory], suite_name: str, iteration: int) -> MetricsRow:
    n = len(trajs)
    return MetricsRow(
        iteration=iteration,
        suite=suite_name,
        success_rate=sum(t.success for t in trajs) / n,
        grasp_rate=sum(any(e.grasp for e in t.events) for t in trajs) / n,
        collision_rate=sum(any(e.collision for e in t.events) for t in trajs) / n,
        step_length=sum(len(t) for t in trajs) / n,
        episodes=n,
    )


def make_demos(tasks: Sequence[Task], per_task: int, seed: int, t_max: int = T_MAX) -> list[Trajectory]:
    plan = [(task, derive_seed(seed, _STREAM_DEMO, ti, i)) for ti, task in enumerate(tasks) for i in range(per_task)]
    return rollout_many(scripted_expert, plan, t_max=t_max)


@dataclass
class IterationResult:
    policy: PolicyParams
    ref: PolicyParams
    trajectories: list[Trajectory]
    scored: list[ScoredTrajectory]
    pairs: list[PreferencePair]
    losses: list[float] = field(default_factory=list)


def run_iteration(
    policy: PolicyParams,
    config: IterationConfig,
    iteration: int,
    tasks: Sequence[Task],
    spec: CostSpec,
    ref: PolicyParams | None = None,
) -> IterationResult:
    """One round: sample N_t trajectories per task with ``policy``, score them
    against ``spec``, pair best against worst per task and fine-tune on the pairs.

    ``ref`` defaults to the iteration-start snapshot of ``policy``.
    """
    ref = policy.copy() if ref is None else ref
    sampler = policy.copy()
    plan = [
        (task, derive_seed(config.seed, _STREAM_TRAIN, iteration, ti, i))
        for ti, task in enumerate(tasks)
        for i in range(config.samples_per_task)
    ]
    trajs = rollout_many(sampler, plan, t_max=config.t_max)
    by_id = {t.task_id: t for t in tasks}
    scored = [score_trajectory(tr, by_id[tr.task_id], spec, sampler, config.lambdas) for tr in trajs]
    pairs: list[PreferencePair] = []
    pair_rng = np.random.default_rng(derive_seed(config.seed, _STREAM_PAIR, iteration))
    for ti, task in enumerate(tasks):
        group = scored[ti * config.samples_per_task : (ti + 1) * config.samples_per_task]
        if config.pairing == "random_success":
            got = random_success_pair(group, pair_rng, config.m)
        elif config.pairing == "random_draws":
            got = random_success_draws(group, pair_rng, count=config.m * config.m)
        else:
            got = rank_and_pair(group, config.m)
        if not got:
            log.info("iteration %d: task %s produced no preference pairs", iteration, task.task_id)
        pairs.extend(got)
    new_policy, losses = train_preferences(
        policy,
        ref,
        pairs,
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        weight_decay=config.weight_decay,
        beta=config.beta,
        loss=config.loss,
        seed=derive_seed(config.seed, _STREAM_TRAIN, iteration, 1 << 20),
        tag=f"{config.loss}-iter-{iteration}",
    )
    if config.epochs == 0 or not pairs:
        new_policy = policy
    return IterationResult(new_policy, ref, trajs, scored, pairs, losses)


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def persist_dataset(trajectories: Iterable[Trajectory], path) -> None:
    write_jsonl((t.to_dict() for t in trajectories), path)


def load_dataset(path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Trajectory.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed trajectory record ({exc})") from exc
    return out


def write_metrics(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRow.FIELDS)
        for r in rows:
            w.writerow([r.iteration, r.suite, repr(r.success_rate), repr(r.grasp_rate),
                        repr(r.collision_rate), repr(r.step_length), r.episodes])


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [
            MetricsRow(int(d["iteration"]), d["suite"], float(d["success_rate"]), float(d["grasp_rate"]),
                       float(d["collision_rate"]), float(d["step_length"]), int(d["episodes"]))
            for d in csv.DictReader(fh)
        ]


def evaluate_suites(policy, config: IterationConfig, suites: dict[str, list[Task]], iteration: int) -> list[MetricsRow]:
    names = list(suites)
    return [
        evaluate(policy, suites[name], config.eval_episodes, config.seed, name, iteration,
                 config.t_max, suite_index=names.index(name))
        for name in config.eval_suites
    ]


def config_record(config) -> dict:
    """Field values as JSON-ready data.  The output location is left out so
    that the same run written to two directories produces identical files."""
    rec = {}
    for f in fields(config):
        if f.name == "out_dir":
            continue
        v = getattr(config, f.name)
        rec[f.name] = list(v) if isinstance(v, tuple) else v
    return rec


@dataclass
class AlignmentRun:
    policy: PolicyParams
    history: list[MetricsRow]  # one row per suite per iteration 1..K
    baseline: list[MetricsRow]  # the starting policy, iteration 0
    manifest: dict


def run_alignment(
    config: IterationConfig,
    policy: PolicyParams,
    spec: CostSpec | None = None,
    suites: dict[str, list[Task]] | None = None,
    out_dir=None,
) -> AlignmentRun:
    """K rounds of ``run_iteration`` from ``policy`` (normally the SFT model),
    evaluating before the first round and after every round.  With ``out_dir``
    every dataset, pair list, checkpoint and metric row is written there;
    ``metrics.csv`` holds the K evaluated iterations and ``baseline.csv`` the
    starting policy."""
    errs = config.validate()
    if errs:
        raise ValueError("; ".join(errs))
    spec = preset(config.cost_preset) if spec is None else spec
    suites = default_suites() if suites is None else suites
    tasks = suites[config.train_suite]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    sft = policy.copy()
    baseline = evaluate_suites(policy, config, suites, 0)
    history: list[MetricsRow] = []
    manifest = {
        "config": config_record(config),
        "cost_spec": spec.to_dict(),
        "initial_model": policy.digest(),
        "iterations": [],
    }
    for k in range(1, config.iterations + 1):
        ref = sft if config.ref_mode == "sft" else policy.copy()
        result = run_iteration(policy, config, k, tasks, spec, ref=ref)
        history += evaluate_suites(result.policy, config, suites, k)
        entry = {
            "iteration": k,
            "ref_snapshot": ref.digest(),
            "model": result.policy.digest(),
            "train_seeds": sorted({t.seed for t in result.trajectories}),
            "pairs": len(result.pairs),
        }
        manifest["iterations"].append(entry)
        if out is not None:
            d = out / f"iter_{k}"
            d.mkdir(exist_ok=True)
            persist_dataset(result.trajectories, d / "trajectories.jsonl")
            write_jsonl((s.to_dict() for s in result.scored), d / "scored.jsonl")
            write_jsonl((p.to_dict() for p in result.pairs), d / "pairs.jsonl")
            save_model(result.policy, d / "model.json")
            if result.pairs:
                margin_report(result.policy, ref, result.pairs, config.beta).write_csv(d / "margins.csv")
        log.info("iteration %d: %d pairs, %s", k, len(result.pairs),
                 {r.suite: round(r.success_rate, 3) for r in history if r.iteration == k})
        policy = result.policy
    if out is not None:
        write_metrics(history, out / "metrics.csv")
        write_metrics(baseline, out / "baseline.csv")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return AlignmentRun(policy, history, baseline, manifest)


def run_sft(
    seed: int,
    demos_per_task: int,
    epochs: int,
    suites: dict[str, list[Task]] | None = None,
    train_suite: str = "in_domain",
    hidden: int = 64,
    lr: float = 1e-3,
    batch_size: int = 256,
    weight_decay: float = 0.01,
) -> tuple[PolicyParams, list[Trajectory]]:
    suites = default_suites() if suites is None else suites
    demos = make_demos(suites[train_suite], demos_per_task, seed)
    params, _ = sft_policy(demos, seed, epochs, hidden, lr, batch_size, weight_decay)
    return params, demos


def sft_policy(
    demos: Sequence[Trajectory],
    seed: int,
    epochs: int,
    hidden: int = 64,
    lr: float = 3e-3,
    batch_size: int = 256,
    weight_decay: float = 0.01,
) -> tuple[PolicyParams, list[float]]:
    """Seeded initialisation followed by behaviour cloning on ``demos``."""
    params = init_params(OBS_DIM, hidden, N_ACTIONS, seed=derive_seed(seed, _STREAM_DEMO, 1 << 20))
    return train_sft(params, demos, epochs, batch_size=batch_size, lr=lr, weight_decay=weight_decay, seed=seed)
