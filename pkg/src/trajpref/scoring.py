"""Cost-guided trajectory scoring and preference pairing.

A trajectory is split into reach / transport / place stages at its first
grasp and the release that follows it.  Each stage is charged by a list of
keypoint constraints; the stage costs feed an exponentially decayed external
reward, which is mixed with the sampling policy's own log-likelihood and a
success indicator into one scalar used to rank trajectories of a task.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .network import ConfigurationError, PolicyParams
from .policy import trajectory_logprob
from .simenv import Task, Trajectory

STAGE_LABELS = ("reach", "transport", "place")
CONSTRAINT_KINDS = ("target-distance", "collision-clearance", "approach-direction", "path-steps")
KEYPOINTS = ("object", "target", "obstacles")
DEFAULT_LAMBDAS = (0.01, 0.01, 2.0)


@dataclass(frozen=True)
class ConstraintDef:
    kind: str
    keypoint: str
    weight: float = 1.0
    threshold: float | None = None
    step_size: float | None = None

    def validate(self) -> list[str]:
        errs = []
        if self.kind not in CONSTRAINT_KINDS:
            errs.append(f"unknown constraint kind {self.kind!r}")
        if self.keypoint not in KEYPOINTS:
            errs.append(f"unknown keypoint {self.keypoint!r}")
        if self.weight < 0:
            errs.append(f"{self.kind}: weight must be >= 0")
        if self.kind == "collision-clearance" and not (self.threshold is not None and self.threshold > 0):
            errs.append("collision-clearance needs a threshold > 0")
        if self.kind == "path-steps" and not (self.step_size is not None and self.step_size > 0):
            errs.append("path-steps needs a step_size > 0")
        return errs

    def to_dict(self) -> dict:
        return {"kind": self.kind, "keypoint": self.keypoint, "threshold": self.threshold,
                "weight": self.weight, "step_size": self.step_size}


@dataclass(frozen=True)
class CostSpec:
    objective: str
    stages: dict[str, tuple[ConstraintDef, ...]]
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS

    def validate(self) -> list[str]:
        errs = []
        for label in STAGE_LABELS:
            if label not in self.stages:
                errs.append(f"cost spec has no entry for stage {label!r}")
        for label, cons in self.stages.items():
            errs += [f"{label}: {e}" for c in cons for e in c.validate()]
        if any(lam < 0 for lam in self.lambdas):
            errs.append("lambdas must be >= 0")
        return errs

    def to_dict(self) -> dict:
        l1, l2, l3 = self.lambdas
        return {
            "objective": self.objective,
            "lambdas": {"l1": l1, "l2": l2, "l3": l3},
            "stages": {k: [c.to_dict() for c in v] for k, v in self.stages.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostSpec":
        lam = d.get("lambdas", {})
        spec = cls(
            objective=d.get("objective", "custom"),
            stages={
                label: tuple(
                    ConstraintDef(
                        kind=c["kind"],
                        keypoint=c["keypoint"],
                        weight=float(c.get("weight", 1.0)),
                        threshold=None if c.get("threshold") is None else float(c["threshold"]),
                        step_size=None if c.get("step_size") is None else float(c["step_size"]),
                    )
                    for c in cons
                )
                for label, cons in d["stages"].items()
            },
            lambdas=(float(lam.get("l1", DEFAULT_LAMBDAS[0])), float(lam.get("l2", DEFAULT_LAMBDAS[1])),
                     float(lam.get("l3", DEFAULT_LAMBDAS[2]))),
        )
        errs = spec.validate()
        if errs:
            raise ConfigurationError("; ".join(errs))
        return spec


def load_cost_spec(path) -> CostSpec:
    return CostSpec.from_dict(json.loads(Path(path).read_text()))


def save_cost_spec(spec: CostSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1) + "\n")


def _preset_task_completion() -> CostSpec:
    return CostSpec(
        objective="task-completion",
        stages={
            "reach": (ConstraintDef("target-distance", "object", 1.0),),
            "transport": (ConstraintDef("target-distance", "target", 1.0),),
            "place": (ConstraintDef("target-distance", "target", 1.0),),
        },
        lambdas=DEFAULT_LAMBDAS,
    )


def _preset_safety() -> CostSpec:
    clear = ConstraintDef("collision-clearance", "obstacles", weight=4.0, threshold=0.1)
    return CostSpec(
        objective="safety",
        stages={
            "reach": (ConstraintDef("approach-direction", "object", 0.1), clear,
                      ConstraintDef("path-steps", "object", 0.0, step_size=0.01)),
            "transport": (clear, ConstraintDef("path-steps", "target", 0.0, step_size=0.01)),
            "place": (ConstraintDef("approach-direction", "target", 0.1),),
        },
        lambdas=(0.01, 1.0, 2.0),
    )


def _preset_efficiency() -> CostSpec:
    path = ConstraintDef("path-steps", "target", weight=0.02, step_size=0.01)
    return CostSpec(
        objective="efficiency",
        stages={
            "reach": (ConstraintDef("path-steps", "object", weight=0.02, step_size=0.01),
                      ConstraintDef("collision-clearance", "obstacles", 0.0, threshold=0.05)),
            "transport": (path, ConstraintDef("collision-clearance", "obstacles", 0.0, threshold=0.05)),
            "place": (path,),
        },
        lambdas=(0.01, 1.0, 2.0),
    )


PRESETS = {
    "task-completion": _preset_task_completion,
    "safety": _preset_safety,
    "efficiency": _preset_efficiency,
}


def preset(name: str) -> CostSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown cost preset {name!r}; known: {sorted(PRESETS)}") from None


# ---------------------------------------------------------------- stages

@dataclass
class StageSegmentation:
    spans: list[tuple[int, int]]
    labels: list[str]
    keypoints: dict[str, object] = field(default_factory=dict)

    def validate(self, length: int) -> bool:
        if not self.spans or self.spans[0][0] != 0 or self.spans[-1][1] != length:
            return False
        return all(a[1] == b[0] for a, b in zip(self.spans, self.spans[1:])) and all(s <= e for s, e in self.spans)


def task_keypoints(task: Task) -> dict[str, object]:
    return {
        "object": np.asarray(task.object_pos, dtype=np.float64),
        "target": np.asarray(task.target, dtype=np.float64),
        "obstacles": [(np.asarray(o.center, dtype=np.float64), o.radius) for o in task.obstacles],
    }


def decompose_stages(traj: Trajectory, task: Task) -> StageSegmentation:
    """Cut at the first grasp and the first release after it."""
    T = len(traj)
    if T == 0:
        raise ValueError("cannot segment an empty trajectory")
    grasp = next((t for t, e in enumerate(traj.events) if e.grasp), None)
    release = None
    if grasp is not None:
        release = next((t for t in range(grasp + 1, T) if traj.events[t].release), None)
    cuts = [c for c in (grasp, release) if c is not None]
    bounds = [0, *cuts, T]
    spans = list(zip(bounds[:-1], bounds[1:]))
    return StageSegmentation(spans, list(STAGE_LABELS[: len(spans)]), task_keypoints(task))


def _event_index(span: tuple[int, int], length: int) -> int:
    s, e = span
    if e < length:
        return e
    return s if s > 0 else length


def stage_cost(
    traj: Trajectory,
    span: tuple[int, int],
    constraints: Sequence[ConstraintDef],
    keypoints: dict[str, object],
) -> float:
    s, e = span
    T = len(traj)
    if not 0 <= s <= e <= T:
        raise ValueError(f"span {span} outside trajectory of length {T}")
    pos = traj.positions()
    total = 0.0
    for c in constraints:
        if c.kind not in CONSTRAINT_KINDS:
            raise ConfigurationError(f"unknown constraint kind {c.kind!r}")
        if c.weight == 0.0:
            continue
        if c.kind == "target-distance":
            value = float(np.linalg.norm(pos[e] - keypoints[c.keypoint]))
        elif c.kind == "collision-clearance":
            value = 0.0
            for p in pos[s + 1 : e + 1]:
                for center, radius in keypoints["obstacles"]:
                    value += max(0.0, c.threshold - (float(np.linalg.norm(p - center)) - radius))
        elif c.kind == "approach-direction":
            at = pos[_event_index(span, T)]
            value = 0.0 if at[1] > keypoints[c.keypoint][1] else 1.0
        else:
            arc = float(np.sum(np.linalg.norm(np.diff(pos[s : e + 1], axis=0), axis=1))) if e > s else 0.0
            # tolerance absorbs float error in sums of exact 0.02 moves
            value = float(math.floor(arc / c.step_size + 1e-9))
        total += c.weight * value
    return total


def stage_costs(traj: Trajectory, task: Task, spec: CostSpec) -> list[float]:
    seg = decompose_stages(traj, task)
    return [stage_cost(traj, span, spec.stages.get(label, ()), seg.keypoints)
            for span, label in zip(seg.spans, seg.labels)]


# ---------------------------------------------------------------- rewards

def external_reward(costs: Sequence[float]) -> float:
    if len(costs) == 0:
        raise ValueError("external reward needs at least one stage cost")
    return math.exp(-math.fsum(costs))


def self_reward(sampling_policy: PolicyParams, traj: Trajectory) -> float:
    return trajectory_logprob(sampling_policy, traj)


def success_indicator(traj: Trajectory, task: Task | None = None) -> int:
    return int(traj.status == "success")


def gcpg_reward(r_self: float, r_ext: float, i_success: int, l1: float, l2: float, l3: float) -> float:
    if min(l1, l2, l3) < 0:
        raise ValueError("reward weights must be non-negative")
    return l1 * r_self + l2 * r_ext + l3 * i_success


@dataclass
class ScoredTrajectory:
    traj: Trajectory
    stage_costs: list[float]
    r_ext: float
    r_self: float
    i_success: int
    r_gcpg: float

    @property
    def task_id(self) -> str:
        return self.traj.task_id

    @property
    def seed(self) -> int:
        return self.traj.seed

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "seed": self.seed, "stage_costs": self.stage_costs,
                "r_ext": self.r_ext, "r_self": self.r_self, "i_success": self.i_success, "r_gcpg": self.r_gcpg}


def score_trajectory(
    traj: Trajectory,
    task: Task,
    spec: CostSpec,
    sampling_policy: PolicyParams,
    lambdas: Sequence[float] | None = None,
) -> ScoredTrajectory:
    costs = stage_costs(traj, task, spec)
    r_ext = external_reward(costs)
    r_self = self_reward(sampling_policy, traj)
    i_success = success_indicator(traj, task)
    l1, l2, l3 = spec.lambdas if lambdas is None else lambdas
    return ScoredTrajectory(traj, costs, r_ext, r_self, i_success, gcpg_reward(r_self, r_ext, i_success, l1, l2, l3))


# ---------------------------------------------------------------- pairing

@dataclass
class PreferencePair:
    chosen: ScoredTrajectory
    rejected: ScoredTrajectory

    @property
    def gap(self) -> float:
        return self.chosen.r_gcpg - self.rejected.r_gcpg

    @property
    def task_id(self) -> str:
        return self.chosen.task_id

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "chosen_seed": self.chosen.seed, "rejected_seed": self.rejected.seed,
                "chosen_reward": self.chosen.r_gcpg, "rejected_reward": self.rejected.r_gcpg, "gap": self.gap}


def rank_key(s: ScoredTrajectory):
    # best first: reward, then external reward, then self reward, then lower seed
    return (-s.r_gcpg, -s.r_ext, -s.r_self, s.seed)


def rank_and_pair(scored: Sequence[ScoredTrajectory], m: int) -> list[PreferencePair]:
    if m < 1:
        raise ValueError("m must be >= 1")
    if len(scored) < 2 * m:
        raise ValueError(f"need at least {2 * m} trajectories to pair top-{m} with bottom-{m}, got {len(scored)}")
    if len({s.task_id for s in scored}) > 1:
        raise ValueError("rank_and_pair expects trajectories of a single task")
    ranked = sorted(scored, key=rank_key)
    top, bottom = ranked[:m], ranked[-m:]
    return [PreferencePair(w, l) for w in top for l in bottom if w.r_gcpg > l.r_gcpg]


def random_success_pair(scored: Sequence[ScoredTrajectory], rng: np.random.Generator, m: int = 1) -> list[PreferencePair]:
    """Ablation pairing that ignores costs and likelihoods: up to ``m`` random
    successes crossed with up to ``m`` random failures of one task.

    Uses as many distinct trajectories as ``rank_and_pair`` with the same ``m``,
    so the two differ only in *which* trajectories are paired.
    """
    ordered = sorted(scored, key=lambda s: s.seed)
    wins = [s for s in ordered if s.i_success]
    losses = [s for s in ordered if not s.i_success]
    if not wins or not losses:
        return []
    w_idx = rng.choice(len(wins), size=min(m, len(wins)), replace=False)
    l_idx = rng.choice(len(losses), size=min(m, len(losses)), replace=False)
    return [PreferencePair(wins[i], losses[j]) for i in sorted(w_idx) for j in sorted(l_idx)]


def random_success_draws(
    scored: Sequence[ScoredTrajectory], rng: np.random.Generator, count: int = 1
) -> list[PreferencePair]:
    """``count`` independent (random success, random failure) draws with
    replacement; touches many more distinct trajectories than ``m``-wide pairing."""
    ordered = sorted(scored, key=lambda s: s.seed)
    wins = [s for s in ordered if s.i_success]
    losses = [s for s in ordered if not s.i_success]
    if not wins or not losses:
        return []
    return [PreferencePair(wins[rng.integers(len(wins))], losses[rng.integers(len(losses))]) for _ in range(count)]
