"""Deterministic planar pick-and-place world.

A point gripper moves on the unit square in steps of ``STEP`` along eight
compass directions (or stays), and can toggle its grip.  Closing within
``GRASP_RADIUS`` of the object picks it up; opening releases it in place.
Obstacles are discs; overlapping one is flagged as a collision but does not
block motion.  An episode succeeds once the object rests (grip open) inside
the target disc.

Observation layout (version ``OBS_VERSION``)::

    0-1   gripper x, y
    2     grip closed flag
    3-4   object x, y
    5     held flag
    6-7   target centre x, y
    8-10  nearest obstacle: centre dx, dy from gripper, distance to its surface
          (sentinel 0, 0, 2.0 when the layout has no obstacles)
    11-12 object minus gripper
    13-14 target minus gripper
    15-22 instruction code over ``N_TASK_SLOTS`` slots: one-hot on ``slot``,
          or split with ``alias_slot`` for paraphrased instructions
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .network import PolicyParams, action_probs

STEP = 0.02
GRASP_RADIUS = 0.03
JITTER = 0.02
T_MAX = 100
N_TASK_SLOTS = 8
OBS_VERSION = 1
OBS_DIM = 15 + N_TASK_SLOTS
NO_OBSTACLE = (0.0, 0.0, 2.0)

# move index 0 is "stay"; 1..8 run counter-clockwise from east
MOVE_NAMES = ("stay", "E", "NE", "N", "NW", "W", "SW", "S", "SE")
_DIRS = [(0.0, 0.0)] + [
    (math.cos(k * math.pi / 4), math.sin(k * math.pi / 4)) for k in range(8)
]
N_ACTIONS = len(MOVE_NAMES) * 2


def encode_action(move: int, toggle: bool) -> int:
    return 2 * move + int(toggle)


def decode_action(token: int) -> tuple[int, bool]:
    if not 0 <= token < N_ACTIONS:
        raise ValueError(f"action token {token} outside [0, {N_ACTIONS})")
    return token // 2, bool(token % 2)


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class Task:
    task_id: str
    instruction: str
    slot: int
    start: tuple[float, float]
    object_pos: tuple[float, float]
    target: tuple[float, float]
    target_radius: float
    obstacles: tuple[Obstacle, ...] = ()
    object_radius: float = 0.02
    alias_slot: int | None = None
    alias_weight: float = 0.0

    def instruction_code(self) -> list[float]:
        code = [0.0] * N_TASK_SLOTS
        code[self.slot] = 1.0 - self.alias_weight if self.alias_slot is not None else 1.0
        if self.alias_slot is not None:
            code[self.alias_slot] += self.alias_weight
        return code

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "slot": self.slot,
            "start": list(self.start),
            "object": list(self.object_pos),
            "object_radius": self.object_radius,
            "target": {"center": list(self.target), "radius": self.target_radius},
            "obstacles": [{"center": list(o.center), "radius": o.radius} for o in self.obstacles],
            "alias_slot": self.alias_slot,
            "alias_weight": self.alias_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(
            task_id=d["task_id"],
            instruction=d.get("instruction", ""),
            slot=int(d["slot"]),
            start=tuple(d["start"]),
            object_pos=tuple(d["object"]),
            target=tuple(d["target"]["center"]),
            target_radius=float(d["target"]["radius"]),
            obstacles=tuple(Obstacle(tuple(o["center"]), float(o["radius"])) for o in d.get("obstacles", [])),
            object_radius=float(d.get("object_radius", 0.02)),
            alias_slot=d.get("alias_slot"),
            alias_weight=float(d.get("alias_weight", 0.0)),
        )

    def validate(self) -> list[str]:
        errors = []
        for sl in (self.slot, self.alias_slot):
            if sl is not None and not 0 <= sl < N_TASK_SLOTS:
                errors.append(f"{self.task_id}: slot {sl} outside [0, {N_TASK_SLOTS})")
        if not 0.0 <= self.alias_weight <= 1.0:
            errors.append(f"{self.task_id}: alias_weight must lie in [0, 1]")
        for o in self.obstacles:
            if _dist(o.center, self.target) < o.radius + self.target_radius:
                errors.append(f"{self.task_id}: target region overlaps obstacle at {o.center}")
            if _dist(o.center, self.object_pos) < o.radius + self.object_radius:
                errors.append(f"{self.task_id}: object overlaps obstacle at {o.center}")
        if _dist(self.object_pos, self.target) < self.target_radius:
            errors.append(f"{self.task_id}: object starts inside the target")
        return errors


@dataclass(frozen=True)
class WorkspaceState:
    gripper: tuple[float, float]
    closed: bool
    obj: tuple[float, float]
    held: bool
    obstacles: tuple[Obstacle, ...]
    t: int = 0


@dataclass(frozen=True)
class StepEvent:
    grasp: bool = False
    release: bool = False
    collision: bool = False
    success: bool = False

    def to_dict(self) -> dict:
        return {"grasp": self.grasp, "release": self.release, "collision": self.collision, "success": self.success}


@dataclass(eq=False)
class Trajectory:
    """One episode. ``obs[t]`` is the observation the action ``actions[t]`` was
    taken from; ``final_obs`` is the observation after the last step."""

    task_id: str
    seed: int
    status: str
    obs: np.ndarray
    actions: np.ndarray
    events: list[StepEvent]
    final_obs: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def success(self) -> bool:
        return self.status == "success"

    def positions(self) -> np.ndarray:
        """Gripper positions at t = 0..T (T+1 rows)."""
        return np.vstack([self.obs[:, 0:2], self.final_obs[None, 0:2]])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.seed == other.seed
            and self.status == other.status
            and np.array_equal(self.obs, other.obs)
            and np.array_equal(self.actions, other.actions)
            and self.events == other.events
            and np.array_equal(self.final_obs, other.final_obs)
        )

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "seed": self.seed,
            "status": self.status,
            "steps": [
                {"obs": o.tolist(), "action": int(a), "events": e.to_dict()}
                for o, a, e in zip(self.obs, self.actions, self.events)
            ],
            "final_obs": self.final_obs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        steps = d["steps"]
        obs = np.asarray([s["obs"] for s in steps], dtype=np.float64)
        if not steps:
            obs = obs.reshape(0, len(d.get("final_obs", ())))
        return cls(
            task_id=d["task_id"],
            seed=int(d["seed"]),
            status=d["status"],
            obs=obs,
            actions=np.asarray([int(s["action"]) for s in steps], dtype=np.int64),
            events=[StepEvent(**s["events"]) for s in steps],
            final_obs=np.asarray(d["final_obs"], dtype=np.float64),
        )


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


def reset(task: Task, seed: int, jitter: float = JITTER) -> WorkspaceState:
    rng = np.random.default_rng([seed, 0])
    dx, dy = rng.uniform(-jitter, jitter, size=2) if jitter > 0 else (0.0, 0.0)
    return WorkspaceState(
        gripper=(_clamp01(task.start[0] + float(dx)), _clamp01(task.start[1] + float(dy))),
        closed=False,
        obj=task.object_pos,
        held=False,
        obstacles=task.obstacles,
        t=0,
    )


def in_collision(state: WorkspaceState, task: Task) -> bool:
    for o in state.obstacles:
        if _dist(state.gripper, o.center) < o.radius:
            return True
        if state.held and _dist(state.obj, o.center) < o.radius + task.object_radius:
            return True
    return False


def is_success(state: WorkspaceState, task: Task) -> bool:
    return not state.closed and not state.held and _dist(state.obj, task.target) <= task.target_radius


def step(state: WorkspaceState, action: int, task: Task) -> tuple[WorkspaceState, StepEvent]:
    move, toggle = decode_action(int(action))
    dx, dy = _DIRS[move]
    gripper = (_clamp01(state.gripper[0] + STEP * dx), _clamp01(state.gripper[1] + STEP * dy))
    closed, held = state.closed, state.held
    obj = gripper if held else state.obj
    grasp = release = False
    if toggle:
        if closed:
            closed = False
            if held:
                held, release = False, True
        else:
            closed = True
            if _dist(gripper, obj) <= GRASP_RADIUS:
                held, grasp, obj = True, True, gripper
    new = WorkspaceState(gripper, closed, obj, held, state.obstacles, state.t + 1)
    event = StepEvent(grasp=grasp, release=release, collision=in_collision(new, task), success=is_success(new, task))
    return new, event


def observe(state: WorkspaceState, task: Task) -> np.ndarray:
    gx, gy = state.gripper
    nearest = NO_OBSTACLE
    best = math.inf
    for o in state.obstacles:
        d = _dist(state.gripper, o.center) - o.radius
        if d < best:
            best = d
            nearest = (o.center[0] - gx, o.center[1] - gy, d)
    return np.array(
        [gx, gy, float(state.closed), state.obj[0], state.obj[1], float(state.held),
         task.target[0], task.target[1], *nearest,
         state.obj[0] - gx, state.obj[1] - gy, task.target[0] - gx, task.target[1] - gy, *task.instruction_code()],
        dtype=np.float64,
    )


# ---------------------------------------------------------------- expert

EXPERT_CLEARANCE = 0.05
RELEASE_RADIUS = 0.02


def expert_phase(state: WorkspaceState) -> str:
    return "carry" if state.held else "approach"


def _max_margin(obstacles: Sequence[Obstacle]) -> float:
    # inflated discs must not close the gap between two posts
    gaps = [
        _dist(a.center, b.center) - a.radius - b.radius
        for i, a in enumerate(obstacles)
        for b in obstacles[i + 1 :]
    ]
    return 0.45 * min(gaps) if gaps else math.inf


def _steer_point(pos, goal, obstacles: Sequence[Obstacle], margin: float):
    """Waypoint that skirts the first inflated obstacle blocking the ray pos->goal."""
    margin = min(margin, _max_margin(obstacles))
    px, py = pos
    vx, vy = goal[0] - px, goal[1] - py
    seg = math.hypot(vx, vy)
    if seg < 1e-12:
        return goal
    ux, uy = vx / seg, vy / seg
    blocker, best_s = None, math.inf
    for o in obstacles:
        r = o.radius + margin
        cx, cy = o.center[0] - px, o.center[1] - py
        s = cx * ux + cy * uy
        perp = abs(cx * uy - cy * ux)
        inside = math.hypot(cx, cy) < r
        if (inside or (0 < s < seg and perp < r)) and s < best_s:
            blocker, best_s = o, s
    if blocker is None:
        return goal
    r = blocker.radius + margin
    ox, oy = blocker.center
    dx, dy = px - ox, py - oy
    d = math.hypot(dx, dy)
    base = math.atan2(dy, dx)
    if d <= r:
        # inside the inflated disc: slide around it, on the side facing the goal
        side = 1.0 if (dx * (goal[1] - oy) - dy * (goal[0] - ox)) > 0 else -1.0
        ang = base + side * 0.6
        return (ox + 1.3 * r * math.cos(ang), oy + 1.3 * r * math.sin(ang))
    alpha = math.acos(r / d)
    cands = [(ox + 1.1 * r * math.cos(base + s * alpha), oy + 1.1 * r * math.sin(base + s * alpha)) for s in (1, -1)]
    return min(cands, key=lambda c: _dist(c, goal))


def _greedy_move(pos, waypoint) -> int:
    best_move, best_d = 0, _dist(pos, waypoint)
    for m in range(1, 9):
        dx, dy = _DIRS[m]
        d = _dist((_clamp01(pos[0] + STEP * dx), _clamp01(pos[1] + STEP * dy)), waypoint)
        if d < best_d - 1e-12:
            best_move, best_d = m, d
    return best_move


def scripted_expert(state: WorkspaceState, task: Task) -> int:
    if not state.held:
        near = _dist(state.gripper, state.obj) <= GRASP_RADIUS
        if state.closed:
            # a closed empty gripper must reopen before it can grasp
            return encode_action(0, True) if near else encode_action(
                _greedy_move(state.gripper, _steer_point(state.gripper, state.obj, task.obstacles, EXPERT_CLEARANCE)),
                True,
            )
        if near:
            return encode_action(0, True)
        goal = _steer_point(state.gripper, state.obj, task.obstacles, EXPERT_CLEARANCE)
        return encode_action(_greedy_move(state.gripper, goal), False)
    if _dist(state.gripper, task.target) <= RELEASE_RADIUS:
        return encode_action(0, True)
    goal = _steer_point(state.gripper, task.target, task.obstacles, EXPERT_CLEARANCE + task.object_radius)
    return encode_action(_greedy_move(state.gripper, goal), False)


# ---------------------------------------------------------------- rollouts

Actor = Callable[[WorkspaceState, Task], int]


def sample_token(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw over the fixed token order for a uniform ``u`` in [0, 1)."""
    cdf = np.cumsum(probs)
    return min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), len(probs) - 1)


def rollout_many(
    policy,
    episodes: Sequence[tuple[Task, int]],
    t_max: int = T_MAX,
    greedy: bool = False,
    jitter: float = JITTER,
) -> list[Trajectory]:
    """Roll out several (task, seed) episodes in lockstep.

    Each episode owns its random stream, and the network forward is row
    independent, so every trajectory equals ``rollout`` of that pair alone.
    """
    n = len(episodes)
    states = [reset(task, seed, jitter) for task, seed in episodes]
    rngs = [np.random.default_rng([seed, 1]) for _, seed in episodes]
    obs_log: list[list[np.ndarray]] = [[] for _ in range(n)]
    act_log: list[list[int]] = [[] for _ in range(n)]
    ev_log: list[list[StepEvent]] = [[] for _ in range(n)]
    status = ["timeout"] * n
    active = list(range(n))
    for _ in range(t_max):
        if not active:
            break
        obs = [observe(states[i], episodes[i][0]) for i in active]
        if isinstance(policy, PolicyParams):
            probs = action_probs(policy, np.vstack(obs))
            tokens = [
                int(np.argmax(p)) if greedy else sample_token(p, rngs[i].random())
                for i, p in zip(active, probs)
            ]
        else:
            tokens = [int(policy(states[i], episodes[i][0])) for i in active]
        still = []
        for i, o, a in zip(active, obs, tokens):
            states[i], ev = step(states[i], a, episodes[i][0])
            obs_log[i].append(o)
            act_log[i].append(a)
            ev_log[i].append(ev)
            if ev.success:
                status[i] = "success"
            else:
                still.append(i)
        active = still
    return [
        Trajectory(
            task_id=task.task_id,
            seed=seed,
            status=status[i],
            obs=np.vstack(obs_log[i]) if obs_log[i] else np.zeros((0, OBS_DIM)),
            actions=np.asarray(act_log[i], dtype=np.int64),
            events=ev_log[i],
            final_obs=observe(states[i], task),
        )
        for i, (task, seed) in enumerate(episodes)
    ]


def rollout(policy, task: Task, seed: int, t_max: int = T_MAX, greedy: bool = False, jitter: float = JITTER) -> Trajectory:
    return rollout_many(policy, [(task, seed)], t_max=t_max, greedy=greedy, jitter=jitter)[0]


def replay_states(traj: Trajectory, task: Task, jitter: float = JITTER) -> list[WorkspaceState]:
    """Re-simulate the stored actions; returns states s_0..s_T."""
    states = [reset(task, traj.seed, jitter)]
    for a in traj.actions:
        states.append(step(states[-1], int(a), task)[0])
    return states


# ---------------------------------------------------------------- task suites

def _task(tid, instr, slot, start, obj, target, tr, obstacles, obj_r=0.02) -> Task:
    return Task(
        task_id=tid,
        instruction=instr,
        slot=slot,
        start=start,
        object_pos=obj,
        target=target,
        target_radius=tr,
        obstacles=tuple(Obstacle(c, r) for c, r in obstacles),
        object_radius=obj_r,
    )


# four layouts (one instruction each); every layout comes with four start poses
_LAYOUTS = [
    ("t0", "move the block right past the post", (0.2, 0.4), (0.8, 0.4), 0.06, [((0.5, 0.4), 0.08)],
     [(0.15, 0.85), (0.5, 0.8), (0.1, 0.1), (0.45, 0.1)]),
    ("t1", "carry the block up over the post", (0.5, 0.2), (0.5, 0.8), 0.06, [((0.5, 0.5), 0.09)],
     [(0.85, 0.15), (0.15, 0.15), (0.2, 0.5), (0.8, 0.45)]),
    ("t2", "bring the block down to the corner", (0.8, 0.8), (0.2, 0.2), 0.06, [((0.5, 0.5), 0.08)],
     [(0.55, 0.9), (0.9, 0.55), (0.75, 0.45), (0.45, 0.75)]),
    ("t3", "thread the block between two posts", (0.75, 0.25), (0.2, 0.7), 0.06,
     [((0.5, 0.5), 0.07), ((0.3, 0.35), 0.06)],
     [(0.9, 0.5), (0.55, 0.1), (0.9, 0.1), (0.7, 0.6)]),
]


def in_domain_tasks() -> list[Task]:
    return [
        _task(f"{tid}s{k}", instr, slot, start, obj, target, tr, obstacles)
        for slot, (tid, instr, obj, target, tr, obstacles, starts) in enumerate(_LAYOUTS)
        for k, start in enumerate(starts)
    ]


def subject_tasks() -> list[Task]:
    # same instructions, object placed elsewhere
    shifts = {"t0": (0.02, 0.12), "t1": (0.12, 0.0), "t2": (-0.1, -0.04), "t3": (0.06, 0.1)}
    return [
        replace(t, task_id=f"{t.task_id}-subj",
                object_pos=(t.object_pos[0] + shifts[t.task_id[:2]][0], t.object_pos[1] + shifts[t.task_id[:2]][1]))
        for t in in_domain_tasks()
    ]


def physical_tasks() -> list[Task]:
    # a bulkier object: more clearance needed around posts and a tighter fit in the target
    return [
        replace(t, task_id=f"{t.task_id}-phys", object_radius=0.035, target_radius=t.target_radius - 0.015)
        for t in in_domain_tasks()
    ]


def semantic_tasks() -> list[Task]:
    # same layouts under a paraphrased instruction: its code leans partly on a
    # slot never seen in training
    return [
        replace(t, task_id=f"{t.task_id}-sem", alias_slot=t.slot + 4, alias_weight=0.35,
                instruction=f"(paraphrased) {t.instruction}")
        for t in in_domain_tasks()
    ]


def default_suites() -> dict[str, list[Task]]:
    return {
        "in_domain": in_domain_tasks(),
        "subject": subject_tasks(),
        "physical": physical_tasks(),
        "semantic": semantic_tasks(),
    }


GENERALIZATION_SUITES = ("subject", "physical", "semantic")


def save_suite(tasks: Iterable[Task], path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tasks], indent=1) + "\n")


def load_suite(path) -> list[Task]:
    return [Task.from_dict(d) for d in json.loads(Path(path).read_text())]
