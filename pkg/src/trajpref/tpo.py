"""Trajectory-level preference loss, its step-level baseline, and the trainer.

For a chosen/rejected pair the trajectory log-ratio against the frozen
reference is the sum of per-step log-ratios; the loss is
``softplus(-beta * (ratio_chosen - ratio_rejected))`` averaged over pairs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .network import PolicyParams, record_forward
from .numgrad import OptState, Tape, _sigmoid, _softplus, adamw_step, grad_scalar
from .policy import action_logprobs, step_logprobs
from .simenv import Trajectory

log = logging.getLogger(__name__)

RATIO_CLAMP = 500.0


def _unpack(pair) -> tuple[Trajectory, Trajectory]:
    if isinstance(pair, tuple):
        return pair
    return pair.chosen.traj, pair.rejected.traj


def trajectory_log_ratio(model: PolicyParams, ref: PolicyParams, traj: Trajectory) -> float:
    return float(np.sum(step_logprobs(model, traj) - step_logprobs(ref, traj)))


def bt_probability(r_w: float, r_l: float) -> float:
    """P(chosen beats rejected) under Bradley-Terry, evaluated as sigmoid(r_w - r_l)."""
    return float(_sigmoid(np.array([r_w - r_l], dtype=np.float64))[0])


def _check(pairs, beta):
    if len(pairs) == 0:
        raise ValueError("preference batch is empty")
    if not beta > 0:
        raise ValueError("beta must be > 0")


def _clamp(x: np.ndarray) -> np.ndarray:
    if np.any(np.abs(x) > RATIO_CLAMP):
        log.warning("trajectory log-ratio beyond +-%g clamped", RATIO_CLAMP)
    return np.clip(x, -RATIO_CLAMP, RATIO_CLAMP)


@dataclass
class MarginReport:
    task_ids: list[str]
    ratio_w: np.ndarray
    ratio_l: np.ndarray
    beta: float

    @property
    def margin(self) -> np.ndarray:
        return self.ratio_w - self.ratio_l

    @property
    def loss(self) -> np.ndarray:
        return _softplus(-self.beta * self.margin)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id", "ratio_w", "ratio_l", "margin", "loss"])
            for row in zip(self.task_ids, self.ratio_w, self.ratio_l, self.margin, self.loss):
                w.writerow([row[0], *(repr(float(x)) for x in row[1:])])


def margin_report(model: PolicyParams, ref: PolicyParams, pairs, beta: float = 0.1) -> MarginReport:
    _check(pairs, beta)
    tw, tl = zip(*(_unpack(p) for p in pairs))
    rw = _clamp(np.array([trajectory_log_ratio(model, ref, t) for t in tw]))
    rl = _clamp(np.array([trajectory_log_ratio(model, ref, t) for t in tl]))
    return MarginReport([t.task_id for t in tw], rw, rl, beta)


def tpo_loss(model: PolicyParams, ref: PolicyParams, pairs, beta: float = 0.1) -> float:
    return float(np.mean(margin_report(model, ref, pairs, beta).loss))


class _Stacked:
    """All steps of a list of trajectories stacked row-wise for one forward pass."""

    def __init__(self, trajs: Sequence[Trajectory]):
        if any(len(t) == 0 for t in trajs):
            raise ValueError("empty trajectory in preference batch")
        self.lengths = np.array([len(t) for t in trajs])
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)[:-1]])
        self.obs = np.vstack([t.obs for t in trajs])
        self.actions = np.concatenate([t.actions for t in trajs])
        self.segments = np.repeat(np.arange(len(trajs)), self.lengths)


def _step_log_ratio_node(tape: Tape, model: PolicyParams, ref: PolicyParams, st: _Stacked) -> int:
    rows = np.arange(len(st.actions))
    out = record_forward(tape, model, st.obs)
    picked = tape.apply("gather", tape.apply("log_softmax", out), rows=rows, cols=st.actions)
    ref_lp = action_logprobs(ref, st.obs)[rows, st.actions]
    return tape.apply("sub", picked, tape.const(ref_lp))


def tpo_loss_and_grad(model, ref, pairs, beta: float = 0.1) -> tuple[float, dict[str, np.ndarray]]:
    _check(pairs, beta)
    trajs = [t for p in pairs for t in _unpack(p)]  # chosen at even, rejected at odd positions
    st = _Stacked(trajs)
    tape = Tape()
    steps = _step_log_ratio_node(tape, model, ref, st)
    ratios = tape.apply("segment_sum", steps, segments=st.segments, n=len(trajs))
    if np.any(np.abs(tape.value(ratios)) > RATIO_CLAMP):
        log.warning("trajectory log-ratio beyond +-%g clamped", RATIO_CLAMP)
    ratios = tape.apply("clip", ratios, lo=-RATIO_CLAMP, hi=RATIO_CLAMP)
    n = len(pairs)
    rw = tape.apply("gather", ratios, rows=None, cols=np.arange(0, 2 * n, 2))
    rl = tape.apply("gather", ratios, rows=None, cols=np.arange(1, 2 * n, 2))
    margin = tape.apply("sub", rw, rl)
    loss = tape.apply("mean", tape.apply("softplus", tape.apply("scale", margin, c=-beta)))
    return float(tape.value(loss)), grad_scalar(tape, loss)


def tpo_grad(model, ref, pairs, beta: float = 0.1) -> dict[str, np.ndarray]:
    return tpo_loss_and_grad(model, ref, pairs, beta)[1]


def _aligned(pairs, st: _Stacked):
    """Row indices of index-aligned chosen/rejected steps and per-step weights."""
    wi, li, wts = [], [], []
    n = len(pairs)
    for k in range(n):
        steps = min(st.lengths[2 * k], st.lengths[2 * k + 1])
        wi.append(st.offsets[2 * k] + np.arange(steps))
        li.append(st.offsets[2 * k + 1] + np.arange(steps))
        wts.append(np.full(steps, 1.0 / (steps * n)))
    return np.concatenate(wi), np.concatenate(li), np.concatenate(wts)


def stepdpo_loss_and_grad(model, ref, pairs, beta: float = 0.1) -> tuple[float, dict[str, np.ndarray]]:
    """Step-wise baseline: per aligned step index, a DPO term on the step log-ratios."""
    _check(pairs, beta)
    trajs = [t for p in pairs for t in _unpack(p)]
    st = _Stacked(trajs)
    tape = Tape()
    steps = _step_log_ratio_node(tape, model, ref, st)
    wi, li, wts = _aligned(pairs, st)
    diff = tape.apply("sub", tape.apply("gather", steps, rows=None, cols=wi),
                      tape.apply("gather", steps, rows=None, cols=li))
    per_step = tape.apply("softplus", tape.apply("scale", diff, c=-beta))
    loss = tape.apply("sum", tape.apply("scale", per_step, c=wts))
    return float(tape.value(loss)), grad_scalar(tape, loss)


def stepdpo_loss(model, ref, pairs, beta: float = 0.1) -> float:
    return stepdpo_loss_and_grad(model, ref, pairs, beta)[0]


LOSSES = {"tpo": tpo_loss_and_grad, "stepdpo": stepdpo_loss_and_grad}


def train_preferences(
    model: PolicyParams,
    ref: PolicyParams,
    pairs: Sequence,
    epochs: int = 1,
    batch_size: int = 16,
    lr: float = 5e-4,
    weight_decay: float = 0.01,
    beta: float = 0.1,
    loss: str = "tpo",
    seed: int = 0,
    tag: str | None = None,
) -> tuple[PolicyParams, list[float]]:
    """AdamW over shuffled minibatches of pairs; ``ref`` stays frozen throughout."""
    if loss not in LOSSES:
        raise ValueError(f"unknown preference loss {loss!r}")
    fn = LOSSES[loss]
    history: list[float] = []
    if not pairs or epochs == 0:
        return model, history
    rng = np.random.default_rng(seed)
    state = OptState.for_params(model.weights, lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[start : start + batch_size]]
            value, grads = fn(model, ref, batch, beta)
            new_w, state = adamw_step(model.weights, grads, state)
            model = model.with_weights(new_w)
            history.append(value)
    return model.with_weights(model.weights, tag=tag), history
