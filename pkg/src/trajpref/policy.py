"""Categorical action policy: log-likelihoods, sampling and behaviour cloning."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .network import PolicyParams, action_probs, logits
from .numgrad import OptState, Tape, _log_softmax, adamw_step, grad_scalar
from .network import record_forward
from .simenv import Trajectory, sample_token

log = logging.getLogger(__name__)


def action_logprobs(params: PolicyParams, obs) -> np.ndarray:
    return _log_softmax(logits(params, obs))


def sample_action(params: PolicyParams, obs, rng: np.random.Generator) -> int:
    return sample_token(action_probs(params, obs), rng.random())


def step_logprobs(params: PolicyParams, traj: Trajectory) -> np.ndarray:
    """log pi(a_t | o_t) for every step of ``traj``."""
    if len(traj) == 0:
        raise ValueError(f"empty trajectory (task {traj.task_id}, seed {traj.seed})")
    lp = action_logprobs(params, traj.obs)
    return lp[np.arange(len(traj)), traj.actions]


def trajectory_logprob(params: PolicyParams, traj: Trajectory) -> float:
    """Log-likelihood of the whole action sequence: the per-step sum."""
    return float(np.sum(step_logprobs(params, traj)))


@dataclass
class SftBatch:
    obs: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.obs = np.atleast_2d(np.asarray(self.obs, dtype=np.float64))
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if len(self.actions) == 0 or len(self.actions) != len(self.obs):
            raise ValueError("SFT batch needs >= 1 (observation, action) pair")

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> "SftBatch":
        return cls(np.vstack([t.obs for t in trajs]), np.concatenate([t.actions for t in trajs]))


def sft_loss_and_grad(params: PolicyParams, batch: SftBatch) -> tuple[float, dict[str, np.ndarray]]:
    if batch.actions.min() < 0 or batch.actions.max() >= params.actions:
        raise ValueError("expert action token out of range")
    tape = Tape()
    out = record_forward(tape, params, batch.obs)
    lp = tape.apply("log_softmax", out)
    picked = tape.apply("gather", lp, rows=np.arange(len(batch.actions)), cols=batch.actions)
    loss = tape.apply("scale", tape.apply("mean", picked), c=-1.0)
    return float(tape.value(loss)), grad_scalar(tape, loss)


def sft_update(params: PolicyParams, state: OptState, batch: SftBatch) -> tuple[PolicyParams, OptState, float]:
    """One AdamW step on the mean expert-token NLL; returns the pre-step loss."""
    loss, grads = sft_loss_and_grad(params, batch)
    new_w, state = adamw_step(params.weights, grads, state)
    return params.with_weights(new_w), state, loss


def train_sft(
    params: PolicyParams,
    demos: Sequence[Trajectory],
    epochs: int,
    batch_size: int = 256,
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    seed: int = 0,
) -> tuple[PolicyParams, list[float]]:
    """Behaviour cloning over all demo steps with seeded minibatch shuffling."""
    full = SftBatch.from_trajectories(demos)
    n = len(full.actions)
    rng = np.random.default_rng(seed)
    state = OptState.for_params(params.weights, lr=lr, weight_decay=weight_decay)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            params, state, loss = sft_update(params, state, SftBatch(full.obs[idx], full.actions[idx]))
            losses.append(loss)
        log.debug("sft epoch %d loss %.4f", epoch, losses[-1])
    return params.with_weights(params.weights, tag="sft"), losses
