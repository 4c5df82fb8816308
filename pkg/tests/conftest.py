import numpy as np
import pytest

from trajpref.simenv import OBS_DIM, StepEvent, Trajectory


def make_traj(actions, obs=None, task_id="toy", seed=0, status="timeout", events=None, positions=None, rng=None):
    """Hand-built trajectory; positions (T+1 rows) override the gripper columns."""
    actions = np.asarray(actions, dtype=np.int64)
    T = len(actions)
    if obs is None:
        rng = rng or np.random.default_rng(seed)
        full = rng.normal(size=(T + 1, OBS_DIM))
    else:
        full = np.vstack([np.asarray(obs, dtype=np.float64), np.zeros((1, np.shape(obs)[1]))])
    if positions is not None:
        full[:, 0:2] = np.asarray(positions, dtype=np.float64)
    evs = list(events) if events is not None else [StepEvent() for _ in range(T)]
    return Trajectory(task_id, seed, status, full[:T], actions, evs, full[T])


@pytest.fixture
def traj_factory():
    return make_traj


_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
