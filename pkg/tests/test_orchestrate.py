import json

import numpy as np
import pytest

from conftest import make_traj
from trajpref.network import init_params
from trajpref.orchestrate import (
    EVAL_BIT,
    DatasetError,
    IterationConfig,
    derive_seed,
    episode_seed,
    evaluate,
    load_dataset,
    metrics_from,
    persist_dataset,
    read_metrics,
    run_alignment,
    run_iteration,
    write_metrics,
)
from trajpref.scoring import preset
from trajpref.simenv import N_ACTIONS, OBS_DIM, T_MAX, default_suites, encode_action, rollout_many, scripted_expert

SUITES = default_suites()
EIGHT = SUITES["in_domain"][:8]


def small_config(**kw):
    base = dict(seed=5, samples_per_task=5, m=1, epochs=1, batch_size=16, t_max=25, eval_episodes=2,
                eval_suites=("in_domain", "semantic"))
    return IterationConfig(**{**base, **kw})


def small_suites():
    return {name: tasks[:3] for name, tasks in SUITES.items()}


def policy():
    return init_params(OBS_DIM, 8, N_ACTIONS, seed=11, scale=0.5)


def test_config_validation_lists_every_problem():
    errs = IterationConfig(seed=None, iterations=0, samples_per_task=3, m=2, lambdas=(0.1, -1, 2), beta=0).validate()
    text = "\n".join(errs)
    for needle in ("seed", "iterations", "N_t", "lambdas", "beta"):
        assert needle in text
    assert IterationConfig(seed=0).validate() == []


def test_library_defaults():
    c = IterationConfig(seed=0)
    assert (c.iterations, c.samples_per_task, c.m, c.beta, c.lr, c.epochs) == (3, 5, 1, 0.1, 5e-4, 1)
    assert preset(c.cost_preset).lambdas == (0.01, 0.01, 2.0)


def test_seed_derivation_partitions_eval_from_training():
    train = {derive_seed(3, 0, 1, t, i) for t in range(8) for i in range(5)}
    ev = {episode_seed(3, s, t, e) for s in range(4) for t in range(8) for e in range(5)}
    assert all(x < EVAL_BIT for x in train) and all(x & EVAL_BIT for x in ev)
    assert len(train) == 40 and len(ev) == 160
    assert derive_seed(3, 1, 2) == derive_seed(3, 1, 2) != derive_seed(4, 1, 2)


def test_iteration_on_eight_tasks_gives_at_most_eight_pairs():
    res = run_iteration(policy(), small_config(), 1, EIGHT, preset("task-completion"))
    assert len(res.trajectories) == 40 and len(res.scored) == 40
    assert 0 < len(res.pairs) <= 8
    ids = {(t.task_id, t.seed) for t in res.trajectories}
    for p in res.pairs:
        assert p.chosen.task_id == p.rejected.task_id
        assert (p.chosen.task_id, p.chosen.seed) in ids and (p.rejected.task_id, p.rejected.seed) in ids
        assert p.chosen.r_gcpg > p.rejected.r_gcpg


def test_zero_epochs_leaves_policy_bit_identical():
    p = policy()
    res = run_iteration(p, small_config(epochs=0), 1, EIGHT, preset("task-completion"))
    for k in p.weights:
        assert np.array_equal(res.policy.weights[k], p.weights[k])


def test_iteration_is_deterministic():
    a = run_iteration(policy(), small_config(), 2, EIGHT, preset("task-completion"))
    b = run_iteration(policy(), small_config(), 2, EIGHT, preset("task-completion"))
    assert a.trajectories == b.trajectories
    assert [p.to_dict() for p in a.pairs] == [p.to_dict() for p in b.pairs]
    assert a.policy.digest() == b.policy.digest()
    assert a.ref.digest() == policy().digest()


def test_metrics_arithmetic():
    trajs = [make_traj([0] * 4, status="success" if k < 7 else "timeout", seed=k) for k in range(10)]
    row = metrics_from(trajs, "toy", 1)
    assert row.success_rate == 0.7 and row.step_length == 4.0 and row.episodes == 10


def test_never_moving_policy():
    row = evaluate(lambda s, t: encode_action(0, False), SUITES["in_domain"][:4], 3, seed=0)
    assert (row.success_rate, row.grasp_rate, row.step_length) == (0.0, 0.0, float(T_MAX))


def test_expert_solves_in_domain_suite():
    assert evaluate(scripted_expert, SUITES["in_domain"], 3, seed=1).success_rate == 1.0


def test_random_policy_rarely_succeeds():
    row = evaluate(init_params(OBS_DIM, 64, N_ACTIONS, seed=0), SUITES["in_domain"], 3, seed=2)
    assert row.success_rate <= 0.05


def test_dataset_round_trip_is_lossless(tmp_path):
    p = policy()
    tasks = SUITES["in_domain"]
    trajs = rollout_many(p, [(tasks[k % 16], 1000 + k) for k in range(100)], t_max=30)
    persist_dataset(trajs, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert back == trajs


def test_empty_dataset(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert load_dataset(tmp_path / "e.jsonl") == []


def test_truncated_line_names_the_line(tmp_path):
    trajs = rollout_many(policy(), [(SUITES["in_domain"][0], s) for s in range(3)], t_max=10)
    persist_dataset(trajs, tmp_path / "d.jsonl")
    text = (tmp_path / "d.jsonl").read_text()
    (tmp_path / "d.jsonl").write_text(text[: len(text) - 40])
    with pytest.raises(DatasetError, match="line 3"):
        load_dataset(tmp_path / "d.jsonl")


def test_metrics_csv_round_trip(tmp_path):
    rows = [metrics_from([make_traj([0] * 3, status="success")], "a", 1),
            metrics_from([make_traj([0] * 7)], "b", 2)]
    write_metrics(rows, tmp_path / "m.csv")
    assert read_metrics(tmp_path / "m.csv") == rows


def test_alignment_run_layout_and_history(tmp_path):
    cfg = small_config(iterations=3)
    run = run_alignment(cfg, policy(), suites=small_suites(), out_dir=tmp_path)
    assert len(run.history) == 3 * 2 and len(run.baseline) == 2
    for name in cfg.eval_suites:
        assert [r.iteration for r in run.history if r.suite == name] == [1, 2, 3]
    for k in (1, 2, 3):
        for f in ("trajectories.jsonl", "scored.jsonl", "pairs.jsonl", "model.json"):
            assert (tmp_path / f"iter_{k}" / f).is_file()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert [e["iteration"] for e in manifest["iterations"]] == [1, 2, 3]
    # each iteration's reference is the previous iteration's output
    assert manifest["iterations"][1]["ref_snapshot"] == manifest["iterations"][0]["model"]
    assert read_metrics(tmp_path / "metrics.csv") == run.history


def test_alignment_rejects_invalid_config():
    with pytest.raises(ValueError):
        run_alignment(small_config(iterations=0), policy(), suites=small_suites())


def test_full_runs_are_byte_identical(tmp_path):
    cfg = small_config(iterations=2)
    for d in ("a", "b"):
        run_alignment(cfg, policy(), suites=small_suites(), out_dir=tmp_path / d)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 8
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
