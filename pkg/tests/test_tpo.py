import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_traj
from test_numgrad import fd_check
from trajpref.network import PolicyParams, init_params
from trajpref.policy import trajectory_logprob
from trajpref.tpo import (
    RATIO_CLAMP,
    MarginReport,
    bt_probability,
    margin_report,
    stepdpo_loss,
    stepdpo_loss_and_grad,
    tpo_grad,
    tpo_loss,
    tpo_loss_and_grad,
    train_preferences,
    trajectory_log_ratio,
)

LN2 = math.log(2.0)
DIM, ACTIONS = 5, 4


def random_traj(rng, T=None, seed=0):
    T = int(rng.integers(1, 7)) if T is None else T
    return make_traj(rng.integers(ACTIONS, size=T), obs=rng.normal(size=(T, DIM)), seed=seed)


def random_pairs(rng, n):
    return [(random_traj(rng, seed=2 * k), random_traj(rng, seed=2 * k + 1)) for k in range(n)]


def small_net(seed, hidden=3, scale=0.8):
    return init_params(DIM, hidden, ACTIONS, seed=seed, scale=scale)


# ------------------------------------------------------------ log-ratios

def test_log_ratio_of_identical_policies_is_zero():
    rng = np.random.default_rng(0)
    p = small_net(1)
    assert trajectory_log_ratio(p, p.copy(), random_traj(rng, 6)) == 0.0


def test_log_ratio_matches_logprob_difference_and_step_loop():
    rng = np.random.default_rng(1)
    model, ref = small_net(2), small_net(3)
    t = random_traj(rng, 3)
    r = trajectory_log_ratio(model, ref, t)
    assert abs(r - (trajectory_logprob(model, t) - trajectory_logprob(ref, t))) <= 1e-12

    def lp(params, obs, a):
        h = np.tanh(obs @ params.weights["W1"] + params.weights["b1"])
        z = h @ params.weights["W2"] + params.weights["b2"]
        return z[a] - math.log(sum(math.exp(v) for v in z))

    loop = sum(lp(model, t.obs[k], t.actions[k]) - lp(ref, t.obs[k], t.actions[k]) for k in range(3))
    assert abs(r - loop) <= 1e-12


# ------------------------------------------------------------ loss values

def test_loss_at_reference_is_ln2():
    rng = np.random.default_rng(2)
    p = small_net(4)
    pairs = random_pairs(rng, 7)
    assert abs(tpo_loss(p, p.copy(), pairs) - LN2) <= 1e-9
    assert abs(tpo_loss_and_grad(p, p.copy(), pairs)[0] - LN2) <= 1e-9


def test_direct_evaluation_example():
    r = MarginReport(["x"], np.array([2.0]), np.array([-3.0]), 0.1)
    assert float(r.loss[0]) == pytest.approx(math.log1p(math.exp(-0.5)), abs=1e-15)
    assert round(float(r.loss[0]), 6) == 0.474077


def test_softplus_asymptotics():
    big = MarginReport(["x", "y"], np.array([400.0, -400.0]), np.array([-400.0, 400.0]), 0.1)
    assert big.loss[0] < 1e-30
    assert big.loss[1] == pytest.approx(0.1 * 800.0, rel=1e-12)
    slope = MarginReport(["a", "b"], np.array([-300.0, -310.0]), np.zeros(2), 0.1).loss
    assert slope[1] - slope[0] == pytest.approx(0.1 * 10.0, rel=1e-9)


def test_empty_batch_and_bad_beta_rejected():
    p = small_net(0)
    with pytest.raises(ValueError):
        tpo_loss(p, p, [])
    with pytest.raises(ValueError):
        tpo_loss_and_grad(p, p, random_pairs(np.random.default_rng(0), 1), beta=0.0)


def test_ratios_are_clamped(caplog):
    t = make_traj([0] * 3, obs=np.ones((3, DIM)))
    bias_hi = np.array([0.0, 1e3, 1e3, 1e3])
    hi = PolicyParams(DIM, 0, ACTIONS, {"W": np.zeros((DIM, ACTIONS)), "b": bias_hi})
    lo = PolicyParams(DIM, 0, ACTIONS, {"W": np.zeros((DIM, ACTIONS)), "b": np.zeros(ACTIONS)})
    rep = margin_report(lo, hi, [(t, t)])
    assert rep.ratio_w[0] == RATIO_CLAMP
    assert "clamped" in caplog.text


# ------------------------------------------------------------ Bradley-Terry

def test_bradley_terry_values():
    assert bt_probability(1.0, 1.0) == 0.5
    assert round(bt_probability(2.0, 0.0), 6) == 0.880797
    assert bt_probability(800.0, -800.0) == 1.0 and bt_probability(-800.0, 800.0) >= 0.0


def test_negative_log_bt_equals_per_pair_loss():
    rng = np.random.default_rng(3)
    model, ref = small_net(5, scale=1.5), small_net(6)
    pairs = random_pairs(rng, 9)
    beta = 0.3
    rep = margin_report(model, ref, pairs, beta)
    for k in range(9):
        nll = -math.log(bt_probability(beta * rep.ratio_w[k], beta * rep.ratio_l[k]))
        assert abs(nll - rep.loss[k]) <= 1e-12


# ------------------------------------------------------------ gradients

def test_identical_pair_has_zero_gradient():
    rng = np.random.default_rng(4)
    p = small_net(7)
    t = random_traj(rng, 5)
    grads = tpo_grad(p, p.copy(), [(t, t)])
    # chosen and rejected rows cancel up to summation rounding
    assert max(float(np.abs(g).max()) for g in grads.values()) <= 1e-15


def test_doubling_beta_doubles_gradient_at_reference():
    rng = np.random.default_rng(5)
    p = small_net(8)
    pairs = random_pairs(rng, 4)
    g1 = tpo_grad(p, p.copy(), pairs, beta=0.1)
    g2 = tpo_grad(p, p.copy(), pairs, beta=0.2)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2.0 * g1[k], rtol=1e-12, atol=1e-17)


def test_tpo_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    worst = 0.0
    for i in range(20):
        model = small_net(100 + i, hidden=int(rng.integers(0, 5)), scale=1.0)
        ref = model.with_weights({k: v + 0.3 * rng.normal(size=v.shape) for k, v in model.weights.items()})
        pairs = random_pairs(rng, int(rng.integers(1, 5)))
        beta = float(rng.uniform(0.05, 2.0))
        _, grads = tpo_loss_and_grad(model, ref, pairs, beta)
        worst = max(worst, fd_check(lambda w: tpo_loss(model.with_weights(w), ref, pairs, beta),
                                    model.weights, grads, rng, probes=6))
    assert worst <= 1e-4


def test_stepdpo_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(20):
        model = small_net(200 + i, hidden=2, scale=1.0)
        ref = model.with_weights({k: v + 0.3 * rng.normal(size=v.shape) for k, v in model.weights.items()})
        pairs = random_pairs(rng, int(rng.integers(1, 4)))
        _, grads = stepdpo_loss_and_grad(model, ref, pairs, 0.7)
        worst = max(worst, fd_check(lambda w: stepdpo_loss(model.with_weights(w), ref, pairs, 0.7),
                                    model.weights, grads, rng, probes=6))
    assert worst <= 1e-4


def test_single_gradient_step_widens_the_margin():
    rng = np.random.default_rng(8)
    for i in range(10):
        p = small_net(300 + i, scale=1.0)
        tw, tl = random_traj(rng, 4), random_traj(rng, 4, seed=1)
        grads = tpo_grad(p, p.copy(), [(tw, tl)], beta=0.5)
        q = p.with_weights({k: v - 1e-3 * grads[k] for k, v in p.weights.items()})
        before = trajectory_logprob(p, tw) - trajectory_logprob(p, tl)
        after = trajectory_logprob(q, tw) - trajectory_logprob(q, tl)
        assert after > before


@settings(max_examples=25, deadline=None)
@given(st.floats(-30, 30), st.integers(0, 1000))
def test_output_bias_shift_changes_nothing(shift, seed):
    rng = np.random.default_rng(seed)
    model, ref = small_net(seed, scale=1.0), small_net(seed + 1)
    pairs = random_pairs(rng, 3)
    shifted = model.with_weights({**model.weights, "b2": model.weights["b2"] + shift})
    a, b = margin_report(model, ref, pairs), margin_report(shifted, ref, pairs)
    np.testing.assert_allclose(a.margin, b.margin, atol=1e-9)
    assert tpo_loss(shifted, ref, pairs) == pytest.approx(tpo_loss(model, ref, pairs), abs=1e-9)


# ------------------------------------------------------------ tabular oracle

def tabular_params(table):
    """Two one-hot states, two actions, no hidden layer: logits(s) = W[s] + b."""
    return PolicyParams(2, 0, 2, {"W": np.asarray(table, dtype=np.float64), "b": np.zeros(2)})


def tabular_trajectories():
    """Start in state 0; the first action picks the next state; horizon 2."""
    out = []
    for a0, a1 in itertools.product(range(2), repeat=2):
        obs = np.array([[1.0, 0.0], [1.0 - a0, float(a0)]])
        out.append(make_traj([a0, a1], obs=obs, seed=2 * a0 + a1))
    return out


def hand_tpo(model, ref, pairs, beta):
    """Loss and d loss / d W expanded by hand with scalar arithmetic."""

    def pi(tab, s, a):
        return math.exp(tab[s][a]) / (math.exp(tab[s][0]) + math.exp(tab[s][1]))

    def states(t):
        return [int(row[1]) for row in t.obs]

    total, grad = 0.0, [[0.0, 0.0], [0.0, 0.0]]
    for tw, tl in pairs:
        def ratio(t):
            return sum(math.log(pi(model, s, a)) - math.log(pi(ref, s, a)) for s, a in zip(states(t), t.actions))

        margin = ratio(tw) - ratio(tl)
        total += math.log(1.0 + math.exp(-beta * margin))
        coeff = -beta / (1.0 + math.exp(beta * margin))  # d loss / d margin
        for sign, t in ((1.0, tw), (-1.0, tl)):
            for s, a in zip(states(t), t.actions):
                for b in range(2):
                    grad[s][b] += coeff * sign * ((1.0 if a == b else 0.0) - pi(model, s, b))
    n = len(pairs)
    return total / n, [[g / n for g in row] for row in grad]


def test_tabular_brute_force_oracle():
    trajs = tabular_trajectories()
    pairs = [(trajs[i], trajs[j]) for i in range(4) for j in range(4) if i != j]
    model_tab = [[0.3, -0.7], [1.1, 0.2]]
    ref_tab = [[-0.4, 0.5], [0.0, 0.9]]
    for beta in (0.1, 1.0, 3.0):
        loss, grads = tpo_loss_and_grad(tabular_params(model_tab), tabular_params(ref_tab), pairs, beta)
        want_loss, want_grad = hand_tpo(model_tab, ref_tab, pairs, beta)
        assert abs(loss - want_loss) <= 1e-10
        np.testing.assert_allclose(grads["W"], want_grad, rtol=0, atol=1e-10)
        # the shared bias sees both states' contributions
        np.testing.assert_allclose(grads["b"], np.sum(want_grad, axis=0), rtol=0, atol=1e-10)


def test_tabular_probabilities_sum_to_one():
    model = tabular_params([[0.3, -0.7], [1.1, 0.2]])
    total = sum(math.exp(trajectory_logprob(model, t)) for t in tabular_trajectories())
    assert abs(total - 1.0) <= 1e-12


# ------------------------------------------------------------ step-wise baseline

def test_stepdpo_at_reference_is_ln2():
    rng = np.random.default_rng(9)
    p = small_net(9)
    assert stepdpo_loss(p, p.copy(), random_pairs(rng, 5)) == pytest.approx(LN2, abs=1e-12)


def test_stepdpo_identical_trajectories():
    rng = np.random.default_rng(10)
    t = random_traj(rng, 6)
    assert stepdpo_loss(small_net(1), small_net(2), [(t, t)]) == pytest.approx(LN2, abs=1e-15)


def test_stepdpo_uses_min_length_alignment():
    rng = np.random.default_rng(11)
    model, ref = small_net(3, scale=1.5), small_net(4)
    tw, tl = random_traj(rng, 5), random_traj(rng, 3)
    per = [
        math.log1p(math.exp(-0.4 * (trajectory_log_ratio(model, ref, make_traj([tw.actions[k]], obs=tw.obs[k:k + 1]))
                                    - trajectory_log_ratio(model, ref, make_traj([tl.actions[k]], obs=tl.obs[k:k + 1])))))
        for k in range(3)
    ]
    assert stepdpo_loss(model, ref, [(tw, tl)], 0.4) == pytest.approx(sum(per) / 3, abs=1e-12)


# ------------------------------------------------------------ trainer

def test_training_is_deterministic_and_keeps_reference_frozen():
    rng = np.random.default_rng(12)
    model, ref = small_net(5), small_net(5)
    ref_digest = ref.digest()
    pairs = random_pairs(rng, 10)
    a, la = train_preferences(model, ref, pairs, epochs=3, batch_size=4, lr=1e-2, seed=3, tag="tpo-iter-1")
    b, lb = train_preferences(model, ref, pairs, epochs=3, batch_size=4, lr=1e-2, seed=3, tag="tpo-iter-1")
    assert a.digest() == b.digest() and la == lb and len(la) == 9
    assert ref.digest() == ref_digest and a.tag == "tpo-iter-1"
    assert tpo_loss(a, ref, pairs) < LN2


def test_zero_epochs_returns_the_input():
    p = small_net(6)
    out, hist = train_preferences(p, p.copy(), random_pairs(np.random.default_rng(0), 3), epochs=0)
    assert out is p and hist == []
    with pytest.raises(ValueError):
        train_preferences(p, p, [], loss="ppo")
