import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import decompose_loop, double_q_loop, rel_err
from v2xalloc.agent import (
    DDQNAgent, ReplayBuffer, assemble_state, compose_action, decompose_action, double_q_target, max_q_target,
    neighbor_channel_counts, scale_features,
)


def small_agent(seed=0, **kw):
    kw.setdefault("hidden", (16, 8))
    kw.setdefault("state_dim", 6)
    kw.setdefault("n_actions", 4)
    kw.setdefault("batch_size", 8)
    return DDQNAgent(random_state=seed, **kw).initialize()


def filled_buffer(state_dim, n_actions, n=64, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(128, state_dim)
    for _ in range(n):
        buf.add(rng.normal(size=state_dim), rng.integers(n_actions), rng.normal(), rng.normal(size=state_dim))
    return buf


# ---------------------------------------------------------------- actions
def test_action_59_decomposes_to_last_subchannel_lowest_power():
    sub, power = decompose_action(59, 20)
    assert (sub, power) == (19, 2)


def test_decomposition_is_bijective():
    pairs = {tuple(int(v) for v in decompose_action(a, 20)) for a in range(60)}
    assert pairs == {(r, p) for r in range(20) for p in range(3)}
    for a in range(60):
        assert compose_action(*decompose_action(a, 20), 20) == a
        assert tuple(int(v) for v in decompose_action(a, 20)) == decompose_loop(a, 20)


def test_greedy_picks_largest_and_breaks_ties_low():
    agent = small_agent()
    agent.q_.layers[-1].W[:] = 0.0
    agent.q_.layers[-1].b[:] = [0.0, 1.0, 1.0, 0.5]
    assert agent.predict(np.zeros((1, 6)))[0] == 1
    agent.q_.layers[-1].b[:] = [0.0, 0.0, 3.0, 0.0]
    assert agent.act(np.zeros((1, 6)), 0.0, np.random.default_rng(0))[0] == 2


def test_full_exploration_is_uniform():
    agent = small_agent(n_actions=60)
    draws = agent.act(np.zeros((10_000, 6)), 1.0, np.random.default_rng(0))
    counts = np.bincount(draws, minlength=60)
    expected = 10_000 / 60
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    # 99.9% quantile of chi-square with 59 degrees of freedom is about 98.3
    assert chi2 < 98.3


def test_epsilon_out_of_range():
    with pytest.raises(ValueError):
        small_agent().act(np.zeros((1, 6)), 1.5, np.random.default_rng(0))


# ---------------------------------------------------------------- state
def test_state_has_102_entries_and_fresh_link_values():
    s = assemble_state(np.zeros(20), np.zeros(60), np.zeros(20), 1.0, 0.1, 0.1)
    assert s.shape == (102,)
    assert s[-2] == 1.0 and s[-1] == 1.0


def test_three_neighbours_on_subchannel_seven():
    counts = neighbor_channel_counts([7, 7, 7], 20)
    assert counts[7] == 3 and counts.sum() == 3
    s = assemble_state(np.zeros(20), np.zeros(60), counts, 0.5, 0.05, 0.1, fanout=5)
    assert s[80 + 7] == pytest.approx(3 / 5)


def test_state_without_embedding_has_82_entries():
    assert assemble_state(None, np.zeros(60), np.zeros(20), 1.0, 0.1, 0.1).shape == (82,)


def test_state_range_checks():
    with pytest.raises(ValueError):
        assemble_state(np.zeros(20), np.zeros(60), np.zeros(20), 1.5, 0.1, 0.1)
    with pytest.raises(ValueError):
        assemble_state(np.zeros(20), np.zeros(60), np.zeros(20), 1.0, 0.2, 0.1)
    with pytest.raises(ValueError):
        assemble_state(np.zeros((2, 20)), np.zeros((3, 60)), np.zeros((3, 20)), 1.0, 0.1, 0.1)


def test_feature_scaling_is_noise_referenced():
    feats = np.concatenate([np.full(20, -100.0), np.full(20, -120.0), np.full(20, -114.0)])
    x = scale_features(feats, noise_dbm=-114.0, max_power_dbm=23.0)
    assert x[0] == pytest.approx((-100 + 23 + 114) / 60)
    assert x[20] == pytest.approx((-120 + 23 + 114) / 60)
    assert x[40] == pytest.approx(0.0)


def test_wrong_state_width_rejected():
    with pytest.raises(ValueError):
        small_agent().q_values(np.zeros((1, 7)))


# ---------------------------------------------------------------- targets
def test_double_q_hand_example():
    y = double_q_target(np.array([2.0]), np.array([[1.0, 5.0, 3.0]]), np.array([[10.0, 20.0, 30.0]]), 1.0)
    assert y[0] == 22.0
    assert max_q_target(np.array([2.0]), np.array([[10.0, 20.0, 30.0]]), 1.0)[0] == 32.0


def test_myopic_target_is_reward():
    r = np.array([1.0, -2.0])
    assert np.array_equal(double_q_target(r, np.ones((2, 3)), np.ones((2, 3)), 0.0), r)


def test_held_transition_discounts_by_step_count():
    agent = small_agent(discount=0.5)
    s2 = np.random.default_rng(0).normal(size=(2, 6))
    q = agent.target_(s2)[np.arange(2), np.argmax(agent.q_(s2), axis=1)]
    y = agent.compute_target(np.zeros(2), s2, steps=np.array([1, 3]))
    assert y[0] == pytest.approx(0.5 * q[0]) and y[1] == pytest.approx(0.125 * q[1])
    with pytest.raises(ValueError):
        ReplayBuffer(4, 2).add(np.zeros(2), 0, 1.0, np.zeros(2), steps=0)


def test_target_matches_loop_with_random_nets():
    agent = small_agent(3, n_actions=60, state_dim=102, hidden=(32, 16))
    agent.target_ = agent.q_.copy()
    for layer in agent.target_.layers:
        layer.W += np.random.default_rng(5).normal(scale=0.1, size=layer.W.shape)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        s2, r = rng.normal(size=(8, 102)), rng.normal(size=8)
        got = agent.compute_target(r, s2)
        want = double_q_loop(r, agent.q_(s2).tolist(), agent.target_(s2).tolist(), agent.discount)
        worst = max(worst, rel_err(got, want))
    assert worst < 1e-12


# ---------------------------------------------------------------- learning
def test_gradient_zero_when_target_equals_q():
    agent = small_agent()
    rng = np.random.default_rng(0)
    s, a = rng.normal(size=(8, 6)), rng.integers(4, size=8)
    y = agent.q_(s)[np.arange(8), a]
    loss, grads = agent.td_gradients(s, a, y)
    assert loss == 0.0 and all(np.all(g == 0) for g in grads.values())


def test_non_taken_outputs_get_zero_gradient():
    agent = small_agent()
    rng = np.random.default_rng(1)
    s, y = rng.normal(size=(8, 6)), rng.normal(size=8)
    a = np.zeros(8, dtype=int)
    _, grads = agent.td_gradients(s, a, y)
    last = len(agent.q_.layers) - 1
    assert np.all(grads[f"{last}.W"][1:] == 0) and np.all(grads[f"{last}.b"][1:] == 0)
    assert np.any(grads[f"{last}.W"][0] != 0)


def test_td_gradient_matches_finite_difference():
    agent = small_agent(2)
    rng = np.random.default_rng(2)
    s, a, y = rng.normal(size=(5, 6)), rng.integers(4, size=5), rng.normal(size=5)
    _, grads = agent.td_gradients(s, a, y)
    params = agent.q_.params()
    for name, arr in params.items():
        flat = arr.reshape(-1)
        for k in rng.choice(flat.size, size=min(10, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + 1e-5
            up = agent.td_gradients(s, a, y)[0]
            flat[k] = old - 1e-5
            down = agent.td_gradients(s, a, y)[0]
            flat[k] = old
            est = (up - down) / 2e-5
            g = grads[name].reshape(-1)[k]
            assert abs(g - est) <= 1e-4 * max(abs(g) + abs(est), 1e-8)


def test_small_buffer_skips_update():
    agent = small_agent()
    before = {k: v.copy() for k, v in agent.q_.params().items()}
    agent.partial_fit(filled_buffer(6, 4, n=3))
    assert all(np.array_equal(before[k], v) for k, v in agent.q_.params().items())
    assert agent.n_updates_ == 0


def test_target_changes_only_at_sync():
    agent = small_agent(target_sync=4)
    buf = filled_buffer(6, 4)
    rng = np.random.default_rng(0)
    snapshot = {k: v.copy() for k, v in agent.target_.params().items()}
    for step in range(1, 13):
        agent.partial_fit(buf, rng)
        same = all(np.array_equal(snapshot[k], v) for k, v in agent.target_.params().items())
        assert same == (step % 4 != 0)
        if not same:
            snapshot = {k: v.copy() for k, v in agent.target_.params().items()}


def test_same_seed_same_buffer_same_update():
    buf = filled_buffer(6, 4, seed=3)
    a, b = small_agent(9), small_agent(9)
    for _ in range(5):
        a.partial_fit(buf, np.random.default_rng(1))
        b.partial_fit(buf, np.random.default_rng(1))
    assert all(np.array_equal(a.q_.params()[k], b.q_.params()[k]) for k in a.q_.params())


def test_learns_a_contextual_bandit():
    # reward 1 for the action named by the sign pattern of the first two inputs
    agent = small_agent(0, discount=0.0, lr=0.01, lr_floor=0.01, target_sync=50, batch_size=32)
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(4096, 6)
    best = lambda s: 2 * (s[:, 0] > 0) + (s[:, 1] > 0)
    for _ in range(2000):
        s = rng.normal(size=(1, 6))
        a = rng.integers(4)
        buf.add(s[0], a, float(a == best(s)[0]), np.zeros(6))
        agent.partial_fit(buf, rng)
    test = rng.normal(size=(500, 6))
    assert np.mean(agent.predict(test) == best(test)) > 0.8


@given(st.integers(0, 59))
def test_decomposition_ranges(a):
    sub, power = decompose_action(a, 20)
    assert 0 <= sub < 20 and 0 <= power < 3


def test_non_finite_reward_rejected():
    with pytest.raises(ValueError):
        ReplayBuffer(4, 2).add(np.zeros(2), 0, np.nan, np.zeros(2))


def test_get_params_round_trip():
    agent = DDQNAgent(lr=0.01, double_q=False)
    assert DDQNAgent(**agent.get_params()).get_params() == agent.get_params()
