import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    capacity_loop, cue_sinr_loop, difference_reward_loop, literal_reward_loop, random_instance, rel_err, shaped_reward_loop, vue_sinr_loop,
)
from v2xalloc.config import ConfigError, EnvConfig
from v2xalloc.env import (
    Allocation, ChannelSnapshot, LinkSet, V2XEnv, capacity, cue_sinr, difference_reward, interference_matrix,
    shaped_reward,
    slot_reward, vue_sinr,
)


def make_env(seed=0, **changes):
    cfg = EnvConfig(**changes)
    return V2XEnv(cfg, np.random.default_rng(seed)).reset()


def single_link(noise=1.0):
    snap = ChannelSnapshot(
        v2v=np.zeros((2, 2, 1)), veh_bs=np.zeros((2, 1)), cue_bs=np.ones(1), cue_veh=np.zeros((1, 2)),
        cue_power_mw=1.0, noise_mw=noise,
    )
    links = LinkSet([(0, 1)], np.array([0]), np.array([1]))
    return snap, links


# ---------------------------------------------------------------- SINR
def test_cue_sinr_interference_free_equals_one():
    snap, links = single_link()
    alloc = Allocation(np.array([0]), np.array([0.0]), np.array([False]))
    assert cue_sinr(snap, links, alloc)[0] == 1.0


def test_cue_sinr_with_one_sharer_halves():
    snap, links = single_link()
    snap.cue_bs[:] = 2.0
    snap.veh_bs[0, 0] = 1.0
    alloc = Allocation(np.array([0]), np.array([1.0]), np.array([True]))
    assert cue_sinr(snap, links, alloc)[0] == pytest.approx(1.0)


def test_vue_sinr_without_interference_is_snr():
    snap, links = single_link(noise=0.5)
    snap.v2v[0, 1, 0] = 3.0
    alloc = Allocation(np.array([0]), np.array([2.0]), np.array([True]))
    assert vue_sinr(snap, links, alloc)[0] == pytest.approx(2.0 * 3.0 / 0.5)


def test_symmetric_cochannel_links_get_equal_sinr():
    snap = ChannelSnapshot(
        v2v=np.full((4, 4, 1), 1e-9), veh_bs=np.zeros((4, 1)), cue_bs=np.ones(1), cue_veh=np.full((1, 4), 1e-12),
        cue_power_mw=1.0, noise_mw=1e-11,
    )
    snap.v2v[0, 1, 0] = snap.v2v[2, 3, 0] = 1e-7
    links = LinkSet([(0, 1), (2, 3)], np.array([0, 2]), np.array([1, 3]))
    alloc = Allocation(np.array([0, 0]), np.array([10.0, 10.0]), np.array([True, True]))
    g = vue_sinr(snap, links, alloc)
    assert g[0] == pytest.approx(g[1], rel=1e-14)


@pytest.mark.parametrize("n_links", [5, 10])
def test_sinr_matches_loop_oracle(n_links):
    rng = np.random.default_rng(n_links)
    worst = 0.0
    for _ in range(100):
        snap, links, alloc = random_instance(rng, s=8, m=4, n_links=n_links)
        worst = max(worst, rel_err(cue_sinr(snap, links, alloc), cue_sinr_loop(snap, links, alloc)))
        worst = max(worst, rel_err(vue_sinr(snap, links, alloc), vue_sinr_loop(snap, links, alloc)))
    assert worst < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_interference_is_conserved(seed):
    # what every receiver picks up on subchannel i equals what the transmitters on i emit towards them
    snap, links, alloc = random_instance(np.random.default_rng(seed), s=7, m=3, n_links=9)
    M = interference_matrix(snap, links, alloc)
    for i in range(3):
        on = alloc.channel == i
        received = M[:, on].sum()
        emitted = sum(
            alloc.power_mw[k] * snap.v2v[links.tx[k], links.rx[j], i]
            for k in np.flatnonzero(on & alloc.active) for j in np.flatnonzero(on) if j != k
        )
        assert received == pytest.approx(emitted, rel=1e-9, abs=0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sinr_positive_and_finite(seed):
    snap, links, alloc = random_instance(np.random.default_rng(seed))
    for g in (cue_sinr(snap, links, alloc), vue_sinr(snap, links, alloc)):
        assert np.all(np.isfinite(g)) and np.all(g > 0)


# ---------------------------------------------------------------- capacity
@pytest.mark.parametrize("sinr,expected", [(1.0, 1.5e6), (0.0, 0.0), (3.0, 3.0e6)])
def test_capacity_examples(sinr, expected):
    assert capacity(sinr, 1.5e6) == pytest.approx(expected)


def test_capacity_matches_loop():
    g = np.random.default_rng(1).exponential(10.0, size=200)
    assert rel_err(capacity(g, 1.5e6), capacity_loop(g, 1.5e6)) < 1e-12


@given(st.floats(0, 1e8), st.floats(0, 1e8))
def test_capacity_monotone(a, b):
    if a < b:
        assert capacity(a, 1.5e6) < capacity(b, 1.5e6) or np.isclose(a, b, rtol=1e-15)


# ---------------------------------------------------------------- rewards
def test_literal_reward_weight_collapse():
    r = slot_reward(np.array([3.0]), np.array([1.0]), 0.05, np.array([False]), 0.0, 0.0, 0.1, 10.0)
    assert r[0] == pytest.approx(1.0)


def test_literal_reward_first_slot_has_no_time_term():
    r = slot_reward(np.array([0.0]), np.array([]), 0.1, np.array([False]), 0.3, 1.0, 0.1, 10.0)
    assert r[0] == 0.0


def test_literal_reward_matches_loop_on_small_scenario():
    env = make_env(3, n_vehicles=4, reward_mode="literal")
    rng = np.random.default_rng(0)
    c = env.config
    for _ in range(100):
        n = len(env.links)
        ch, pw = rng.integers(c.n_subchannels, size=n), rng.integers(3, size=n)
        remaining = env.remaining_time
        res = env.step_small_scale(ch, pw)
        want = literal_reward_loop(res.cue_sinr, res.v2v_sinr, res.active, remaining, res.newly_failed,
                                   c.lambda_c, c.lambda_p, c.deadline_s, c.fail_penalty)
        assert rel_err(res.rewards, want) < 1e-12
        if env.period_done:
            env.end_period()


def test_shaped_reward_matches_loop():
    rng = np.random.default_rng(4)
    for _ in range(100):
        gc, gv = rng.exponential(5, 20), rng.exponential(5, 12)
        used, failed = rng.uniform(0, 0.1, 12), rng.random(12) < 0.2
        got = shaped_reward(gc, gv, used, failed, 0.3, 1.0, 0.1, 10.0)
        assert rel_err(got, shaped_reward_loop(gc, gv, used, failed, 0.3, 1.0, 0.1, 10.0)) < 1e-12


def test_difference_reward_matches_silenced_link_loop():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        snap, links, alloc = random_instance(rng, s=7, m=3, n_links=8)
        used, failed = rng.uniform(0, 0.1, 8), rng.random(8) < 0.2
        got = difference_reward(snap, links, alloc, 0.3, 1.0, used, 0.1, failed, 10.0)
        want = difference_reward_loop(snap, links, alloc, 0.3, 1.0, used, 0.1, failed, 10.0)
        worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0))))
    assert worst < 1e-10


def test_silent_link_contributes_nothing():
    snap, links, alloc = random_instance(np.random.default_rng(0), n_links=5)
    alloc.active[2] = False
    r = difference_reward(snap, links, alloc, 0.3, 1.0, np.zeros(5), 0.1, np.zeros(5, bool), 10.0)
    assert r[2] == 0.0


def test_shaped_time_charge_freezes_after_delivery():
    env = make_env(0, n_vehicles=4, payload_bits=8)
    n = len(env.links)
    env.step_small_scale(np.zeros(n, int), np.zeros(n, int))
    done = env.succeeded
    assert done.any()
    frozen = env.time_used[done].copy()
    env.step_small_scale(np.zeros(n, int), np.zeros(n, int))
    assert np.array_equal(env.time_used[done], frozen)


# ---------------------------------------------------------------- bookkeeping
def test_deadline_algebra_and_dichotomy():
    env = make_env(1, n_vehicles=6)
    rng = np.random.default_rng(2)
    c = env.config
    for _ in range(3):
        n = len(env.links)
        while not env.period_done:
            env.step_small_scale(rng.integers(c.n_subchannels, size=n), rng.integers(3, size=n))
            assert env.remaining_slots + env.elapsed_slots == c.deadline_slots
            assert env.remaining_time + env.elapsed_slots * c.dt_small_s == pytest.approx(c.deadline_s, abs=1e-15)
            assert np.all(env.remaining_bits <= c.payload_bits)
        assert np.all(env.succeeded ^ env.failed)
        out = env.end_period()
        assert out.successes + out.failures == out.n_links


def test_fresh_link_state():
    env = make_env(0)
    assert np.all(env.payload_fraction() == 1.0)
    assert env.remaining_time == pytest.approx(0.1)


def test_allocation_size_mismatch_is_config_error():
    env = make_env(0, n_vehicles=4)
    with pytest.raises(ConfigError):
        env.step_small_scale(np.zeros(3, int), np.zeros(3, int))
    n = len(env.links)
    with pytest.raises(ConfigError):
        env.step_small_scale(np.full(n, 20), np.zeros(n, int))


def test_observation_width():
    env = make_env(0)
    assert env.observe().shape == (len(env.links), 60)


# ---------------------------------------------------------------- mobility
def test_straight_motion_advances_speed_times_dt():
    env = make_env(0, n_vehicles=4, turn_left_prob=0.0, turn_right_prob=0.0)
    v = env.vehicles[0]
    v.speed = 10.0
    v.direction, v.lane_offset = 0, 0
    v.position = env._place(0, 0, 100.0)
    before = v.position.copy()
    env._move(v, 0.1)
    assert v.position[1] - before[1] == pytest.approx(1.0)
    assert v.position[0] == before[0]


def test_stationary_vehicles_keep_distances():
    env = make_env(5, n_vehicles=8)
    for v in env.vehicles:
        v.speed = 0.0
    before = env.distance.copy()
    env.step_large_scale()
    assert np.array_equal(env.distance, before)


def test_destinations_always_three_over_100_steps():
    env = make_env(7, n_vehicles=20)
    c = env.config
    for _ in range(100):
        env.step_large_scale()
        for v in env.vehicles:
            assert len(v.destinations) == 3
            assert v.id not in v.destinations
            assert len(set(v.destinations)) == 3
            assert c.speed_min_mps <= v.speed <= c.speed_max_mps
            assert 0 <= v.lane(c.lanes_per_direction) < 16
        assert len(env.vehicles) == 20
        assert len(env.graph) == 60


def test_destinations_prefer_vehicles_within_threshold():
    env = make_env(3, n_vehicles=20)
    idx = {v.id: i for i, v in enumerate(env.vehicles)}
    for i, v in enumerate(env.vehicles):
        near = [u for u in env.vehicles if u.id != v.id and env.distance[i, idx[u.id]] <= 150.0]
        if len(near) >= 3:
            assert all(env.distance[i, idx[d]] <= 150.0 for d in v.destinations)


# ---------------------------------------------------------------- dynamic mode
def test_arrival_certain_when_probability_one():
    env = make_env(0, dynamic=True)
    env.add_prob = 1.0
    n = len(env.vehicles)
    env.dynamic_arrivals()
    assert len(env.vehicles) == n + 1 and env.add_prob == 0.0


def test_no_add_increments_probability():
    env = make_env(0, dynamic=True, add_prob_inc=0.1)
    env.add_prob = 0.0
    env.dynamic_arrivals()
    assert env.add_prob == pytest.approx(0.1)


def test_dynamic_event_log_replays_vehicle_count():
    env = make_env(11, dynamic=True)
    count = len(env.vehicles)
    seen = 0
    for _ in range(5000):
        env.step_large_scale()
        for kind, _ in env.events[seen:]:
            count += 1 if kind == "arrive" else -1
            assert count >= 0
        seen = len(env.events)
        assert count == len(env.vehicles)
        assert len(env.graph) == 3 * len(env.vehicles) or len(env.vehicles) < 4


def test_no_arrivals_means_count_only_falls():
    env = make_env(2, dynamic=True, add_prob_inc=0.0)
    counts = [len(env.vehicles)]
    for _ in range(500):
        env.step_large_scale()
        counts.append(len(env.vehicles))
    assert all(b <= a for a, b in zip(counts, counts[1:]))
    assert counts[-1] < counts[0]


def test_unknown_reward_mode_rejected():
    with pytest.raises(ConfigError):
        dataclasses.replace(EnvConfig(), reward_mode="other")
