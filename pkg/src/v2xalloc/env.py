"""Single-intersection V2X simulator.

Vehicles drive on a 4x4-lane cross road centred on the base station. Every
vehicle opens one V2V link to each of its destinations; every subchannel
carries one uplink CUE with a fixed assignment. The environment advances on
two clocks: large-scale steps (mobility, path loss, shadowing, destinations,
link graph) and 1 ms small-scale slots (Rayleigh fading, SINR, payload
delivery, rewards).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .channel import db_to_linear, linear_to_db, rayleigh_power, v2i_pathloss_db, v2v_pathloss_db
from .config import ConfigError, EnvConfig
from .graph import LinkGraph, build_graph

UP, DOWN, RIGHT, LEFT = 0, 1, 2, 3
N_DIRECTIONS = 4
# sign of motion along the travelled axis
_SIGN = {UP: 1.0, DOWN: -1.0, RIGHT: 1.0, LEFT: -1.0}
# (left turn, right turn)
_TURNS = {UP: (LEFT, RIGHT), DOWN: (RIGHT, LEFT), RIGHT: (UP, DOWN), LEFT: (DOWN, UP)}


def _vertical(direction):
    return direction in (UP, DOWN)


@dataclass
class Vehicle:
    id: int
    position: np.ndarray
    direction: int
    lane_offset: int
    speed: float
    destinations: list = field(default_factory=list)

    def lane(self, lanes_per_direction=4):
        return self.direction * lanes_per_direction + self.lane_offset


@dataclass
class LinkSet:
    """Directed V2V links; ``tx``/``rx`` index the environment's vehicle list."""

    labels: list
    tx: np.ndarray
    rx: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class Allocation:
    """Subchannel and power choice for every link, plus which links transmit."""

    channel: np.ndarray
    power_mw: np.ndarray
    active: np.ndarray

    def indicator(self, n_subchannels):
        rho = np.zeros((len(self.channel), n_subchannels))
        rho[np.arange(len(self.channel)), self.channel] = 1.0
        return rho


@dataclass
class ChannelSnapshot:
    """Linear power gains for one slot (antenna gains and noise figures folded in)."""

    v2v: np.ndarray  # (s, s, m) transmitter vehicle -> receiver vehicle
    veh_bs: np.ndarray  # (s, m)
    cue_bs: np.ndarray  # (m,) CUE i on subchannel i
    cue_veh: np.ndarray  # (m, s) CUE i -> vehicle on subchannel i
    cue_power_mw: float
    noise_mw: float


def interference_matrix(snap, links, alloc):
    """Pairwise co-channel V2V interference powers, ``M[src, dst]`` in mW."""
    same = alloc.channel[:, None] == alloc.channel[None, :]
    np.fill_diagonal(same, False)
    gain = snap.v2v[links.tx[:, None], links.rx[None, :], alloc.channel[:, None]]
    src = (alloc.power_mw * alloc.active)[:, None]
    return np.where(same, src * gain, 0.0)


def cue_interference(snap, links, alloc):
    """Power each link's receiver picks up from the CUE sharing its subchannel."""
    return snap.cue_power_mw * snap.cue_veh[alloc.channel, links.rx]


def cue_sinr(snap, links, alloc):
    m = snap.cue_bs.shape[0]
    leak = alloc.power_mw * alloc.active * snap.veh_bs[links.tx, alloc.channel]
    interference = np.bincount(alloc.channel, weights=leak, minlength=m)
    return snap.cue_power_mw * snap.cue_bs / (snap.noise_mw + interference)


def vue_sinr(snap, links, alloc):
    signal = alloc.power_mw * snap.v2v[links.tx, links.rx, alloc.channel]
    g_v2i = cue_interference(snap, links, alloc)
    g_v2v = interference_matrix(snap, links, alloc).sum(axis=0)
    return signal / (snap.noise_mw + g_v2i + g_v2v)


def capacity(sinr, bandwidth):
    """Shannon capacity in bits/s."""
    return bandwidth * np.log2(1.0 + np.asarray(sinr, dtype=float))


def received_interference_dbm(snap, links, alloc):
    """Interference plus noise seen by every link's receiver on every subchannel, (L, m) dBm."""
    m = snap.cue_bs.shape[0]
    n = len(links)
    total = np.full((n, m), snap.noise_mw) + snap.cue_power_mw * snap.cue_veh[:, links.rx].T
    if n:
        gain = snap.v2v[links.tx[:, None], links.rx[None, :], alloc.channel[:, None]]
        contrib = (alloc.power_mw * alloc.active)[:, None] * gain
        np.fill_diagonal(contrib, 0.0)
        onehot = alloc.indicator(m)
        total += contrib.T @ onehot
    return linear_to_db(total)


@dataclass
class SlotResult:
    rewards: np.ndarray
    cue_capacity: np.ndarray
    v2v_capacity: np.ndarray
    cue_sinr: np.ndarray
    v2v_sinr: np.ndarray
    active: np.ndarray
    newly_failed: np.ndarray
    remaining_s: float


@dataclass
class PeriodOutcome:
    n_links: int
    successes: int
    failures: int
    v2i_sum_rate_bps: float

    @property
    def success_rate(self):
        return self.successes / self.n_links if self.n_links else float("nan")


class V2XEnv:
    """Discrete-time V2X environment.

    ``rng`` drives everything stochastic in the world (placement, turning,
    shadowing, fading, arrivals); policies must use their own generators so the
    event trace does not depend on the actions taken.
    """

    def __init__(self, config=None, rng=None):
        self.config = config or EnvConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        c = self.config
        self.center = c.map_size_m / 2.0
        self.bs_position = np.array([self.center, self.center])
        self.noise_mw = float(db_to_linear(c.noise_dbm))
        self.power_mw = db_to_linear(np.array(c.power_levels_dbm))
        self.cue_power_mw = float(db_to_linear(c.cue_power_dbm))
        large = c.dt_large_s / c.deadline_s
        if large < 1 - 1e-9 or abs(large - round(large)) > 1e-9:
            raise ConfigError("dt_large_s must be a whole multiple of deadline_s")
        self.periods_per_large_step = int(round(large))
        self.vehicles = []
        self.add_prob = 0.0
        self._ids = itertools.count()
        self.events = []
        self.periods = 0

    # ---------------------------------------------------------------- geometry
    def lane_coordinate(self, direction, offset):
        c, w = self.center, self.config.lane_width_m
        if direction in (UP, LEFT):
            return c + w / 2 + offset * w
        return c - w / 2 - offset * w

    def _place(self, direction, offset, along):
        across = self.lane_coordinate(direction, offset)
        if _vertical(direction):
            return np.array([across, along])
        return np.array([along, across])

    def _spawn(self, at_entry=False):
        c = self.config
        direction = int(self.rng.integers(N_DIRECTIONS))
        offset = int(self.rng.integers(c.lanes_per_direction))
        speed = float(self.rng.uniform(c.speed_min_mps, c.speed_max_mps))
        if at_entry:
            along = 0.0 if _SIGN[direction] > 0 else c.map_size_m
        else:
            along = float(self.rng.uniform(0.0, c.map_size_m))
        return Vehicle(next(self._ids), self._place(direction, offset, along), direction, offset, speed)

    def _on_map(self, v):
        return bool(np.all(v.position >= 0.0) and np.all(v.position <= self.config.map_size_m))

    def _move(self, v, dt):
        c = self.config
        dist = v.speed * dt
        axis = 1 if _vertical(v.direction) else 0
        sign = _SIGN[v.direction]
        ahead = (self.center - v.position[axis]) * sign
        if 0.0 < ahead <= dist:
            u = self.rng.random()
            if u < c.turn_left_prob + c.turn_right_prob:
                new_dir = _TURNS[v.direction][0 if u < c.turn_left_prob else 1]
                rest = dist - ahead
                v.direction = new_dir
                v.position = self._place(new_dir, v.lane_offset, self.center + _SIGN[new_dir] * rest)
                return
        v.position = v.position.copy()
        v.position[axis] += sign * dist

    # ---------------------------------------------------------------- lifecycle
    def reset(self, n_vehicles=None):
        c = self.config
        n = c.n_vehicles if n_vehicles is None else n_vehicles
        self.vehicles = [self._spawn() for _ in range(n)]
        self.cue_positions = self.rng.uniform(0.0, c.map_size_m, size=(c.n_subchannels, 2))
        self.add_prob = 0.0
        self.events = []
        self.periods = 0
        self._refresh_large_scale()
        self.begin_period()
        return self

    def step_large_scale(self):
        """Advance mobility by one large-scale step and refresh everything built on positions."""
        c = self.config
        kept = []
        for v in self.vehicles:
            self._move(v, c.dt_large_s)
            if self._on_map(v):
                kept.append(v)
            elif c.dynamic:
                self.events.append(("depart", v.id))
            else:
                fresh = self._spawn(at_entry=True)
                v.position, v.direction, v.lane_offset = fresh.position, fresh.direction, fresh.lane_offset
                kept.append(v)
        self.vehicles = kept
        if c.dynamic:
            self.dynamic_arrivals()
        self._refresh_large_scale()
        return self

    def dynamic_arrivals(self):
        """Probabilistic vehicle arrival with an increasing add probability."""
        if self.rng.random() < self.add_prob:
            v = self._spawn(at_entry=True)
            self.vehicles.append(v)
            self.events.append(("arrive", v.id))
            self.add_prob = 0.0
        else:
            self.add_prob = min(1.0, self.add_prob + self.config.add_prob_inc)
        return self

    def _refresh_large_scale(self):
        c = self.config
        s = len(self.vehicles)
        self.positions = np.array([v.position for v in self.vehicles]).reshape(s, 2)
        self.distance = np.hypot(
            self.positions[:, None, 0] - self.positions[None, :, 0],
            self.positions[:, None, 1] - self.positions[None, :, 1],
        )
        self._choose_destinations()
        self._large_scale_gains()
        self.graph = build_graph(self.vehicles, n_destinations=min(c.n_destinations, max(s - 1, 0)))
        self.links = self._link_set(self.graph)

    def _choose_destinations(self):
        c = self.config
        s = len(self.vehicles)
        want = min(c.n_destinations, max(s - 1, 0))
        index = {v.id: i for i, v in enumerate(self.vehicles)}
        for i, v in enumerate(self.vehicles):
            d = self.distance[i]
            near = d <= c.neighbor_threshold_m
            keep = [t for t in v.destinations if t in index and near[index[t]] and t != v.id][:want]
            taken = set(keep) | {v.id}
            pool = [self.vehicles[k].id for k in np.flatnonzero(near) if self.vehicles[k].id not in taken]
            need = want - len(keep)
            if need and len(pool) >= need:
                keep += [int(t) for t in self.rng.choice(pool, size=need, replace=False)]
            elif need:
                keep += pool
                taken |= set(pool)
                for k in np.argsort(d, kind="stable"):
                    if len(keep) == want:
                        break
                    if self.vehicles[k].id not in taken:
                        keep.append(self.vehicles[k].id)
                        taken.add(self.vehicles[k].id)
            v.destinations = keep

    def _link_set(self, graph):
        index = {v.id: i for i, v in enumerate(self.vehicles)}
        tx = np.array([index[t] for t, _ in graph.nodes], dtype=int)
        rx = np.array([index[r] for _, r in graph.nodes], dtype=int)
        return LinkSet(list(graph.nodes), tx, rx)

    def _large_scale_gains(self):
        c = self.config
        s, m = len(self.vehicles), c.n_subchannels
        rng = self.rng
        veh_ant = c.veh_antenna_gain_dbi
        pl, _ = v2v_pathloss_db(self.positions, self.positions, c.carrier_ghz, c.veh_antenna_height_m)
        shadow = rng.normal(0.0, c.v2v_shadow_db, size=(s, s))
        shadow = np.triu(shadow, 1) + np.triu(shadow, 1).T
        self.v2v_large_db = -pl - shadow + 2 * veh_ant - c.veh_noise_figure_db
        bs_terms = veh_ant + c.bs_antenna_gain_dbi - c.bs_noise_figure_db
        pl_bs = v2i_pathloss_db(self.positions, self.bs_position, c.bs_antenna_height_m, c.veh_antenna_height_m)
        self.veh_bs_large_db = -pl_bs - rng.normal(0.0, c.v2i_shadow_db, size=s) + bs_terms
        pl_cue = v2i_pathloss_db(self.cue_positions, self.bs_position, c.bs_antenna_height_m, c.veh_antenna_height_m)
        self.cue_bs_large_db = -pl_cue - rng.normal(0.0, c.v2i_shadow_db, size=m) + bs_terms
        pl_cv, _ = v2v_pathloss_db(self.cue_positions, self.positions, c.carrier_ghz, c.veh_antenna_height_m)
        self.cue_veh_large_db = (
            -pl_cv - rng.normal(0.0, c.v2v_shadow_db, size=(m, s)) + 2 * veh_ant - c.veh_noise_figure_db
        )
        self._v2v_large_lin = db_to_linear(self.v2v_large_db)
        np.fill_diagonal(self._v2v_large_lin, 0.0)
        self._veh_bs_large_lin = db_to_linear(self.veh_bs_large_db)
        self._cue_bs_large_lin = db_to_linear(self.cue_bs_large_db)
        self._cue_veh_large_lin = db_to_linear(self.cue_veh_large_db)
        self.resample_fading()

    def resample_fading(self):
        c = self.config
        s, m = len(self.vehicles), c.n_subchannels
        rng = self.rng
        self.snapshot = ChannelSnapshot(
            v2v=self._v2v_large_lin[:, :, None] * rayleigh_power(rng, (s, s, m)),
            veh_bs=self._veh_bs_large_lin[:, None] * rayleigh_power(rng, (s, m)),
            cue_bs=self._cue_bs_large_lin * rayleigh_power(rng, m),
            cue_veh=self._cue_veh_large_lin * rayleigh_power(rng, (m, s)),
            cue_power_mw=self.cue_power_mw,
            noise_mw=self.noise_mw,
        )

    def begin_period(self):
        """Fresh payload and deadline for every current link."""
        n = len(self.links)
        self.remaining_bits = np.full(n, float(self.config.payload_bits))
        self.elapsed_slots = 0
        self.failed = np.zeros(n, dtype=bool)
        self.time_used = np.zeros(n)
        self._v2i_rate_sum = 0.0
        empty = Allocation(np.zeros(n, dtype=int), np.zeros(n), np.zeros(n, dtype=bool))
        self.last_interference_dbm = received_interference_dbm(self.snapshot, self.links, empty)

    def end_period(self):
        """Close the current payload period; run the large-scale step when one is due."""
        slots = max(self.elapsed_slots, 1)
        outcome = PeriodOutcome(
            n_links=len(self.links),
            successes=int(np.sum(self.remaining_bits <= 0)),
            failures=int(np.sum(self.remaining_bits > 0)),
            v2i_sum_rate_bps=self._v2i_rate_sum / slots,
        )
        self.periods += 1
        if self.periods % self.periods_per_large_step == 0:
            self.step_large_scale()
        self.begin_period()
        return outcome

    # ---------------------------------------------------------------- link state
    @property
    def remaining_slots(self):
        return self.config.deadline_slots - self.elapsed_slots

    @property
    def remaining_time(self):
        return self.remaining_slots * self.config.dt_small_s

    @property
    def period_done(self):
        return self.remaining_slots <= 0

    @property
    def active(self):
        return (self.remaining_bits > 0) & (self.remaining_slots > 0)

    @property
    def succeeded(self):
        return self.remaining_bits <= 0

    def payload_fraction(self):
        return self.remaining_bits / self.config.payload_bits

    def allocation(self, channels, power_levels, active=None):
        channels = np.asarray(channels, dtype=int)
        power_levels = np.asarray(power_levels, dtype=int)
        n = len(self.links)
        if channels.shape != (n,) or power_levels.shape != (n,):
            raise ConfigError(f"allocation covers {channels.shape} links, environment has {n}")
        if np.any((channels < 0) | (channels >= self.config.n_subchannels)):
            raise ConfigError("subchannel index out of range")
        if np.any((power_levels < 0) | (power_levels >= self.config.n_power_levels)):
            raise ConfigError("power level index out of range")
        act = self.active if active is None else np.asarray(active, dtype=bool)
        return Allocation(channels, self.power_mw[power_levels], act)

    def observe(self):
        """Node features: V2V gain, transmitter-to-BS gain, prior-slot interference, (L, 3m) in dB."""
        snap, links = self.snapshot, self.links
        g = linear_to_db(np.maximum(snap.v2v[links.tx, links.rx, :], 1e-30))
        h = linear_to_db(snap.veh_bs[links.tx, :])
        return np.concatenate([g, h, self.last_interference_dbm], axis=1)

    def step_small_scale(self, channels, power_levels):
        """One fast-fading slot with the given per-link allocation."""
        c = self.config
        alloc = self.allocation(channels, power_levels)
        self.resample_fading()
        snap, links = self.snapshot, self.links
        sinr_c = cue_sinr(snap, links, alloc)
        sinr_v = np.where(alloc.active, vue_sinr(snap, links, alloc), 0.0)
        cap_c = capacity(sinr_c, c.bandwidth_hz)
        cap_v = capacity(sinr_v, c.bandwidth_hz)
        remaining_before = self.remaining_time
        self.remaining_bits = np.where(
            alloc.active, np.maximum(self.remaining_bits - cap_v * c.dt_small_s, 0.0), self.remaining_bits
        )
        self.elapsed_slots += 1
        newly_failed = np.zeros(len(links), dtype=bool)
        if self.remaining_slots == 0:
            newly_failed = self.remaining_bits > 0
            self.failed |= newly_failed
        self.time_used = np.where(alloc.active, c.deadline_s - self.remaining_time, self.time_used)
        if c.reward_mode == "literal":
            rewards = slot_reward(
                sinr_c, sinr_v[alloc.active], remaining_before, newly_failed,
                c.lambda_c, c.lambda_p, c.deadline_s, c.fail_penalty,
            )
        elif c.reward_mode == "shaped":
            rewards = shaped_reward(
                sinr_c, sinr_v, self.time_used, newly_failed,
                c.lambda_c, c.lambda_p, c.deadline_s, c.fail_penalty,
            )
        else:
            rewards = difference_reward(
                snap, links, alloc, c.lambda_c, c.lambda_p, self.time_used, c.deadline_s,
                newly_failed, c.fail_penalty,
            )
        self._v2i_rate_sum += float(cap_c.sum())
        self.last_interference_dbm = received_interference_dbm(snap, links, alloc)
        return SlotResult(rewards, cap_c, cap_v, sinr_c, sinr_v, alloc.active, newly_failed, self.remaining_time)


def slot_reward(cue_sinr_, active_v2v_sinr, remaining_time, failed, lambda_c, lambda_p, deadline, fail_penalty):
    """Per-link reward: weighted V2I and V2V spectral-efficiency sums, elapsed-time and failure penalties."""
    shared = (
        lambda_c * np.sum(np.log2(1.0 + cue_sinr_))
        + (1.0 - lambda_c) * np.sum(np.log2(1.0 + active_v2v_sinr))
        - lambda_p * (deadline - remaining_time)
    )
    return shared - fail_penalty * np.asarray(failed, dtype=float)


def difference_reward(snap, links, alloc, lambda_c, lambda_p, time_used, deadline, failed, fail_penalty):
    """Each link's contribution to ``lambda_c * sum C^c + (1 - lambda_c) * sum C^v`` (in bits/s/Hz).

    The contribution is the weighted objective minus its value with the link
    silenced: the link's own spectral efficiency less what its interference
    costs the co-channel V2V receivers and the CUE it shares a subchannel with.
    The time charge and failure penalty are as in ``shaped_reward``.
    """
    power = alloc.power_mw * alloc.active
    signal = power * snap.v2v[links.tx, links.rx, alloc.channel]
    M = interference_matrix(snap, links, alloc)  # M[k, j]: k's interference at j's receiver
    denom = snap.noise_mw + cue_interference(snap, links, alloc) + M.sum(axis=0)
    own = np.log2(1.0 + signal / denom)
    without = np.log2(1.0 + signal[None, :] / (denom[None, :] - M))
    v2v_cost = np.sum(np.where(M > 0, without - own[None, :], 0.0), axis=1)

    m = snap.cue_bs.shape[0]
    leak = power * snap.veh_bs[links.tx, alloc.channel]
    cue_signal = snap.cue_power_mw * snap.cue_bs
    cue_denom = snap.noise_mw + np.bincount(alloc.channel, weights=leak, minlength=m)
    c = alloc.channel
    cue_cost = np.log2(1.0 + cue_signal[c] / (cue_denom[c] - leak)) - np.log2(1.0 + cue_signal[c] / cue_denom[c])

    gain = (1.0 - lambda_c) * (own - v2v_cost) - lambda_c * cue_cost
    charge = lambda_p * np.asarray(time_used, dtype=float) / deadline
    return gain - charge - fail_penalty * np.asarray(failed, dtype=float)


def shaped_reward(cue_sinr_, v2v_sinr, time_used, failed, lambda_c, lambda_p, deadline, fail_penalty):
    """Per-link reward with averaged spectral efficiencies and a per-link time charge.

    The V2I and V2V terms are means over subchannels and links (idle links
    count as zero), so the shared part stays O(1) whatever the network size.
    Each link pays ``lambda_p`` times the fraction of the deadline its own
    transmission has used so far; the charge stops growing once the payload
    is delivered, which rewards finishing early.
    """
    v2v_sinr = np.asarray(v2v_sinr, dtype=float)
    shared = lambda_c * np.mean(np.log2(1.0 + cue_sinr_))
    if v2v_sinr.size:
        shared += (1.0 - lambda_c) * np.mean(np.log2(1.0 + v2v_sinr))
    own = -lambda_p * np.asarray(time_used, dtype=float) / deadline
    return shared + own - fail_penalty * np.asarray(failed, dtype=float)
