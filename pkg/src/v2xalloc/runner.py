"""Training and evaluation loops.

One *iteration* is one decision slot: the links of one of ``n_batches``
rotating batches (plus any links that have never decided) pick an action, then
the environment runs ``slots_per_iteration`` fast-fading slots with every
link's held action. A held action becomes one replay transition that closes
when the same link decides again. The discount is applied per iteration, so a
transition held for ``k`` iterations carries the discounted sum of its
iteration rewards (times ``reward_scale``) and bootstraps with ``discount ** k``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .agent import DDQNAgent, ReplayBuffer, assemble_state, decompose_action, scale_features
from .config import Config, ConfigError
from .env import V2XEnv
from .graph import build_graph, sample_neighborhood
from .nn import NumericalError
from .sage import GraphSAGE, RewardMatrix

log = logging.getLogger(__name__)

METHODS = ("gnn", "dqn", "random")


def make_rngs(seed, *names):
    """Independent generators per named stream, all derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def stream_seed(seed, *tags):
    """Integer seed for a tagged sub-stream of ``seed``."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def build_sage(cfg, seed=0):
    s = cfg.sage
    return GraphSAGE(
        in_dim=cfg.env.feature_dim, hidden_dim=s.hidden_dim, out_dim=s.out_dim,
        label_dim=cfg.env.n_subchannels, fanout=cfg.graph.fanout, kappa=s.kappa,
        lr=s.lr, lr_floor=s.lr_floor, lr_decay=s.lr_decay, lr_decay_every=s.lr_decay_every,
        sync_every=s.sync_every, random_state=seed,
    ).initialize()


def state_dim(cfg, use_gnn):
    m = cfg.env.n_subchannels
    return (cfg.sage.out_dim if use_gnn else 0) + cfg.env.feature_dim + m + 2


def build_agent(cfg, use_gnn=True, double_q=True, seed=0):
    a = cfg.agent
    return DDQNAgent(
        state_dim=state_dim(cfg, use_gnn), n_actions=cfg.env.n_actions, hidden=a.hidden,
        discount=a.discount, lr=a.lr, lr_floor=a.lr_floor, lr_decay=a.lr_decay,
        lr_decay_every=a.lr_decay_every, batch_size=a.batch_size, target_sync=a.target_sync,
        double_q=double_q, random_state=seed,
    ).initialize()


def epsilon_at(iteration, total, cfg):
    a = cfg.agent
    horizon = max(a.eps_fraction * total, 1.0)
    frac = min(iteration / horizon, 1.0)
    return a.eps_start + frac * (a.eps_end - a.eps_start)


@dataclass
class Sample:
    """One completed payload period."""

    iteration: int
    vehicle_count: int
    v2i_sum_rate_bps: float
    v2v_success_rate: float
    decision_latency_us: float


@dataclass
class ActionRecord:
    iteration: int
    link: str
    remaining_time_s: float
    subchannel: int
    power_level: int
    reward: float


class Simulation:
    """Environment plus the decision machinery shared by every method.

    ``method`` is ``"gnn"`` (GraphSAGE embedding + DDQN), ``"dqn"`` (DDQN on
    local observations only) or ``"random"``.
    """

    def __init__(self, cfg, env, method, agent=None, sage=None, rng=None, learn=False,
                 log_actions=False, timing=False):
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        if method != "random" and agent is None:
            raise ConfigError(f"method {method!r} needs a Q-network")
        if method == "gnn" and sage is None:
            raise ConfigError("method 'gnn' needs a GraphSAGE model")
        if cfg.env.deadline_slots % cfg.env.slots_per_iteration:
            raise ConfigError("deadline must span a whole number of iterations")
        self.cfg = cfg
        self.env = env
        self.method = method
        self.agent = agent
        self.sage = sage
        self.learn = learn
        self.log_actions = log_actions
        self.timing = timing
        self.rng = rng or make_rngs(0, "policy", "sample", "learn")
        self.buffer = None
        if learn:
            self.buffer = ReplayBuffer(cfg.agent.buffer_size, agent.state_dim)
        self.rewards = RewardMatrix(cfg.env.n_subchannels)
        self.iteration = 0
        self.action_log = []
        self.samples = []
        self.sage_losses = []
        self.reward_trace = []
        self._latency = []
        self._sync_links(reset=True)

    # ----------------------------------------------------------- link bookkeeping
    def _sync_links(self, reset=False):
        """Re-index held actions and open transitions after the link set changed."""
        labels = list(self.env.links.labels)
        n = len(labels)
        old = {} if reset else {lab: k for k, lab in enumerate(self.labels)}
        dim = self.agent.state_dim if self.agent is not None else 0
        channel = np.zeros(n, dtype=int)
        power = np.zeros(n, dtype=int)
        decided = np.zeros(n, dtype=bool)
        pend_state = np.zeros((n, dim))
        pend_action = np.zeros(n, dtype=int)
        pend_sum = np.zeros(n)
        pend_count = np.zeros(n, dtype=int)
        pend_open = np.zeros(n, dtype=bool)
        for k, lab in enumerate(labels):
            j = old.get(lab)
            if j is None:
                continue
            channel[k], power[k], decided[k] = self.channel[j], self.power[j], self.decided[j]
            pend_state[k], pend_action[k] = self.pend_state[j], self.pend_action[j]
            pend_sum[k], pend_count[k], pend_open[k] = self.pend_sum[j], self.pend_count[j], self.pend_open[j]
        self.labels = labels
        self.channel, self.power, self.decided = channel, power, decided
        self.pend_state, self.pend_action = pend_state, pend_action
        self.pend_sum, self.pend_count, self.pend_open = pend_sum, pend_count, pend_open

    def reset(self, n_vehicles=None):
        self.env.reset(n_vehicles)
        self.rewards.clear()
        self._sync_links(reset=True)

    # ----------------------------------------------------------- decisions
    def deciders(self):
        n = len(self.labels)
        turn = np.arange(n) % self.cfg.run.n_batches == self.iteration % self.cfg.run.n_batches
        return np.flatnonzero(turn | ~self.decided)

    def neighbor_counts(self, links):
        m = self.cfg.env.n_subchannels
        out = np.zeros((len(links), m))
        graph = self.env.graph
        for row, j in enumerate(links):
            nb = graph.neighbors[j]
            nb = nb[self.decided[nb]]
            out[row] = np.bincount(self.channel[nb], minlength=m)
        return out

    def features(self):
        c = self.cfg.env
        return scale_features(self.env.observe(), c.noise_dbm, max(c.power_levels_dbm))

    def states(self, links, x):
        env = self.env
        emb = None
        if self.method == "gnn":
            emb = self.sage.transform(x, env.graph, links, self.rng["sample"])
        return assemble_state(
            emb, x[links], self.neighbor_counts(links), env.payload_fraction()[links],
            env.remaining_time, self.cfg.env.deadline_s, self.cfg.graph.fanout,
        )

    def _close_transitions(self, links, next_states):
        scale = self.cfg.agent.reward_scale
        for row, j in enumerate(links):
            if not self.pend_open[j] or self.pend_count[j] == 0:
                continue
            reward = scale * self.pend_sum[j]
            if self.buffer is not None:
                self.buffer.add(self.pend_state[j], self.pend_action[j], reward, next_states[row],
                                self.pend_count[j])
            sub, _ = decompose_action(self.pend_action[j], self.cfg.env.n_subchannels)
            self.rewards.update(self.labels[j], int(sub), reward, self.iteration)

    def decide(self, epsilon=0.0):
        links = self.deciders()
        if len(links) == 0:
            return links
        m = self.cfg.env.n_subchannels
        t0 = time.perf_counter() if self.timing else 0.0
        if self.method == "random":
            actions = self.rng["policy"].integers(self.cfg.env.n_actions, size=len(links))
        else:
            states = self.states(links, self.features())
            if self.learn:
                self._close_transitions(links, states)
            if epsilon > 0.0:
                actions = self.agent.act(states, epsilon, self.rng["policy"])
            else:
                actions = self.agent.predict(states)
            self.pend_state[links] = states
            self.pend_action[links] = actions
            self.pend_sum[links] = 0.0
            self.pend_count[links] = 0
            self.pend_open[links] = True
        if self.timing:
            self._latency.append((time.perf_counter() - t0) * 1e6 / len(links))
        sub, pw = decompose_action(actions, m)
        self.channel[links] = sub
        self.power[links] = pw
        self.decided[links] = True
        return links

    # ----------------------------------------------------------- stepping
    def iterate(self, epsilon=0.0):
        """Run one iteration; returns the period samples completed during it."""
        env = self.env
        done = []
        if len(self.labels) == 0:
            for _ in range(self.cfg.env.slots_per_iteration):
                env.elapsed_slots += 1
        else:
            deciding = self.decide(epsilon)
            if self.log_actions:
                active = env.active
                u_now = env.remaining_time
                logged = [j for j in deciding if active[j]]
            slot_rewards = np.zeros(len(self.labels))
            for _ in range(self.cfg.env.slots_per_iteration):
                res = env.step_small_scale(self.channel, self.power)
                slot_rewards += res.rewards
            per_slot = slot_rewards / self.cfg.env.slots_per_iteration
            self.pend_sum += self.cfg.agent.discount ** self.pend_count * slot_rewards
            self.pend_count += 1
            self.reward_trace.append(float(per_slot.mean()))
            if self.log_actions:
                for j in logged:
                    self.action_log.append(ActionRecord(
                        self.iteration, f"{self.labels[j][0]}->{self.labels[j][1]}", u_now,
                        int(self.channel[j]), int(self.power[j]), float(per_slot[j]),
                    ))
        if env.period_done:
            n_veh = len(env.vehicles)
            outcome = env.end_period()
            latency = float(np.mean(self._latency)) if self._latency else float("nan")
            self._latency = []
            done.append(Sample(self.iteration, n_veh, outcome.v2i_sum_rate_bps, outcome.success_rate, latency))
            self.samples.extend(done)
            self._sync_links()
        if self.learn:
            self._learn()
        self.iteration += 1
        return done

    def _learn(self):
        agent = self.agent
        agent.partial_fit(self.buffer, self.rng["learn"])
        if not np.isfinite(getattr(agent, "last_loss_", 0.0)):
            raise NumericalError(f"non-finite DDQN loss at iteration {self.iteration}")
        s = self.cfg.sage
        if self.method == "gnn" and (self.iteration + 1) % s.update_every == 0:
            self._train_sage()

    def _train_sage(self):
        s = self.cfg.sage
        rng = self.rng["learn"]
        labels = self.labels
        R, mask = self.rewards.fresh(labels, self.iteration, s.stale_after)
        candidates = np.flatnonzero(mask.any(axis=1))
        if len(candidates) == 0:
            return
        X = self.features()
        losses = []
        for _ in range(s.updates_per_round):
            pick = rng.choice(candidates, size=s.batch_size, replace=len(candidates) < s.batch_size)
            self.sage.partial_fit(X, R[pick], graph=self.env.graph, nodes=pick, mask=mask[pick], rng=rng)
            losses.append(self.sage.last_loss_)
        loss = float(np.mean(losses))
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite GraphSAGE loss at iteration {self.iteration}")
        self.sage_losses.append((self.iteration, loss))


# --------------------------------------------------------------------- drivers
@dataclass
class TrainResult:
    agent: DDQNAgent
    sage: GraphSAGE = None
    samples: list = field(default_factory=list)
    sage_losses: list = field(default_factory=list)
    rewards: list = field(default_factory=list)


class TrainingHalted(NumericalError):
    """Non-finite loss or gradient; carries the last good checkpoint arrays."""

    def __init__(self, message, iteration, last_good):
        super().__init__(message)
        self.iteration = iteration
        self.last_good = last_good


def checkpoint_arrays(agent, sage=None):
    """Copies of every network's parameters, keyed by checkpoint name."""
    nets = {
        "q.online": {k: v.copy() for k, v in agent.q_.params().items()},
        "q.target": {k: v.copy() for k, v in agent.target_.params().items()},
    }
    if sage is not None:
        nets["sage.live"] = {k: v.copy() for k, v in sage.param_arrays("live").items()}
        nets["sage.lagged"] = {k: v.copy() for k, v in sage.param_arrays("lagged").items()}
    return nets


def restore(cfg, nets):
    """Rebuild ``(method, agent, sage)`` from checkpoint arrays; shapes must match ``cfg``."""
    if "q.online" not in nets or "q.target" not in nets:
        raise ConfigError("checkpoint lacks q.online/q.target")
    use_gnn = "sage.live" in nets
    agent = build_agent(cfg, use_gnn=use_gnn)
    for name, net in (("q.online", agent.q_), ("q.target", agent.target_)):
        expected = {k: v.shape for k, v in net.params().items()}
        got = {k: v.shape for k, v in nets[name].items()}
        if expected != got:
            raise ConfigError(f"{name} shapes {got} do not match the configured network {expected}")
        net.load_params(nets[name])
    sage = None
    if use_gnn:
        sage = build_sage(cfg)
        expected = {k: v.shape for k, v in sage.param_arrays("live").items()}
        got = {k: v.shape for k, v in nets["sage.live"].items()}
        if expected != got:
            raise ConfigError(f"sage.live shapes {got} do not match the configured network {expected}")
        sage.load_arrays(nets["sage.live"], nets.get("sage.lagged"))
    return ("gnn" if use_gnn else "dqn"), agent, sage


def train(cfg, method="gnn", seed=0, iterations=None, n_vehicles=None, progress=None):
    """Train one method (``gnn`` or ``dqn``) from scratch; returns the learned networks and traces.

    A snapshot is taken at every environment reset; a numerical failure
    raises ``TrainingHalted`` carrying that snapshot.
    """
    if method not in ("gnn", "dqn"):
        raise ConfigError("only 'gnn' and 'dqn' are trainable")
    iterations = cfg.run.iterations if iterations is None else iterations
    use_gnn = method == "gnn"
    agent = build_agent(cfg, use_gnn=use_gnn, double_q=cfg.agent.double_q if use_gnn else False,
                        seed=stream_seed(seed, 1))
    sage = build_sage(cfg, seed=stream_seed(seed, 2)) if use_gnn else None
    rngs = make_rngs(stream_seed(seed, 3), "policy", "sample", "learn")
    env = V2XEnv(cfg.env, np.random.default_rng(stream_seed(seed, 4)))
    env.reset(n_vehicles)
    sim = Simulation(cfg, env, method, agent, sage, rngs, learn=True)
    last_good = checkpoint_arrays(agent, sage)
    for it in range(iterations):
        if it and it % cfg.run.reset_every == 0:
            sim.reset(n_vehicles)
            last_good = checkpoint_arrays(agent, sage)
        eps = epsilon_at(it, iterations, cfg)
        try:
            sim.iterate(eps)
        except NumericalError as exc:
            raise TrainingHalted(str(exc), it, last_good) from exc
        if progress and (it + 1) % progress == 0:
            recent = sim.samples[-20:]
            log.info("%s it=%d eps=%.3f success=%.3f", method, it + 1, eps,
                     np.mean([s.v2v_success_rate for s in recent]) if recent else float("nan"))
    return TrainResult(agent, sage, sim.samples, sim.sage_losses, sim.reward_trace)


def evaluate(cfg, method, agent=None, sage=None, seed=0, n_vehicles=None, resets=None, samples=None,
             log_actions=False, timing=False, dynamic=False):
    """Greedy (or random) policy over ``resets`` environments of ``samples`` periods each.

    The environment stream depends only on ``seed`` and ``n_vehicles``, so
    every method sees the same placements, mobility and fading.
    """
    resets = cfg.run.test_resets if resets is None else resets
    samples = cfg.run.test_samples if samples is None else samples
    env_cfg = cfg.env if dynamic == cfg.env.dynamic else cfg.replace("env", dynamic=dynamic).env
    n = env_cfg.n_vehicles if n_vehicles is None else n_vehicles
    env = V2XEnv(env_cfg, np.random.default_rng(stream_seed(seed, 100, n)))
    env.reset(n)
    rngs = make_rngs(stream_seed(seed, 101, n), "policy", "sample", "learn")
    sim = Simulation(cfg, env, method, agent, sage, rngs, learn=False, log_actions=log_actions, timing=timing)
    per_reset = []
    for r in range(resets):
        if r:
            sim.reset(n)
        start = len(sim.samples)
        while len(sim.samples) - start < samples:
            sim.iterate(0.0)
        per_reset.append(sim.samples[start:start + samples])
    return per_reset, sim


def summarize(per_reset):
    """Mean over resets of per-reset means, with the standard error across resets."""
    def stat(attr):
        means = np.array([np.mean([getattr(s, attr) for s in chunk]) for chunk in per_reset])
        se = float(np.std(means, ddof=1) / np.sqrt(len(means))) if len(means) > 1 else 0.0
        return float(np.mean(means)), se
    v2i, v2i_se = stat("v2i_sum_rate_bps")
    v2v, v2v_se = stat("v2v_success_rate")
    return {"v2i_sum_rate_bps": v2i, "v2i_se": v2i_se, "v2v_success_rate": v2v, "v2v_se": v2v_se}


def test_static(cfg, policies, seed=0, vehicle_counts=None, resets=None, samples=None, log_actions=False,
                timing=False):
    """Sweep vehicle counts for every ``{name: (method, agent, sage)}`` policy."""
    counts = cfg.run.vehicle_counts if vehicle_counts is None else vehicle_counts
    results = {}
    for name, (method, agent, sage) in policies.items():
        for n in counts:
            per_reset, sim = evaluate(cfg, method, agent, sage, seed, n, resets, samples, log_actions, timing)
            results[(name, n)] = {"per_reset": per_reset, "summary": summarize(per_reset),
                                  "actions": sim.action_log}
    return results


def test_dynamic(cfg, method, agent=None, sage=None, seed=0, steps=None, n_vehicles=None, timing=False):
    """Dynamic-arrival run; one sample per payload period."""
    steps = cfg.run.dynamic_steps if steps is None else steps
    per_reset, sim = evaluate(cfg, method, agent, sage, seed, n_vehicles, resets=1, samples=steps,
                              dynamic=True, timing=timing)
    return per_reset[0], sim


def segment_summary(samples, n_segments=5):
    """Five-number box-plot data per equal-length segment for each observable."""
    rows = []
    size = len(samples) // n_segments
    for k in range(n_segments):
        chunk = samples[k * size:(k + 1) * size]
        for attr in ("vehicle_count", "v2i_sum_rate_bps", "v2v_success_rate"):
            vals = np.array([getattr(s, attr) for s in chunk], dtype=float)
            q = np.percentile(vals, [0, 25, 50, 75, 100]) if len(vals) else [np.nan] * 5
            rows.append({"segment": k, "observable": attr, "n": len(vals), "min": q[0], "q1": q[1],
                         "median": q[2], "q3": q[3], "max": q[4], "mean": float(np.mean(vals)) if len(vals) else np.nan})
    return rows


def strategy_histogram(records, deadline=0.1, bin_s=0.01, n_power_levels=3):
    """Share of each power level per remaining-time bin ``(lo, hi]``."""
    if not records:
        return []
    n_bins = int(round(deadline / bin_s))
    bin_ms = int(round(bin_s * 1000))
    counts = np.zeros((n_bins, n_power_levels))
    for rec in records:
        u_ms = int(round(rec.remaining_time_s * 1000))
        k = min(max((u_ms + bin_ms - 1) // bin_ms - 1, 0), n_bins - 1)
        counts[k, rec.power_level] += 1
    rows = []
    for k in range(n_bins):
        total = counts[k].sum()
        if total == 0:
            continue
        row = {"bin_lo_s": k * bin_s, "bin_hi_s": (k + 1) * bin_s, "decisions": int(total)}
        for p in range(n_power_levels):
            row[f"share_p{p}"] = counts[k, p] / total
        rows.append(row)
    return rows


def power_share(records, level, predicate):
    picked = [r for r in records if predicate(r.remaining_time_s)]
    if not picked:
        return float("nan")
    return sum(r.power_level == level for r in picked) / len(picked)


def decision_latency(cfg, vehicle_counts, mode="implicit", repeats=200, seed=0):
    """Median wall-clock microseconds for one link's decision.

    A decision is the two-hop embedding of the link, state assembly and one
    greedy Q pass. ``mode="implicit"`` samples the fixed fan-out on the
    implicit graph; ``mode="complete"`` embeds over the full neighbour lists of
    the complete graph (the cost reference). Observation and graph construction
    happen outside the timed region.
    """
    if mode not in ("implicit", "complete"):
        raise ConfigError(f"latency mode must be 'implicit' or 'complete', got {mode!r}")
    sage, agent = build_sage(cfg, seed), build_agent(cfg, True, True, seed)
    e = cfg.env
    out = {}
    for s in vehicle_counts:
        env = V2XEnv(cfg.replace("env", n_vehicles=int(s)).env,
                     np.random.default_rng(stream_seed(seed, 200, int(s)))).reset()
        X = scale_features(env.observe(), e.noise_dbm, max(e.power_levels_dbm))
        graph = build_graph(env.vehicles, e.n_destinations, complete=True) if mode == "complete" else env.graph
        rng = np.random.default_rng(stream_seed(seed, 201, int(s)))
        counts = np.zeros(e.n_subchannels)
        times = np.empty(repeats)
        for k in range(repeats):
            v = int(rng.integers(len(graph)))
            t0 = time.perf_counter()
            if mode == "complete":
                h = sage.embed_full(X, graph, v)
            else:
                h = sage.embed(X, sample_neighborhood(graph, [v], rng, fanout=cfg.graph.fanout))[0]
            state = assemble_state(h, X[v], counts, 1.0, e.deadline_s, e.deadline_s, cfg.graph.fanout)
            agent.predict(state[None])
            times[k] = time.perf_counter() - t0
        out[int(s)] = float(np.median(times) * 1e6)
    return out
