"""Per-link DDQN: state assembly, composite actions, replay buffer, double-Q learning."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .nn import MLP, LrSchedule, backward_mse, sgd_step

DB_SCALE = 60.0


def decompose_action(action, n_subchannels):
    """Composite action -> (subchannel, power level)."""
    action = np.asarray(action)
    return action % n_subchannels, action // n_subchannels


def compose_action(subchannel, power_level, n_subchannels):
    return np.asarray(power_level) * n_subchannels + np.asarray(subchannel)


def neighbor_channel_counts(neighbor_channels, n_subchannels):
    """How many neighbours picked each subchannel in the previous slot."""
    return np.bincount(np.asarray(neighbor_channels, dtype=int), minlength=n_subchannels).astype(float)


def scale_features(features_db, noise_dbm, max_power_dbm):
    """Node features referenced to the noise floor, in dB / 60.

    The two gain blocks become the SNR a full-power transmission would see
    (``G + P_max - noise``, ``H + P_max - noise``) and the interference block
    becomes interference over noise (``I - noise``).
    """
    features_db = np.asarray(features_db, dtype=float)
    m = features_db.shape[-1] // 3
    offset = np.concatenate([np.full(2 * m, max_power_dbm - noise_dbm), np.full(m, -noise_dbm)])
    return (features_db + offset) / DB_SCALE


def assemble_state(embedding, features, counts, remaining_fraction, remaining_time, deadline, fanout=5):
    """``h || x || N || L || U`` with counts /fanout and U /deadline.

    ``features`` are already scaled (see ``scale_features``). Accepts single
    links or batches (leading axis); ``embedding`` may be None for agents
    without a graph embedding.
    """
    features = np.asarray(features, dtype=float)
    single = features.ndim == 1
    x = np.atleast_2d(features)
    n = np.atleast_2d(np.asarray(counts, dtype=float)) / fanout
    b = x.shape[0]
    L = np.broadcast_to(np.asarray(remaining_fraction, dtype=float), (b,)).reshape(b, 1)
    U = np.broadcast_to(np.asarray(remaining_time, dtype=float) / deadline, (b,)).reshape(b, 1)
    if np.any((L < 0) | (L > 1)):
        raise ValueError("remaining payload fraction outside [0, 1]")
    if np.any((U < 0) | (U > 1 + 1e-12)):
        raise ValueError("remaining time outside [0, deadline]")
    parts = [x, n, L, U]
    if embedding is not None:
        parts.insert(0, np.atleast_2d(np.asarray(embedding, dtype=float)))
    if len({p.shape[0] for p in parts}) != 1:
        raise ValueError("state components disagree on batch size")
    state = np.concatenate(parts, axis=1)
    return state[0] if single else state


class ReplayBuffer:
    """Fixed-capacity ring buffer of (s, a, r, s') tuples.

    Each tuple also records how many decision steps it spans; the bootstrap
    term is discounted by ``discount ** steps``.
    """

    def __init__(self, capacity, state_dim):
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, state_dim))
        self.next_states = np.zeros((self.capacity, state_dim))
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity)
        self.steps = np.ones(self.capacity)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, state, action, reward, next_state, steps=1):
        if not np.isfinite(reward):
            raise ValueError("non-finite reward")
        if steps < 1:
            raise ValueError("a transition spans at least one step")
        k = self._next
        self.states[k] = state
        self.actions[k] = action
        self.rewards[k] = reward
        self.next_states[k] = next_state
        self.steps[k] = steps
        self._next = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(self.size, size=batch_size)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.steps[idx]


def double_q_target(rewards, q_online_next, q_target_next, discount):
    """``r + discount * Q_target(s', argmax_a Q_online(s', a))``; ``discount`` may be per sample."""
    best = np.argmax(q_online_next, axis=1)
    return rewards + discount * q_target_next[np.arange(len(best)), best]


def max_q_target(rewards, q_target_next, discount):
    return rewards + discount * q_target_next.max(axis=1)


class DDQNAgent(BaseEstimator):
    """Shared Q-network used by every link agent.

    ``predict`` is the greedy policy, ``act`` the epsilon-greedy one and
    ``partial_fit`` one minibatch update from a replay buffer. With
    ``double_q=False`` the bootstrap uses the plain max over the target network.
    """

    def __init__(
        self,
        state_dim=102,
        n_actions=60,
        hidden=(500, 250, 120),
        discount=0.95,
        lr=0.005,
        lr_floor=1e-4,
        lr_decay=0.99,
        lr_decay_every=100,
        batch_size=64,
        target_sync=500,
        double_q=True,
        random_state=None,
    ):
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.hidden = hidden
        self.discount = discount
        self.lr = lr
        self.lr_floor = lr_floor
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.batch_size = batch_size
        self.target_sync = target_sync
        self.double_q = double_q
        self.random_state = random_state

    def initialize(self):
        rng = np.random.default_rng(self.random_state)
        sizes = [self.state_dim, *self.hidden, self.n_actions]
        self.q_ = MLP.init(sizes, rng)
        self.target_ = self.q_.copy()
        self.schedule_ = LrSchedule(self.lr, self.lr_floor, self.lr_decay, self.lr_decay_every)
        self.n_updates_ = 0
        self.rng_ = rng
        return self

    def _ensure(self):
        if not hasattr(self, "q_"):
            self.initialize()

    def q_values(self, states):
        self._ensure()
        states = check_array(np.atleast_2d(states), dtype=np.float64)
        if states.shape[1] != self.state_dim:
            raise ValueError(f"state width {states.shape[1]}, expected {self.state_dim}")
        return self.q_(states)

    def predict(self, states):
        """Greedy composite actions; ties go to the lowest index."""
        return np.argmax(self.q_values(states), axis=1)

    def act(self, states, epsilon, rng):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        states = np.atleast_2d(states)
        explore = rng.random(len(states)) < epsilon
        random_actions = rng.integers(self.n_actions, size=len(states))
        if np.all(explore):
            return random_actions
        greedy = self.predict(states)
        return np.where(explore, random_actions, greedy)

    def compute_target(self, rewards, next_states, steps=None):
        """Bootstrap targets; a transition spanning ``steps`` decisions is discounted by ``discount ** steps``."""
        self._ensure()
        discount = self.discount if steps is None else self.discount ** np.asarray(steps, dtype=float)
        q_next_target = self.target_(next_states)
        if self.double_q:
            return double_q_target(rewards, self.q_(next_states), q_next_target, discount)
        return max_q_target(rewards, q_next_target, discount)

    def td_gradients(self, states, actions, targets):
        """Loss ``sum_b (y_b - Q(s_b, a_b))^2`` and gradients; only taken actions contribute."""
        self._ensure()
        q, caches = self.q_.forward(states)
        mask = np.zeros_like(q)
        mask[np.arange(len(actions)), actions] = 1.0
        full_target = np.where(mask > 0, targets[:, None], q)
        loss = float(np.sum((mask * (full_target - q)) ** 2))
        return loss, backward_mse(self.q_, caches, q, full_target, mask)

    def sync_target(self):
        self.target_ = self.q_.copy()

    def partial_fit(self, buffer, rng=None):
        """One SGD step on the summed TD loss of a minibatch from ``buffer``.

        Skipped while the buffer holds fewer than ``batch_size`` samples.
        """
        self._ensure()
        if len(buffer) < self.batch_size:
            return self
        rng = rng if rng is not None else self.rng_
        s, a, r, s2, steps = buffer.sample(self.batch_size, rng)
        y = self.compute_target(r, s2, steps)
        loss, grads = self.td_gradients(s, a, y)
        sgd_step(self.q_.params(), grads, self.schedule_(self.n_updates_))
        self.n_updates_ += 1
        if self.n_updates_ % self.target_sync == 0:
            self.sync_target()
        self.last_loss_ = loss / self.batch_size
        return self
