"""Edge-weighted two-layer GraphSAGE with lagged-network label smoothing."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ConfigError
from .graph import Neighborhood, sample_neighborhood
from .nn import Dense, LrSchedule, backward_mse, sgd_step

LAYERS = ("agg1", "upd1", "agg2", "upd2")


def aggregate(layer, neighbor_features, weights):
    """``relu(W_a . mean_u(x_u * w_u) + b_a)`` over the second-to-last axis."""
    mean = np.mean(neighbor_features * weights[..., None], axis=-2)
    out, cache = layer.forward(mean)
    return out, (mean, cache)


def update(layer, z, x):
    """``relu(W_u . (z + x) + b_u)``."""
    return layer.forward(z + x)


def smoothed_targets(h_old, labels, kappa):
    if not 0.0 <= kappa <= 1.0:
        raise ConfigError(f"kappa must lie in [0, 1], got {kappa}")
    return kappa * np.asarray(h_old) + (1.0 - kappa) * np.asarray(labels)


def _layers_from(arrays, prefix=""):
    out = {}
    for name in LAYERS + ("head",):
        if f"{prefix}{name}.W" in arrays:
            act = "identity" if name == "head" else "relu"
            out[name] = Dense(arrays[f"{prefix}{name}.W"], arrays[f"{prefix}{name}.b"], act)
    return out


class GraphSAGE(BaseEstimator, TransformerMixin):
    """Inductive link embedder.

    ``transform`` maps node features to ``out_dim`` embeddings using sampled
    two-hop neighbourhoods; ``partial_fit`` takes one gradient step towards
    ``kappa * lagged_output + (1 - kappa) * reward_labels``.
    """

    def __init__(
        self,
        in_dim=60,
        hidden_dim=60,
        out_dim=20,
        label_dim=20,
        fanout=5,
        kappa=0.9,
        lr=0.01,
        lr_floor=1e-4,
        lr_decay=0.99,
        lr_decay_every=100,
        sync_every=200,
        random_state=None,
    ):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.label_dim = label_dim
        self.fanout = fanout
        self.kappa = kappa
        self.lr = lr
        self.lr_floor = lr_floor
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.sync_every = sync_every
        self.random_state = random_state

    # ------------------------------------------------------------ parameters
    def initialize(self):
        rng = np.random.default_rng(self.random_state)
        d, h = self.in_dim, self.hidden_dim
        self.layers_ = {
            "agg1": Dense.init(d, d, rng),
            "upd1": Dense.init(d, h, rng),
            "agg2": Dense.init(h, d, rng),
            "upd2": Dense.init(d, self.out_dim, rng),
        }
        if self.out_dim != self.label_dim:
            self.layers_["head"] = Dense.init(self.out_dim, self.label_dim, rng, "identity")
        self.lagged_ = {k: Dense(l.W.copy(), l.b.copy(), l.activation) for k, l in self.layers_.items()}
        self.n_updates_ = 0
        self.schedule_ = LrSchedule(self.lr, self.lr_floor, self.lr_decay, self.lr_decay_every)
        return self

    def _ensure(self):
        if not hasattr(self, "layers_"):
            self.initialize()

    def param_arrays(self, which="live"):
        layers = self.layers_ if which == "live" else self.lagged_
        out = {}
        for name, layer in layers.items():
            out[f"{name}.W"] = layer.W
            out[f"{name}.b"] = layer.b
        return out

    def load_arrays(self, live, lagged=None):
        self._ensure()
        self.layers_ = _layers_from(live)
        self.lagged_ = _layers_from(lagged if lagged is not None else live)
        return self

    def sync_lagged(self):
        self.lagged_ = {k: Dense(l.W.copy(), l.b.copy(), l.activation) for k, l in self.layers_.items()}

    # ------------------------------------------------------------ forward
    def _forward(self, features, hood, layers):
        X = features
        x_l2 = X[hood.layer2]
        z1, c_a1 = aggregate(layers["agg1"], x_l2, hood.weight2)
        h1, c_u1 = update(layers["upd1"], z1, X[hood.layer1])
        z2, c_a2 = aggregate(layers["agg2"], h1, hood.weight1)
        h, c_u2 = update(layers["upd2"], z2, X[hood.nodes])
        return h, (c_a1, c_u1, c_a2, c_u2, hood)

    def embed(self, features, hood, lagged=False):
        """Embeddings for ``hood.nodes`` given a pre-drawn two-layer sample."""
        self._ensure()
        return self._forward(features, hood, self.lagged_ if lagged else self.layers_)[0]

    def transform(self, X, graph=None, nodes=None, rng=None):
        """Embed ``nodes`` (default: all) of ``graph`` whose feature matrix is ``X``."""
        self._ensure()
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.in_dim:
            raise ValueError(f"features have width {X.shape[1]}, expected {self.in_dim}")
        if graph is None:
            raise ValueError("transform needs the link graph")
        nodes = np.arange(len(graph)) if nodes is None else np.asarray(nodes, dtype=int)
        if len(nodes) == 0:
            return np.zeros((0, self.out_dim))
        rng = rng if rng is not None else np.random.default_rng(self.random_state)
        hood = sample_neighborhood(graph, nodes, rng, self.fanout)
        return self.embed(X, hood)

    def predict_labels(self, features, hood, lagged=False):
        h = self.embed(features, hood, lagged)
        layers = self.lagged_ if lagged else self.layers_
        if "head" in layers:
            h = layers["head"].forward(h)[0]
        return h

    # ------------------------------------------------------------ training
    def gradients(self, features, hood, targets, mask=None):
        """Loss ``sum(mask * (y - h)^2)`` and its gradients w.r.t. live parameters."""
        self._ensure()
        L = self.layers_
        h, (c_a1, c_u1, c_a2, c_u2, hood) = self._forward(features, hood, L)
        grads = {}
        out = h
        if "head" in L:
            out, c_head = L["head"].forward(h)
        diff = out - targets
        if mask is not None:
            diff = diff * mask
        loss = float(np.sum(diff**2))
        g = 2.0 * diff
        if "head" in L:
            g, grads["head.W"], grads["head.b"] = L["head"].backward(c_head, g)
        g, grads["upd2.W"], grads["upd2.b"] = L["upd2"].backward(c_u2, g)
        mean2, cache2 = c_a2
        g, grads["agg2.W"], grads["agg2.b"] = L["agg2"].backward(cache2, g)
        s1 = hood.weight1.shape[1]
        g_h1 = g[:, None, :] * hood.weight1[..., None] / s1
        g, grads["upd1.W"], grads["upd1.b"] = L["upd1"].backward(c_u1, g_h1)
        mean1, cache1 = c_a1
        _, grads["agg1.W"], grads["agg1.b"] = L["agg1"].backward(cache1, g)
        return loss, grads

    def loss(self, features, hood, targets, mask=None):
        out = self.predict_labels(features, hood)
        diff = out - targets
        if mask is not None:
            diff = diff * mask
        return float(np.sum(diff**2))

    def partial_fit(self, X, labels, graph=None, nodes=None, mask=None, rng=None, hood=None):
        """One smoothed-label gradient step on a batch of nodes.

        The step follows the gradient of the summed loss; the lagged copy is
        refreshed every ``sync_every`` calls.
        """
        self._ensure()
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in [0, 1], got {self.kappa}")
        labels = check_array(labels, dtype=np.float64)
        if hood is None:
            rng = rng if rng is not None else np.random.default_rng(self.random_state)
            hood = sample_neighborhood(graph, nodes, rng, self.fanout)
        h_old = self.predict_labels(X, hood, lagged=True)
        targets = smoothed_targets(h_old, labels, self.kappa)
        loss, grads = self.gradients(X, hood, targets, mask)
        batch = max(len(hood.nodes), 1)
        sgd_step(self.param_arrays("live"), grads, self.schedule_(self.n_updates_))
        self.n_updates_ += 1
        if self.n_updates_ % self.sync_every == 0:
            self.sync_lagged()
        self.last_loss_ = loss / batch
        return self

    # ------------------------------------------------------------ reference mode
    def embed_full(self, features, graph, node):
        """Unsampled two-layer embedding over complete neighbour lists (cost reference)."""
        self._ensure()
        L = self.layers_
        nbrs = graph.neighbors[node]
        if len(nbrs) == 0:
            nbrs = np.array([node])
            w1 = np.ones(1)
        else:
            w1 = graph.weights[node]
        lists = [graph.neighbors[u] for u in nbrs]
        weights = [graph.weights[u] for u in nbrs]
        lengths = np.array([len(a) for a in lists])
        flat = np.concatenate(lists)
        wflat = np.concatenate(weights)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        sums = np.add.reduceat(features[flat] * wflat[:, None], starts, axis=0)
        a1 = sums / lengths[:, None]
        z1 = L["agg1"].forward(a1)[0]
        h1 = L["upd1"].forward(z1 + features[nbrs])[0]
        z2 = L["agg2"].forward(np.mean(h1 * w1[:, None], axis=0))[0]
        return L["upd2"].forward(z2 + features[node])[0]


class RewardMatrix:
    """Latest reward each link observed on each subchannel, with timestamps."""

    def __init__(self, n_subchannels):
        self.n_subchannels = n_subchannels
        self._values = {}
        self._stamps = {}

    def update(self, label, subchannel, reward, iteration):
        if label not in self._values:
            self._values[label] = np.zeros(self.n_subchannels)
            self._stamps[label] = np.full(self.n_subchannels, -(10**12), dtype=np.int64)
        self._values[label][subchannel] = reward
        self._stamps[label][subchannel] = iteration

    def row(self, label):
        return self._values.get(label, np.zeros(self.n_subchannels))

    def fresh(self, labels, now, stale_after):
        """Labels and freshness mask for ``labels``: entries older than ``stale_after`` are masked."""
        R = np.zeros((len(labels), self.n_subchannels))
        mask = np.zeros((len(labels), self.n_subchannels))
        for k, label in enumerate(labels):
            if label in self._values:
                R[k] = self._values[label]
                mask[k] = (now - self._stamps[label]) <= stale_after
        return R, mask

    def __len__(self):
        return len(self._values)

    def clear(self):
        self._values.clear()
        self._stamps.clear()
