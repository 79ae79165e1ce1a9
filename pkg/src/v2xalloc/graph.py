"""Implicit link graph.

Nodes are directed V2V links ``(tx_id, rx_id)``. Two links are neighbours when
they share an endpoint vehicle, so a node only needs information its own two
vehicles already hold. Edge weights decay linearly with the distance between
the two links' transmitters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphStructureError(ValueError):
    pass


@dataclass
class LinkGraph:
    nodes: list  # [(tx_id, rx_id), ...]
    neighbors: list  # per node: int array of neighbour node indices
    weights: list  # per node: edge weights aligned with ``neighbors``
    distance: np.ndarray  # (s, s) vehicle distance matrix
    vehicle_index: dict  # vehicle id -> row of ``distance``
    index: dict = field(default_factory=dict)  # label -> node index

    def __post_init__(self):
        if not self.index:
            self.index = {label: k for k, label in enumerate(self.nodes)}

    def __len__(self):
        return len(self.nodes)

    @property
    def max_distance(self):
        return float(self.distance.max()) if self.distance.size else 0.0

    def degree(self):
        return np.array([len(n) for n in self.neighbors], dtype=int)

    def tx_rows(self):
        return np.array([self.vehicle_index[t] for t, _ in self.nodes], dtype=int)

    def edge_weight(self, p, q):
        rows = self.tx_rows()
        return edge_weight(self.distance, rows[p], rows[q])

    def dump(self):
        """Line-oriented text: node lines, then ``edge`` lines with weights."""
        lines = [f"# nodes={len(self.nodes)} edges={int(self.degree().sum())}"]
        for k, (t, r) in enumerate(self.nodes):
            lines.append(f"node {k} {t}->{r}")
        for k, (nbrs, w) in enumerate(zip(self.neighbors, self.weights)):
            for u, wu in zip(nbrs, w):
                lines.append(f"edge {k} {int(u)} {wu:.6f}")
        return "\n".join(lines) + "\n"


def edge_weight(distance, m, x):
    """Proximity weight ``1 - d[m, x] / max(d)``; all ones when every vehicle is co-located."""
    dmax = float(np.max(distance)) if np.size(distance) else 0.0
    if dmax <= 0.0:
        return np.ones_like(np.asarray(distance[m, x], dtype=float))
    return 1.0 - np.asarray(distance[m, x], dtype=float) / dmax


def _positions(vehicles):
    return np.array([v.position for v in vehicles], dtype=float).reshape(len(vehicles), 2)


def build_graph(vehicles, n_destinations=3, complete=False):
    """Link graph over every (vehicle, destination) pair.

    With ``complete=True`` every other link is a neighbour; used only as the
    reference for cost comparisons.
    """
    for v in vehicles:
        if len(v.destinations) != n_destinations:
            raise GraphStructureError(
                f"vehicle {v.id} has {len(v.destinations)} destinations, expected {n_destinations}"
            )
        if v.id in v.destinations:
            raise GraphStructureError(f"vehicle {v.id} lists itself as a destination")
    vindex = {v.id: i for i, v in enumerate(vehicles)}
    pos = _positions(vehicles)
    distance = np.hypot(pos[:, None, 0] - pos[None, :, 0], pos[:, None, 1] - pos[None, :, 1])
    nodes = [(v.id, int(d)) for v in vehicles for d in v.destinations]
    n = len(nodes)
    tx_rows = np.array([vindex[t] for t, _ in nodes], dtype=int)

    if complete:
        everyone = np.arange(n)
        neighbors = [np.delete(everyone, k) for k in range(n)]
    else:
        touching = {}
        for k, (t, r) in enumerate(nodes):
            touching.setdefault(t, []).append(k)
            touching.setdefault(r, []).append(k)
        neighbors = []
        for k, (t, r) in enumerate(nodes):
            found = set(touching[t]) | set(touching[r])
            found.discard(k)
            neighbors.append(np.array(sorted(found), dtype=int))
    weights = [edge_weight(distance, tx_rows[k], tx_rows[nb]) if len(nb) else np.zeros(0) for k, nb in enumerate(neighbors)]
    return LinkGraph(nodes, neighbors, weights, distance, vindex)


def sample_neighbors(graph, node, fanout, rng, replace=None):
    """``fanout`` neighbour indices of ``node`` and their edge weights.

    Without replacement when the pool is large enough (or when ``replace`` is
    False), otherwise with replacement. An isolated node samples itself with
    weight 1; the third return value flags that case.
    """
    pool = graph.neighbors[node]
    if len(pool) == 0:
        return np.full(fanout, node, dtype=int), np.ones(fanout), True
    if replace is None:
        replace = len(pool) < fanout
    pick = rng.choice(len(pool), size=fanout, replace=replace)
    return pool[pick], graph.weights[node][pick], False


@dataclass
class Neighborhood:
    """Two-layer sample for a batch of target nodes."""

    nodes: np.ndarray  # (B,)
    layer1: np.ndarray  # (B, S1)
    weight1: np.ndarray  # (B, S1)
    layer2: np.ndarray  # (B, S1, S2)
    weight2: np.ndarray  # (B, S1, S2)
    isolated: bool = False


def sample_neighborhood(graph, nodes, rng, fanout=5, fanout2=None):
    """Sample ``fanout`` first-layer neighbours per node and ``fanout2`` for each of those."""
    fanout2 = fanout if fanout2 is None else fanout2
    nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
    b = len(nodes)
    l1 = np.empty((b, fanout), dtype=int)
    w1 = np.empty((b, fanout))
    l2 = np.empty((b, fanout, fanout2), dtype=int)
    w2 = np.empty((b, fanout, fanout2))
    flagged = False
    for i, v in enumerate(nodes):
        l1[i], w1[i], iso = sample_neighbors(graph, v, fanout, rng)
        flagged |= iso
        for j, u in enumerate(l1[i]):
            l2[i, j], w2[i, j], iso = sample_neighbors(graph, u, fanout2, rng)
            flagged |= iso
    return Neighborhood(nodes, l1, w1, l2, w2, flagged)


def full_neighborhood(graph, node):
    """Unsampled two-layer neighbourhood of one node: ``[(u, w_uv, nbrs(u), w(u))...]``."""
    return [
        (int(u), float(w), graph.neighbors[u], graph.weights[u])
        for u, w in zip(graph.neighbors[node], graph.weights[node])
    ]


def count_aggregation_ops(s, d_in=60, d_out=20, mode="implicit", implicit_neighbors=12):
    """Weight multiplications of one aggregation layer over all ``3s`` link nodes."""
    if s < 1:
        raise ValueError("s must be >= 1")
    if mode == "complete":
        n_nei = 3 * s - 1
    elif mode == "implicit":
        n_nei = implicit_neighbors
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return d_in * d_out * 3 * s * n_nei


class MultiplyCounter:
    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)


def message_passing_layer(graph, features, weight, counter=None, fanout=None, rng=None):
    """Single edge-weighted mean aggregation layer with per-neighbour projection.

    Each neighbour feature is projected by ``weight`` (d_out x d_in) before the
    weighted mean, which is the cost model used for the complete/implicit
    comparison: every projected message costs ``d_in * d_out`` multiplies.
    ``fanout=None`` uses the full neighbour list.
    """
    d_out, d_in = weight.shape
    n = len(graph)
    src, dst, w = [], [], []
    for v in range(n):
        if fanout is None:
            nb, wt = graph.neighbors[v], graph.weights[v]
        else:
            nb, wt, _ = sample_neighbors(graph, v, fanout, rng)
        src.append(nb)
        w.append(wt)
        dst.append(np.full(len(nb), v))
    src = np.concatenate(src) if src else np.zeros(0, dtype=int)
    dst = np.concatenate(dst) if dst else np.zeros(0, dtype=int)
    w = np.concatenate(w) if w else np.zeros(0)
    messages = features[src] @ weight.T
    if counter is not None:
        counter.add(len(src) * d_in * d_out)
    out = np.zeros((n, d_out))
    np.add.at(out, dst, messages * w[:, None])
    deg = np.bincount(dst, minlength=n).astype(float)
    return out / np.maximum(deg, 1.0)[:, None]
