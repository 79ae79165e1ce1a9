"""Independent reference implementations written as plain loops.

Nothing here imports the vectorised code paths under test; each function
re-derives its quantity from the model definitions one term at a time.
"""
import math

import numpy as np

from v2xalloc.env import Allocation, ChannelSnapshot, LinkSet


def random_instance(rng, s=6, m=4, n_links=5):
    """Random gains, links and allocation; gains span several decades."""
    snap = ChannelSnapshot(
        v2v=10 ** rng.uniform(-13, -7, size=(s, s, m)),
        veh_bs=10 ** rng.uniform(-14, -9, size=(s, m)),
        cue_bs=10 ** rng.uniform(-13, -9, size=m),
        cue_veh=10 ** rng.uniform(-15, -9, size=(m, s)),
        cue_power_mw=10 ** 2.3,
        noise_mw=10 ** -11.4,
    )
    tx = rng.integers(s, size=n_links)
    rx = np.array([(t + 1 + rng.integers(s - 1)) % s for t in tx])
    links = LinkSet([(int(a), int(b)) for a, b in zip(tx, rx)], tx, rx)
    alloc = Allocation(
        channel=rng.integers(m, size=n_links),
        power_mw=10 ** (rng.choice([23.0, 10.0, 5.0], size=n_links) / 10),
        active=rng.random(n_links) < 0.8,
    )
    return snap, links, alloc


def cue_sinr_loop(snap, links, alloc):
    m = len(snap.cue_bs)
    out = []
    for i in range(m):
        interference = 0.0
        for j in range(len(links)):
            rho = 1.0 if alloc.channel[j] == i else 0.0
            if alloc.active[j]:
                interference += rho * alloc.power_mw[j] * snap.veh_bs[links.tx[j], i]
        out.append(snap.cue_power_mw * snap.cue_bs[i] / (snap.noise_mw + interference))
    return np.array(out)


def vue_sinr_loop(snap, links, alloc):
    m = len(snap.cue_bs)
    out = []
    for j in range(len(links)):
        c = alloc.channel[j]
        signal = alloc.power_mw[j] * snap.v2v[links.tx[j], links.rx[j], c]
        g_v2i = 0.0
        for i in range(m):
            rho = 1.0 if c == i else 0.0
            g_v2i += rho * snap.cue_power_mw * snap.cue_veh[i, links.rx[j]]
        g_v2v = 0.0
        for k in range(len(links)):
            if k != j and alloc.channel[k] == c and alloc.active[k]:
                g_v2v += alloc.power_mw[k] * snap.v2v[links.tx[k], links.rx[j], c]
        out.append(signal / (snap.noise_mw + g_v2i + g_v2v))
    return np.array(out)


def capacity_loop(sinr, bandwidth):
    return np.array([bandwidth * math.log(1.0 + g, 2) for g in np.atleast_1d(sinr)])


def literal_reward_loop(cue_sinr, v2v_sinr, active, remaining, failed, lc, lp, t0, pf):
    total = 0.0
    for g in cue_sinr:
        total += lc * math.log2(1.0 + g)
    for g, a in zip(v2v_sinr, active):
        if a:
            total += (1.0 - lc) * math.log2(1.0 + g)
    total -= lp * (t0 - remaining)
    return np.array([total - (pf if f else 0.0) for f in failed])


def shaped_reward_loop(cue_sinr, v2v_sinr, time_used, failed, lc, lp, t0, pf):
    cue = sum(math.log2(1.0 + g) for g in cue_sinr) / len(cue_sinr)
    v2v = sum(math.log2(1.0 + g) for g in v2v_sinr) / len(v2v_sinr)
    shared = lc * cue + (1.0 - lc) * v2v
    return np.array([shared - lp * t / t0 - (pf if f else 0.0) for t, f in zip(time_used, failed)])


def difference_reward_loop(snap, links, alloc, lc, lp, time_used, t0, failed, pf):
    """Weighted objective with every link minus the objective with that link silenced."""
    import math

    def objective(active):
        from v2xalloc.env import Allocation
        al = Allocation(alloc.channel, alloc.power_mw, active)
        total = sum(lc * math.log2(1.0 + g) for g in cue_sinr_loop(snap, links, al))
        for j, g in enumerate(vue_sinr_loop(snap, links, al)):
            if active[j]:
                total += (1.0 - lc) * math.log2(1.0 + g)
        return total

    base = objective(alloc.active)
    out = []
    for k in range(len(links)):
        silenced = np.array(alloc.active, dtype=bool).copy()
        silenced[k] = False
        out.append(base - objective(silenced) - lp * time_used[k] / t0 - pf * float(failed[k]))
    return np.array(out)


def edge_weight_loop(distance, m, x):
    dmax = 0.0
    for row in distance:
        for d in row:
            dmax = max(dmax, d)
    return 1.0 if dmax == 0 else 1.0 - distance[m][x] / dmax


def relu_loop(v):
    return [max(0.0, a) for a in v]


def dense_loop(W, b, x, relu=True):
    out = []
    for r in range(len(W)):
        acc = b[r]
        for c in range(len(x)):
            acc += W[r][c] * x[c]
        out.append(acc)
    return relu_loop(out) if relu else out


def embed_recursive(layers, features, node, first, second):
    """Two-layer expansion written as nested calls.

    ``first`` lists the (neighbour, weight) pairs drawn for ``node``;
    ``second[k]`` lists the pairs drawn below the k-th of those.
    """
    def agg(layer, vectors_and_weights):
        n = len(vectors_and_weights)
        mean = [0.0] * len(vectors_and_weights[0][0])
        for vec, w in vectors_and_weights:
            for k, a in enumerate(vec):
                mean[k] += a * w / n
        return dense_loop(layer.W, layer.b, mean)

    def upd(layer, z, x):
        return dense_loop(layer.W, layer.b, [a + c for a, c in zip(z, x)])

    def h1(u, below):
        z = agg(layers["agg1"], [(list(features[q]), w) for q, w in below])
        return upd(layers["upd1"], z, list(features[u]))

    inner = [(h1(u, second[k]), w) for k, (u, w) in enumerate(first)]
    z = agg(layers["agg2"], inner)
    return np.array(upd(layers["upd2"], z, list(features[node])))


def double_q_loop(rewards, q_online_next, q_target_next, discount):
    out = []
    for r, qo, qt in zip(rewards, q_online_next, q_target_next):
        best = 0
        for a in range(len(qo)):
            if qo[a] > qo[best]:
                best = a
        out.append(r + discount * qt[best])
    return np.array(out)


def smoothed_loop(h_old, labels, kappa):
    return np.array([kappa * a + (1.0 - kappa) * b for a, b in zip(h_old, labels)])


def decompose_loop(action, m):
    sub, power = action, 0
    while sub >= m:
        sub -= m
        power += 1
    return sub, power


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def central_diff(f, params, h=1e-5, max_entries=None, rng=None):
    """Finite-difference gradient of scalar ``f()`` w.r.t. arrays in ``params`` (modified in place).

    With ``max_entries``, only a random subset of entries per array is probed;
    returns ``{name: (indices, estimates)}``.
    """
    out = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        est = []
        for k in idx:
            old = flat[k]
            flat[k] = old + h
            up = f()
            flat[k] = old - h
            down = f()
            flat[k] = old
            est.append((up - down) / (2 * h))
        out[name] = (idx, np.array(est))
    return out
