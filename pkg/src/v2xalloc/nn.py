"""Dense layers with hand-written backpropagation, plain SGD and checkpoints."""
from __future__ import annotations

from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class NumericalError(FloatingPointError):
    pass


def relu(x):
    return np.maximum(x, 0.0)


class Dense:
    """Affine map ``x @ W.T + b`` followed by ReLU or identity.

    Works on inputs with any number of leading batch dimensions.
    """

    def __init__(self, W, b, activation="relu"):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")
        self.activation = activation

    @classmethod
    def init(cls, n_in, n_out, rng, activation="relu"):
        # Glorot-uniform weights, zero bias
        limit = np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), activation)

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input width {x.shape[-1]} does not match layer input {self.n_in}")
        pre = x @ self.W.T + self.b
        out = relu(pre) if self.activation == "relu" else pre
        return out, (x, pre)

    def backward(self, cache, grad_out):
        """Return ``(grad_x, grad_W, grad_b)``."""
        x, pre = cache
        g = grad_out * (pre > 0) if self.activation == "relu" else grad_out
        g2 = g.reshape(-1, self.n_out)
        x2 = x.reshape(-1, self.n_in)
        return g @ self.W, g2.T @ x2, g2.sum(axis=0)


class MLP:
    """Stack of Dense layers, ReLU between layers and identity on the output."""

    def __init__(self, layers):
        self.layers = list(layers)

    @classmethod
    def init(cls, sizes, rng, out_activation="identity"):
        layers = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            layers.append(Dense.init(a, b, rng, out_activation if last else "relu"))
        return cls(layers)

    @property
    def sizes(self):
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, caches, grad_out):
        grads = {}
        g = grad_out
        for k in range(len(self.layers) - 1, -1, -1):
            g, gW, gb = self.layers[k].backward(caches[k], g)
            grads[f"{k}.W"] = gW
            grads[f"{k}.b"] = gb
        return grads

    def params(self):
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{k}.W"] = layer.W
            out[f"{k}.b"] = layer.b
        return out

    def copy(self):
        return MLP([Dense(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def load_params(self, arrays):
        for k, layer in enumerate(self.layers):
            layer.W = np.array(arrays[f"{k}.W"], dtype=np.float64)
            layer.b = np.array(arrays[f"{k}.b"], dtype=np.float64)


def backward_mse(net, caches, output, target, mask=None):
    """Gradients of ``sum(mask * (target - output)**2)`` w.r.t. every parameter of ``net``."""
    diff = output - np.asarray(target, dtype=np.float64)
    if mask is not None:
        diff = diff * mask
    return net.backward(caches, 2.0 * diff)


class LrSchedule:
    """Step decay: multiply by ``decay`` every ``every`` updates, never below ``floor``."""

    def __init__(self, initial, floor=1e-4, decay=0.99, every=100):
        self.initial = initial
        self.floor = floor
        self.decay = decay
        self.every = every

    def __call__(self, step):
        return max(self.floor, self.initial * self.decay ** (step // self.every))


def sgd_step(params, grads, lr):
    """In-place ``p -= lr * g`` for every named parameter; refuses non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for {name} ({bad} entries)")
    for name, g in grads.items():
        params[name] -= lr * g
    return params


def save_checkpoint(path, networks):
    """Write ``{network_name: {param_name: array}}`` as one flat archive of named arrays."""
    flat = {"__version__": np.array(CHECKPOINT_VERSION)}
    for net_name, arrays in networks.items():
        for pname, arr in arrays.items():
            flat[f"{net_name}/{pname}"] = np.ascontiguousarray(arr, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **flat)
    return path


def load_checkpoint(path):
    with np.load(path) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for key in data.files:
            if key == "__version__":
                continue
            net_name, pname = key.split("/", 1)
            out.setdefault(net_name, {})[pname] = data[key]
    return out
