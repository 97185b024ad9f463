"""Small dense networks in numpy: forward/backward, weighted MSE training, checkpoints.

Used by the SSL student, the belief ensemble members and the Q-network.
Layer order inside a hidden block is Linear -> BatchNorm -> activation -> Dropout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

BN_EPS = 1e-5
BN_DECAY = 0.99


class TrainingDivergedError(FloatingPointError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: str = "relu"
    batch_norm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def mlp_specs(widths, hidden_activation="relu", batch_norm=False, dropout=0.0):
    """Specs for a plain MLP with the given widths; the last layer is linear."""
    widths = list(widths)
    specs = []
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        specs.append(LayerSpec(
            widths[i], widths[i + 1],
            activation="identity" if last else hidden_activation,
            batch_norm=False if last else batch_norm,
            dropout_rate=0.0 if last else dropout,
        ))
    return specs


@dataclass
class Network:
    specs: list
    params: list                      # per layer: {"W", "b"} (+ "gamma", "beta" with batch norm)
    running: list                     # per layer: {"mean", "var"} or None
    seed: int = 0

    @property
    def input_width(self) -> int:
        return self.specs[0].input_width

    @property
    def output_width(self) -> int:
        return self.specs[-1].output_width

    @property
    def n_params(self) -> int:
        return sum(p.size for layer in self.params for p in layer.values())

    def copy(self) -> "Network":
        return Network(
            specs=list(self.specs),
            params=[{k: v.copy() for k, v in layer.items()} for layer in self.params],
            running=[None if r is None else {k: v.copy() for k, v in r.items()} for r in self.running],
            seed=self.seed,
        )

    def predict(self, X) -> np.ndarray:
        out = forward(self, X, mode="infer")
        return out[:, 0] if out.shape[1] == 1 else out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for layer in self.params for p in layer.values())


def init_network(specs, seed: int) -> Network:
    specs = list(specs)
    if not specs:
        raise ValueError("network needs at least one layer")
    for prev, nxt in zip(specs, specs[1:]):
        if prev.output_width != nxt.input_width:
            raise ValueError(
                f"layer widths do not chain: {prev.output_width} -> {nxt.input_width}")
    rng = np.random.default_rng(seed)
    params, running = [], []
    for s in specs:
        limit = np.sqrt(6.0 / (s.input_width + s.output_width))
        layer = {
            "W": rng.uniform(-limit, limit, size=(s.input_width, s.output_width)),
            "b": np.zeros(s.output_width),
        }
        if s.batch_norm:
            layer["gamma"] = np.ones(s.output_width)
            layer["beta"] = np.zeros(s.output_width)
            running.append({"mean": np.zeros(s.output_width), "var": np.ones(s.output_width)})
        else:
            running.append(None)
        params.append(layer)
    return Network(specs=specs, params=params, running=running, seed=seed)


def _as_batch(net: Network, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.input_width:
        raise ValueError(f"expected batch with {net.input_width} columns, got shape {X.shape}")
    return X


def _forward(net: Network, X: np.ndarray, train: bool, rng=None, update_stats=True):
    """Run the network, returning the output and a cache for backprop."""
    caches = []
    a = X
    for spec, p, run in zip(net.specs, net.params, net.running):
        c = {"a_in": a}
        z = a @ p["W"] + p["b"]
        if spec.batch_norm:
            if train:
                mean, var = z.mean(axis=0), z.var(axis=0)
                if update_stats:
                    run["mean"] = BN_DECAY * run["mean"] + (1 - BN_DECAY) * mean
                    run["var"] = BN_DECAY * run["var"] + (1 - BN_DECAY) * var
            else:
                mean, var = run["mean"], run["var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mean) * inv_std
            c.update(zhat=zhat, inv_std=inv_std, bn_train=train)
            z = p["gamma"] * zhat + p["beta"]
        if spec.activation == "relu":
            c["relu_mask"] = z > 0
            z = np.where(c["relu_mask"], z, 0.0)
        if train and spec.dropout_rate > 0:
            keep = 1.0 - spec.dropout_rate
            mask = (rng.random(z.shape) < keep) / keep
            c["drop_mask"] = mask
            z = z * mask
        caches.append(c)
        a = z
    return a, caches


def _backward(net: Network, caches, dout: np.ndarray):
    grads = [None] * len(net.specs)
    d = dout
    for i in reversed(range(len(net.specs))):
        spec, p, c = net.specs[i], net.params[i], caches[i]
        g = {}
        if "drop_mask" in c:
            d = d * c["drop_mask"]
        if spec.activation == "relu":
            d = d * c["relu_mask"]
        if spec.batch_norm:
            zhat, inv_std = c["zhat"], c["inv_std"]
            g["gamma"] = np.sum(d * zhat, axis=0)
            g["beta"] = np.sum(d, axis=0)
            dzhat = d * p["gamma"]
            if c["bn_train"]:
                n = d.shape[0]
                d = (inv_std / n) * (n * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0))
            else:
                d = dzhat * inv_std
        g["W"] = c["a_in"].T @ d
        g["b"] = d.sum(axis=0)
        d = d @ p["W"].T
        grads[i] = g
    return grads


def forward(net: Network, batch, mode: str = "infer", rng=None) -> np.ndarray:
    """Network outputs, shape (n, output_width).

    ``infer`` is deterministic; ``train`` uses batch statistics, updates the
    running statistics and applies dropout drawn from ``rng``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    X = _as_batch(net, batch)
    if mode == "train" and rng is None:
        rng = np.random.default_rng(net.seed)
    out, _ = _forward(net, X, train=mode == "train", rng=rng)
    return out


def weighted_loss(y, yhat, w=None) -> float:
    """Mean of w_i * (y_i - yhat_i)^2 over the batch."""
    y = np.asarray(y, dtype=float)
    r = y - np.asarray(yhat, dtype=float)
    if w is None:
        return float(np.mean(r * r))
    return float(np.mean(np.asarray(w, dtype=float) * r * r))


class SGD:
    def __init__(self, lr=1e-3, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self._v = None

    def step(self, params, grads):
        if self._v is None:
            self._v = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in params]
        for layer, g, v in zip(params, grads, self._v):
            for k in layer:
                v[k] *= self.momentum
                v[k] -= self.lr * g[k]
                layer[k] += v[k]


class Adam:
    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self._m = self._v = None
        self._t = 0

    def step(self, params, grads):
        if self._m is None:
            self._m = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in params]
            self._v = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in params]
        self._t += 1
        c1 = 1 - self.b1 ** self._t
        c2 = 1 - self.b2 ** self._t
        for layer, g, m, v in zip(params, grads, self._m, self._v):
            for k in layer:
                m[k] = self.b1 * m[k] + (1 - self.b1) * g[k]
                v[k] = self.b2 * v[k] + (1 - self.b2) * g[k] ** 2
                layer[k] -= self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)


def make_optimizer(name: str, lr: float, momentum: float = 0.9):
    if name == "sgd":
        return SGD(lr=lr, momentum=momentum)
    if name == "adam":
        return Adam(lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9


@dataclass
class WeightedDataset:
    inputs: np.ndarray
    targets: np.ndarray
    sample_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        if self.sample_weights is None:
            self.sample_weights = np.ones(len(self.targets))
        self.sample_weights = np.asarray(self.sample_weights, dtype=float).ravel()
        if not (len(self.inputs) == len(self.targets) == len(self.sample_weights)):
            raise ValueError("inputs, targets and weights must have equal row counts")
        if np.any(self.sample_weights <= 0):
            raise ValueError("sample weights must be positive")

    def __len__(self):
        return len(self.targets)


def dataset_loss(net: Network, data: WeightedDataset) -> float:
    return weighted_loss(data.targets, net.predict(data.inputs), data.sample_weights)


def train(net: Network, data: WeightedDataset, hyper: TrainConfig = TrainConfig()) -> Network:
    """Minibatch training on the weighted squared loss. Returns a new network."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    if net.output_width != 1:
        raise ValueError("train() fits scalar-output networks")
    net = net.copy()
    rng = np.random.default_rng(hyper.seed)
    opt = make_optimizer(hyper.optimizer, hyper.learning_rate, hyper.momentum)
    X, y, w = data.inputs, data.targets, data.sample_weights
    n = len(y)
    bs = max(1, min(hyper.batch_size, n))
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if len(idx) < 2 and n >= 2 and any(s.batch_norm for s in net.specs):
                continue  # batch statistics undefined for a single row
            out, caches = _forward(net, X[idx], train=True, rng=rng)
            r = out[:, 0] - y[idx]
            loss = float(np.mean(w[idx] * r * r))
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            dout = (2.0 / len(idx)) * (w[idx] * r)[:, None]
            opt.step(net.params, _backward(net, caches, dout))
        if not net.is_finite():
            raise TrainingDivergedError(epoch, float("nan"))
    return net


def _flat_params(net: Network):
    return [(i, k) for i, layer in enumerate(net.params) for k in layer]


def gradient_check(net: Network, x, y, w=1.0, epsilon: float = 1e-5, mode: str = "infer",
                   floor: float = 1e-7) -> float:
    """Max relative error between backprop and central differences of the weighted loss.

    Runs in inference mode. Asking for ``mode="train"`` on a net with dropout is
    rejected because the random mask makes the loss non-differentiable in the
    parameters from call to call.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must be in (0, 1e-2]")
    if mode == "train" and any(s.dropout_rate > 0 for s in net.specs):
        raise ValueError("gradient check needs dropout disabled; use mode='infer'")
    X = _as_batch(net, x)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    w = np.broadcast_to(np.asarray(w, dtype=float), y.shape)
    train_mode = mode == "train"
    work = net.copy()

    def loss_of(n):
        out, _ = _forward(n, X, train=train_mode, update_stats=False)
        return float(np.mean(w * (y - out[:, 0]) ** 2))

    out, caches = _forward(work, X, train=train_mode, update_stats=False)
    dout = (2.0 / len(y)) * (w * (out[:, 0] - y))[:, None]
    grads = _backward(work, caches, dout)

    worst = 0.0
    for i, k in _flat_params(work):
        p = work.params[i][k]
        g = grads[i][k]
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            j = it.multi_index
            old = p[j]
            p[j] = old + epsilon
            lp = loss_of(work)
            p[j] = old - epsilon
            lm = loss_of(work)
            p[j] = old
            num = (lp - lm) / (2 * epsilon)
            denom = max(abs(num), abs(g[j]), floor)
            worst = max(worst, abs(num - g[j]) / denom)
    return worst


def network_to_dict(net: Network) -> dict:
    return {
        "format": "lakesense-network",
        "version": 1,
        "seed": net.seed,
        "layers": [
            {
                "input_width": s.input_width,
                "output_width": s.output_width,
                "activation": s.activation,
                "batch_norm": s.batch_norm,
                "dropout_rate": s.dropout_rate,
                "params": {k: v.ravel().tolist() for k, v in p.items()},
                "running": None if r is None else {k: v.tolist() for k, v in r.items()},
            }
            for s, p, r in zip(net.specs, net.params, net.running)
        ],
    }


def network_from_dict(d: dict) -> Network:
    if d.get("format") != "lakesense-network":
        raise ValueError("not a network checkpoint")
    specs, params, running = [], [], []
    for layer in d["layers"]:
        s = LayerSpec(layer["input_width"], layer["output_width"], layer["activation"],
                      layer["batch_norm"], layer["dropout_rate"])
        specs.append(s)
        p = {}
        for k, v in layer["params"].items():
            shape = (s.input_width, s.output_width) if k == "W" else (s.output_width,)
            p[k] = np.asarray(v, dtype=float).reshape(shape)
        params.append(p)
        r = layer["running"]
        running.append(None if r is None else {k: np.asarray(v, dtype=float) for k, v in r.items()})
    return Network(specs=specs, params=params, running=running, seed=d.get("seed", 0))


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net)))


def load_network(path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text()))
