"""Station-selection policies: heuristics, UCB, a masked deep Q-network, and the exhaustive oracle."""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.stats import norm

from . import env, nn

DEFAULT_ORACLE_CAP = 10**6
TIE_RTOL = 1e-12   # oracle RMSEs closer than this are ties (resolved lexicographically)


class InfeasibleOracleError(RuntimeError):
    def __init__(self, n: int, k: int, count: int, cap: int):
        super().__init__(f"C({n},{k}) = {count:,} subsets exceeds the enumeration cap {cap:,}")
        self.n, self.k, self.count, self.cap = n, k, count, cap


def _require_unvisited(state: env.BeliefState):
    if state.visited.all():
        raise env.InvalidActionError("every station has been visited")


def masked_argmax(scores, visited) -> int:
    """Index of the best unvisited score; ties resolve to the lowest index."""
    s = np.where(visited, -np.inf, np.asarray(scores, dtype=float))
    s = np.where(np.isnan(s), -np.inf, s)
    if np.all(np.isneginf(s)):
        # every unvisited score is -inf (e.g. zero exceedance everywhere): lowest free index
        return int(np.flatnonzero(~np.asarray(visited))[0])
    return int(np.argmax(s))


# ---------------------------------------------------------------- heuristics

def stratify(coords, k: int, seed: int) -> list:
    """K-means partition of station coordinates, clusters ordered by their lowest station index."""
    coords = np.asarray(coords, dtype=float)
    k = min(k, len(coords))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, labels = kmeans2(coords, k, minit="++", seed=seed)
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    return sorted(groups, key=lambda g: g[0])


def baseline_select(state: env.BeliefState, kind: str, coords, rng, clusters=None) -> int:
    _require_unvisited(state)
    free = state.unvisited
    if kind == "random":
        return int(rng.choice(free))
    if kind == "stratified":
        if clusters is None:
            clusters = stratify(coords, state.budget, int(rng.integers(2**31)))
        k = len(clusters)
        for j in range(k):
            members = clusters[(state.step + j) % k]
            open_ = members[~state.visited[members]]
            if len(open_):
                return int(rng.choice(open_))
        return int(rng.choice(free))
    raise ValueError(f"unknown baseline {kind!r}")


def exceedance_logprob(mu, sigma, threshold: float) -> np.ndarray:
    """log P(value >= threshold) under Normal(mu, sigma); sigma == 0 means a point mass."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    out = np.where(mu >= threshold, 0.0, -np.inf)
    pos = sigma > 0
    out[pos] = norm.logsf(threshold, loc=mu[pos], scale=sigma[pos])
    return out


def greedy_select(state: env.BeliefState, variant: str, coords=None, threshold: Optional[float] = None) -> int:
    _require_unvisited(state)
    if variant == "intensity":
        return masked_argmax(state.mu, state.visited)
    if variant == "risk":
        if threshold is None:
            raise ValueError("risk variant needs a threshold")
        return masked_argmax(exceedance_logprob(state.mu, state.sigma, threshold), state.visited)
    if variant == "spatial":
        coords = np.asarray(coords, dtype=float)
        if not state.actions:
            d = np.linalg.norm(coords - coords.mean(axis=0), axis=1)
            return masked_argmax(-d, state.visited)
        prev = coords[list(state.actions)]
        d = np.linalg.norm(coords[:, None, :] - prev[None, :, :], axis=2).min(axis=1)
        return masked_argmax(d, state.visited)
    raise ValueError(f"unknown greedy variant {variant!r}")


def ucb_select(state: env.BeliefState, exploration_beta: float = 1.0) -> int:
    _require_unvisited(state)
    return masked_argmax(state.mu + exploration_beta * state.sigma, state.visited)


class Policy:
    name = "policy"

    def begin(self, scene, state):
        pass

    def select(self, state) -> int:
        raise NotImplementedError


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def select(self, state):
        return baseline_select(state, "random", None, self.rng)


class StratifiedPolicy(Policy):
    name = "stratified"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.clusters = None

    def begin(self, scene, state):
        self.coords = scene.coords
        self.clusters = stratify(scene.coords, state.budget, int(self.rng.integers(2**31)))

    def select(self, state):
        return baseline_select(state, "stratified", self.coords, self.rng, self.clusters)


class GreedyPolicy(Policy):
    def __init__(self, variant: str):
        self.variant = variant
        self.name = f"greedy-{variant}"

    def begin(self, scene, state):
        self.coords = scene.coords
        self.threshold = scene.field.bloom_threshold

    def select(self, state):
        return greedy_select(state, self.variant, self.coords, self.threshold)


class UCBPolicy(Policy):
    name = "ucb"

    def __init__(self, exploration_beta: float = 1.0):
        self.beta = exploration_beta

    def select(self, state):
        return ucb_select(state, self.beta)


# ---------------------------------------------------------------- deep Q-learning

@dataclass
class DQNConfig:
    episodes: int = 3000
    discount: float = 0.99
    replay_capacity: int = 10_000
    batch_size: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5
    target_sync: int = 500
    learning_rate: float = 1e-3
    hidden: tuple = (64, 64)
    dueling: bool = False
    warmup: int = 256

    def __post_init__(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must be in [0, 1]")
        if self.episodes < 0 or self.batch_size < 1 or self.replay_capacity < 1:
            raise ValueError("invalid DQN hyperparameters")
        self.hidden = tuple(self.hidden)

    def epsilon(self, episode: int) -> float:
        horizon = max(1.0, self.eps_fraction * self.episodes)
        frac = min(1.0, episode / horizon)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


@dataclass
class QPolicy:
    q_net: nn.Network
    target_net: nn.Network
    n: int
    hyper: DQNConfig = field(default_factory=DQNConfig)

    def q_values(self, states, net: Optional[nn.Network] = None) -> np.ndarray:
        out = nn.forward(net or self.q_net, states, mode="infer")
        return dueling_combine(out) if self.hyper.dueling else out


def dueling_combine(out: np.ndarray) -> np.ndarray:
    v, a = out[:, :1], out[:, 1:]
    return v + a - a.mean(axis=1, keepdims=True)


def _dueling_grad(dq: np.ndarray) -> np.ndarray:
    return np.hstack([dq.sum(axis=1, keepdims=True), dq - dq.mean(axis=1, keepdims=True)])


def q_network_specs(n: int, hidden=(64, 64), dueling: bool = False):
    return nn.mlp_specs([3 * n, *hidden, n + 1 if dueling else n])


def init_qpolicy(n: int, hyper: DQNConfig, seed: int) -> QPolicy:
    q = nn.init_network(q_network_specs(n, hyper.hidden, hyper.dueling), seed)
    return QPolicy(q, q.copy(), n, hyper)


def dqn_select(policy: QPolicy, state: env.BeliefState) -> int:
    _require_unvisited(state)
    return masked_argmax(policy.q_values(state.vector())[0], state.visited)


class ReplayBuffer:
    """Uniform ring buffer of (state, action, reward, next_state, done)."""

    def __init__(self, capacity: int, width: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, width))
        self.s2 = np.zeros((capacity, width))
        self.a = np.zeros(capacity, dtype=int)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def add(self, s, a, r, s2, done):
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng):
        idx = rng.integers(0, self.size, size=batch)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


def td_update(policy: QPolicy, opt, batch, n: int) -> float:
    s, a, r, s2, done = batch
    q_next = policy.q_values(s2, policy.target_net)
    q_next = np.where(s2[:, 2 * n:] > 0.5, -np.inf, q_next)
    best_next = np.max(q_next, axis=1)
    best_next = np.where(done | np.isneginf(best_next), 0.0, best_next)
    target = r + policy.hyper.discount * best_next

    out, caches = nn._forward(policy.q_net, s, train=True)
    q = dueling_combine(out) if policy.hyper.dueling else out
    rows = np.arange(len(a))
    err = q[rows, a] - target
    dq = np.zeros_like(q)
    dq[rows, a] = 2.0 * err / len(a)
    dout = _dueling_grad(dq) if policy.hyper.dueling else dq
    opt.step(policy.q_net.params, nn._backward(policy.q_net, caches, dout))
    return float(np.mean(err * err))


def dqn_train(episode_source: Callable[[int], tuple], budget: int, weights: env.RewardWeights,
              hyper: DQNConfig = DQNConfig(), seed: int = 0,
              callback: Optional[Callable] = None) -> QPolicy:
    """Epsilon-greedy Q-learning over simulated episodes.

    ``episode_source(i)`` returns ``(scene, mu, sigma)`` for training episode ``i``;
    scenes come from the generator and beliefs from the fitted belief model, so no
    labeled data beyond the belief's training set is consumed.
    """
    rng = np.random.default_rng(seed)
    init_seed = int(rng.integers(2**31))
    scene0, mu0, _ = episode_source(0)
    n = len(mu0)
    policy = init_qpolicy(n, hyper, init_seed)
    opt = nn.Adam(lr=hyper.learning_rate)
    buf = ReplayBuffer(hyper.replay_capacity, 3 * n)
    updates = 0
    for ep in range(hyper.episodes):
        scene, mu, sigma = (scene0, mu0, _) if ep == 0 else episode_source(ep)
        state = env.initial_state(mu, sigma, budget)
        eps = hyper.epsilon(ep)
        while not state.done:
            s_vec = state.vector()
            if rng.random() < eps:
                a = int(rng.choice(state.unvisited))
            else:
                a = dqn_select(policy, state)
            nxt, r, done = env.step(state, a, scene, weights)
            buf.add(s_vec, a, r, nxt.vector(), done)
            state = nxt
            if buf.size >= max(hyper.warmup, hyper.batch_size):
                loss = td_update(policy, opt, buf.sample(hyper.batch_size, rng), n)
                if not np.isfinite(loss) or not policy.q_net.is_finite():
                    raise nn.TrainingDivergedError(ep, loss)
                updates += 1
                if updates % hyper.target_sync == 0:
                    policy.target_net = policy.q_net.copy()
        if callback is not None:
            callback(ep, policy)
    return policy


class DQNPolicy(Policy):
    name = "dqn"

    def __init__(self, qpolicy: QPolicy):
        self.qpolicy = qpolicy

    def select(self, state):
        return dqn_select(self.qpolicy, state)


def save_qpolicy(policy: QPolicy, path) -> None:
    d = {
        "format": "lakesense-qpolicy",
        "version": 1,
        "n": policy.n,
        "hyper": {**policy.hyper.__dict__, "hidden": list(policy.hyper.hidden)},
        "q_net": nn.network_to_dict(policy.q_net),
        "target_net": nn.network_to_dict(policy.target_net),
    }
    Path(path).write_text(json.dumps(d))


def load_qpolicy(path) -> QPolicy:
    d = json.loads(Path(path).read_text())
    if d.get("format") != "lakesense-qpolicy":
        raise ValueError("not a Q-policy checkpoint")
    return QPolicy(nn.network_from_dict(d["q_net"]), nn.network_from_dict(d["target_net"]),
                   d["n"], DQNConfig(**d["hyper"]))


# ---------------------------------------------------------------- exhaustive oracle

@dataclass
class OracleResult:
    best_subset: tuple
    best_rmse: float
    evaluated_count: int


def exhaustive_oracle(scene, mu, budget: int, cap: int = DEFAULT_ORACLE_CAP) -> OracleResult:
    """Minimum reconstruction RMSE over every ``budget``-subset of stations.

    Ties (within TIE_RTOL, so float noise cannot reorder symmetric subsets) go to the
    lexicographically smallest subset.
    """
    n = scene.n_stations
    count = math.comb(n, budget)
    if count > cap:
        raise InfeasibleOracleError(n, budget, count, cap)
    mu = np.asarray(mu, dtype=float)
    truth = np.asarray(scene.truth, dtype=float)
    coords = scene.coords
    best, best_rmse, evaluated = None, np.inf, 0
    for subset in itertools.combinations(range(n), budget):
        est = env.reconstruct_from(mu, truth, coords, subset)
        e = env.rmse(est, truth)
        evaluated += 1
        if e < best_rmse - TIE_RTOL * max(1.0, best_rmse if np.isfinite(best_rmse) else 0.0):
            best, best_rmse = subset, e
    return OracleResult(tuple(int(i) for i in best), float(best_rmse), evaluated)
