"""Budgeted station-selection episodes: belief state, reward, field reconstruction, metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0   # belief accuracy at the pick (negative absolute error)
    beta: float = 0.5    # ensemble disagreement at the pick
    gamma: float = 0.25  # distance to the nearest earlier pick

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma)
        if not all(np.isfinite(vals)):
            raise ValueError("reward weights must be finite")
        if not any(vals):
            raise ValueError("at least one reward weight must be nonzero")

    def as_tuple(self):
        return (self.alpha, self.beta, self.gamma)


@dataclass(frozen=True)
class BeliefState:
    mu: np.ndarray
    sigma: np.ndarray
    visited: np.ndarray
    budget: int
    actions: tuple = ()

    @property
    def step(self) -> int:
        return len(self.actions)

    @property
    def n(self) -> int:
        return len(self.mu)

    @property
    def done(self) -> bool:
        return self.step >= self.budget

    @property
    def unvisited(self) -> np.ndarray:
        return np.flatnonzero(~self.visited)

    def vector(self) -> np.ndarray:
        """Policy input [mu | sigma | visited-mask], length 3N."""
        return np.concatenate([self.mu, self.sigma, self.visited.astype(float)])


def initial_state(mu, sigma, budget: int) -> BeliefState:
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if mu.shape != sigma.shape or mu.ndim != 1:
        raise ValueError("mu and sigma must be vectors of equal length")
    if not 1 <= budget <= len(mu):
        raise ValueError(f"budget {budget} must be in [1, {len(mu)}]")
    return BeliefState(mu, sigma, np.zeros(len(mu), dtype=bool), int(budget))


def reset(scene, belief, budget: int) -> BeliefState:
    """Start an episode: belief mean/spread at every station, nothing visited."""
    if budget > scene.n_stations:
        raise ValueError(f"budget {budget} exceeds {scene.n_stations} stations")
    mu, sigma = belief.predict_scene(scene)
    return initial_state(mu, sigma, budget)


def reward_components(state: BeliefState, action: int, truth, coords, diameter: float):
    """(info, uncertainty, spatial) terms for picking ``action`` from ``state``."""
    r_info = -abs(float(truth[action]) - float(state.mu[action]))
    r_uncert = float(state.sigma[action])
    if state.actions:
        prev = coords[list(state.actions)]
        r_spatial = float(np.min(np.linalg.norm(prev - coords[action], axis=1)))
    else:
        r_spatial = float(diameter)
    return r_info, r_uncert, r_spatial


def _check_action(state: BeliefState, action: int):
    if state.done:
        raise InvalidActionError("sampling budget exhausted")
    if not 0 <= action < state.n:
        raise InvalidActionError(f"station {action} out of range")
    if state.visited[action]:
        raise InvalidActionError(f"station {action} already visited")


def advance(state: BeliefState, action: int) -> BeliefState:
    _check_action(state, action)
    visited = state.visited.copy()
    visited[action] = True
    return replace(state, visited=visited, actions=state.actions + (int(action),))


def step(state: BeliefState, action: int, scene, weights: RewardWeights):
    """Apply one selection; returns (next_state, reward, done)."""
    _check_action(state, action)
    comps = reward_components(state, action, scene.truth, scene.coords, scene.field.diameter)
    reward = float(np.dot(weights.as_tuple(), comps))
    nxt = advance(state, action)
    return nxt, reward, nxt.done


def idw_weights(coords, visited_idx, power: float = 2.0) -> np.ndarray:
    """Row i holds normalized inverse-distance weights of station i on the visited stations."""
    coords = np.asarray(coords, dtype=float)
    visited_idx = np.asarray(visited_idx, dtype=int)
    d = np.linalg.norm(coords[:, None, :] - coords[None, visited_idx, :], axis=2)
    lam = np.zeros_like(d)
    at_site = d == 0
    exact_rows = at_site.any(axis=1)
    with np.errstate(divide="ignore"):
        inv = 1.0 / d[~exact_rows] ** power
    lam[~exact_rows] = inv / inv.sum(axis=1, keepdims=True)
    lam[exact_rows] = at_site[exact_rows] / at_site[exact_rows].sum(axis=1, keepdims=True)
    return lam


def reconstruct_from(mu, truth, coords, visited_idx, power: float = 2.0) -> np.ndarray:
    """Belief mean corrected by IDW-interpolated residuals observed at the visited stations."""
    mu = np.asarray(mu, dtype=float)
    visited_idx = np.asarray(visited_idx, dtype=int)
    obs = np.asarray(truth, dtype=float)[visited_idx]
    est = mu + idw_weights(coords, visited_idx, power) @ (obs - mu[visited_idx])
    est[visited_idx] = obs   # mu + (obs - mu) can be an ulp off
    return est


def reconstruct(state: BeliefState, scene, observations=None) -> np.ndarray:
    if state.step != state.budget:
        raise ValueError("reconstruction needs a completed episode")
    idx = np.asarray(state.actions)
    truth = np.array(scene.truth, dtype=float)
    if observations is not None:
        truth[idx] = observations
    return reconstruct_from(state.mu, truth, scene.coords, idx)


def rmse(estimate, truth) -> float:
    e = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(e * e)))


@dataclass
class EpisodeReport:
    actions: tuple
    rewards: np.ndarray
    reconstruction_rmse: float
    bloom_present: bool
    bloom_detected: bool
    components: Optional[np.ndarray] = None   # (K, 3) reward terms per step

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))


def episode_metrics(state: BeliefState, scene, rewards, components=None) -> EpisodeReport:
    truth = scene.truth
    thr = scene.field.bloom_threshold
    est = reconstruct(state, scene)
    present = bool(np.any(truth >= thr))
    detected = present and bool(np.any(truth[list(state.actions)] >= thr))
    return EpisodeReport(
        actions=tuple(state.actions),
        rewards=np.asarray(rewards, dtype=float),
        reconstruction_rmse=rmse(est, truth),
        bloom_present=present,
        bloom_detected=detected,
        components=None if components is None else np.asarray(components, dtype=float),
    )


def run_episode(scene, state: BeliefState, policy, weights: RewardWeights) -> EpisodeReport:
    """Roll ``policy`` (an object with ``begin(scene, state)`` and ``select(state)``) to the budget."""
    policy.begin(scene, state)
    rewards, comps = [], []
    diameter = scene.field.diameter
    while not state.done:
        a = int(policy.select(state))
        c = reward_components(state, a, scene.truth, scene.coords, diameter)
        state, r, _ = step(state, a, scene, weights)
        rewards.append(r)
        comps.append(c)
    return episode_metrics(state, scene, rewards, comps)


TRACE_HEADER = ("seed", "policy", "step", "action", "r_info", "r_uncert", "r_spatial", "reward")


def trace_rows(seed: int, policy_name: str, report: EpisodeReport):
    for t, (a, r) in enumerate(zip(report.actions, report.rewards)):
        ri, ru, rs = report.components[t]
        yield (seed, policy_name, t, a, repr(float(ri)), repr(float(ru)), repr(float(rs)), repr(float(r)))


def write_trace_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        w.writerows(rows)
