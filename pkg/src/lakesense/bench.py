"""Experiment harness: policy comparison, scalability, representation ablation, reward-weight scans."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.distance import pdist

from . import agents, belief, env, nn, synth
from .config import ExperimentConfig
from .stats import permutation_test

log = logging.getLogger(__name__)

DETECTION_TARGET = 0.95
REFERENCE_POLICY = "dqn"
POLICY_ORDER = ("random", "stratified", "greedy-intensity", "greedy-risk", "greedy-spatial", "ucb", "dqn")


def _stream(seed: int, tag: str, i: int = 0) -> int:
    tag_int = int.from_bytes(tag.encode(), "little")
    return int(np.random.SeedSequence([seed, tag_int, i]).generate_state(1)[0])


def scene_for(cfg: ExperimentConfig, seed: int, delta_scale: float = 1.0,
              unlabeled_count: int = 0) -> synth.Scene:
    return synth.make_scene(
        cfg.n_stations, seed, correlation_length=cfg.correlation_length, noise_sd=cfg.noise_sd,
        unlabeled_count=unlabeled_count, grid=synth.default_grid(cfg.n_bands), preset=cfg.preset,
        scale=cfg.field_scale, log_sd=cfg.field_log_sd, bloom_threshold=cfg.bloom_threshold,
        delta_scale=delta_scale,
    )


def station_days(cfg: ExperimentConfig, seed: int, tag: str, count: int, delta_scale: float = 1.0):
    """``count`` labeled (spectrum, truth) rows gathered from consecutive simulated days."""
    spectra, truth = [], []
    day = 0
    while sum(map(len, truth)) < count:
        sc = scene_for(cfg, _stream(seed, tag, day), delta_scale)
        spectra.append(sc.spectra)
        truth.append(sc.truth)
        day += 1
    return np.vstack(spectra)[:count], np.concatenate(truth)[:count]


def build_belief(cfg: ExperimentConfig, seed: int) -> belief.BeliefModel:
    X, y = station_days(cfg, seed, "labeled", cfg.n_labeled)
    hyper = nn.TrainConfig(**{**belief.MEMBER_HYPER.__dict__, "epochs": cfg.member_epochs})
    return belief.fit_belief_model(X, synth.default_grid(cfg.n_bands), y, cfg.feature_kind,
                                   M=cfg.ensemble_size, hyper=hyper, seed=_stream(seed, "ensemble"))


def episode_source(cfg: ExperimentConfig, model: belief.BeliefModel, seed: int, tag: str):
    def source(i: int):
        sc = scene_for(cfg, _stream(seed, tag, i))
        mu, sigma = model.predict_scene(sc)
        return sc, mu, sigma
    return source


def train_agent(cfg: ExperimentConfig, model: belief.BeliefModel, seed: int,
                weights: Optional[env.RewardWeights] = None) -> agents.QPolicy:
    return agents.dqn_train(episode_source(cfg, model, seed, "dqn-train"), cfg.budget,
                            weights or cfg.weights, cfg.dqn, seed=_stream(seed, "dqn"))


class MyopicPolicy(agents.Policy):
    """One-step maximizer of the expected reward under a Gaussian belief (E|err| = sigma*sqrt(2/pi))."""
    name = "myopic"

    def __init__(self, weights: env.RewardWeights):
        self.w = weights

    def begin(self, scene, state):
        self.coords = scene.coords
        self.diameter = scene.field.diameter

    def select(self, state):
        if state.actions:
            prev = self.coords[list(state.actions)]
            d = np.linalg.norm(self.coords[:, None, :] - prev[None], axis=2).min(axis=1)
        else:
            d = np.full(state.n, self.diameter)
        score = (-self.w.alpha * math.sqrt(2 / math.pi) + self.w.beta) * state.sigma + self.w.gamma * d
        return agents.masked_argmax(score, state.visited)


def make_policies(cfg: ExperimentConfig, seed: int, qpolicy: Optional[agents.QPolicy]):
    pols = [
        agents.RandomPolicy(_stream(seed, "random")),
        agents.StratifiedPolicy(_stream(seed, "stratified")),
        agents.GreedyPolicy("intensity"),
        agents.GreedyPolicy("risk"),
        agents.GreedyPolicy("spatial"),
        agents.UCBPolicy(cfg.ucb_beta),
    ]
    if qpolicy is not None:
        pols.append(agents.DQNPolicy(qpolicy))
    return pols


@dataclass
class EpisodeLog:
    """Per-policy episode outcomes for one experiment."""
    rmse: dict = field(default_factory=dict)
    returns: dict = field(default_factory=dict)
    detected: dict = field(default_factory=dict)      # only bloom-present episodes
    spread: dict = field(default_factory=dict)
    traces: list = field(default_factory=list)

    def add(self, name: str, seed: int, report: env.EpisodeReport, coords, keep_trace: bool):
        self.rmse.setdefault(name, []).append(report.reconstruction_rmse)
        self.returns.setdefault(name, []).append(report.total_reward)
        self.detected.setdefault(name, [])
        if report.bloom_present:
            self.detected[name].append(float(report.bloom_detected))
        pts = coords[list(report.actions)]
        self.spread.setdefault(name, []).append(float(pdist(pts).mean()) if len(pts) > 1 else 0.0)
        if keep_trace and report.components is not None:
            self.traces.extend(env.trace_rows(seed, name, report))


def oracle_report(scene, state: env.BeliefState, result: agents.OracleResult,
                  weights: env.RewardWeights) -> env.EpisodeReport:
    """Replays the oracle subset (index order) to get its reward and detection outcome."""
    rewards, comps = [], []
    for a in result.best_subset:
        comps.append(env.reward_components(state, a, scene.truth, scene.coords, scene.field.diameter))
        state, r, _ = env.step(state, a, scene, weights)
        rewards.append(r)
    return env.episode_metrics(state, scene, rewards, comps)


def evaluate(cfg: ExperimentConfig, model, qpolicy, seed: int, with_oracle: bool,
             logbook: Optional[EpisodeLog] = None, policies=None, keep_trace: bool = False,
             weights: Optional[env.RewardWeights] = None) -> EpisodeLog:
    logbook = logbook or EpisodeLog()
    weights = weights or cfg.weights
    policies = policies if policies is not None else make_policies(cfg, seed, qpolicy)
    source = episode_source(cfg, model, seed, "eval")
    for i in range(cfg.episodes):
        sc, mu, sigma = source(i)
        state = env.initial_state(mu, sigma, cfg.budget)
        for p in policies:
            logbook.add(p.name, seed, env.run_episode(sc, state, p, weights), sc.coords, keep_trace)
        if with_oracle:
            res = agents.exhaustive_oracle(sc, mu, cfg.budget, cfg.oracle_cap)
            logbook.add("oracle", seed, oracle_report(sc, state, res, weights), sc.coords, keep_trace)
    return logbook


REPORT_HEADER = ("policy", "mean_rmse", "rmse_sd", "detection_rate", "mean_return", "episodes",
                 "p_vs_reference", "p_metric", "note")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


@dataclass
class ReportTable:
    rows: list
    meta: dict = field(default_factory=dict)

    def row(self, policy: str) -> dict:
        for r in self.rows:
            if r["policy"] == policy:
                return r
        raise KeyError(policy)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r.get(k)) for k in REPORT_HEADER])
        return buf.getvalue()

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float):
                return None if not math.isfinite(v) else round(v, 12)
            return v
        rows = [{k: clean(r.get(k)) for k in REPORT_HEADER} for r in self.rows]
        return json.dumps({"rows": rows, "meta": self.meta}, indent=1, sort_keys=True)

    def write(self, path, fmt: str = "csv") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv() if fmt == "csv" else self.to_json())
        return path


def _rate(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def summarize(logbook: EpisodeLog, names, cfg: ExperimentConfig, p_metric: str,
              reference: str = REFERENCE_POLICY, seed: int = 0) -> list:
    rows = []
    ref_sample = None
    if reference in logbook.rmse:
        ref_sample = logbook.rmse[reference] if p_metric == "rmse" else logbook.detected[reference]
    for name in names:
        if name not in logbook.rmse:
            continue
        rm = np.asarray(logbook.rmse[name])
        p = None
        if ref_sample is not None and name != reference:
            other = logbook.rmse[name] if p_metric == "rmse" else logbook.detected[name]
            if len(other) >= 2 and len(ref_sample) >= 2:
                p = permutation_test(ref_sample, other, cfg.resamples, seed=_stream(seed, "perm-" + name))
        rows.append({
            "policy": name,
            "mean_rmse": float(rm.mean()),
            "rmse_sd": float(rm.std()),
            "detection_rate": _rate(logbook.detected[name]),
            "mean_return": float(np.mean(logbook.returns[name])),
            "episodes": int(len(rm)),
            "p_vs_reference": p,
            "p_metric": p_metric if p is not None else "",
            "note": "",
        })
    return rows


def _run_policies(cfg: ExperimentConfig, with_oracle: bool, keep_trace: bool = False):
    logbook = EpisodeLog()
    t0 = time.perf_counter()
    for seed in cfg.seeds:
        model = build_belief(cfg, seed)
        qpolicy = train_agent(cfg, model, seed)
        log.info("seed %d: belief + agent ready after %.1fs", seed, time.perf_counter() - t0)
        evaluate(cfg, model, qpolicy, seed, with_oracle, logbook, keep_trace=keep_trace)
    return logbook


def run_policy_compare(cfg: ExperimentConfig, keep_trace: bool = False) -> ReportTable:
    """All policies plus the exhaustive oracle on fresh scenes, aggregated over episodes and seeds."""
    logbook = _run_policies(cfg, with_oracle=True, keep_trace=keep_trace)
    rows = summarize(logbook, POLICY_ORDER + ("oracle",), cfg, "rmse", seed=cfg.seeds[0])
    table = ReportTable(rows, meta={"scenario": "policy_compare", "n_stations": cfg.n_stations,
                                    "budget": cfg.budget, "detection_target": DETECTION_TARGET})
    table.logbook = logbook
    return table


def run_scalability(cfg: ExperimentConfig, keep_trace: bool = False) -> ReportTable:
    """Policies without the oracle; the oracle row records why enumeration was skipped."""
    count = math.comb(cfg.n_stations, cfg.budget)
    feasible = count <= cfg.oracle_cap
    logbook = _run_policies(cfg, with_oracle=feasible, keep_trace=keep_trace)
    rows = summarize(logbook, POLICY_ORDER + (("oracle",) if feasible else ()), cfg, "detection",
                     seed=cfg.seeds[0])
    if not feasible:
        nan = float("nan")
        rows.append({"policy": "oracle", "mean_rmse": nan, "rmse_sd": nan, "detection_rate": nan,
                     "mean_return": nan, "episodes": 0, "p_vs_reference": None, "p_metric": "",
                     "note": f"infeasible: C({cfg.n_stations},{cfg.budget})={count} > cap {cfg.oracle_cap}"})
    table = ReportTable(rows, meta={"scenario": "scalability", "n_stations": cfg.n_stations,
                                    "budget": cfg.budget, "combinations": count,
                                    "oracle_feasible": feasible, "detection_target": DETECTION_TARGET})
    table.logbook = logbook
    return table


# ---------------------------------------------------------------- representation ablation

def r2_score(y, yhat) -> float:
    y = np.asarray(y, dtype=float)
    ss_res = np.sum((y - np.asarray(yhat, dtype=float)) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot)


@dataclass
class AblationResult:
    rows: list                 # (feature_kind, dimension, train_r2, test_r2), means over seeds
    per_seed: list             # dicts per seed with every kind's scores and the SSL scores
    ssl: dict

    ABLATION_HEADER = ("feature_kind", "dimension", "train_r2", "test_r2")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.ABLATION_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in self.ABLATION_HEADER])
        w.writerow(())
        w.writerow(("model", "test_r2"))
        for k in ("teacher", "student"):
            w.writerow((k, _fmt(self.ssl[k + "_test_r2"])))
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "ssl": self.ssl, "per_seed": self.per_seed},
                          indent=1, sort_keys=True)

    def write(self, path, fmt: str = "csv") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv() if fmt == "csv" else self.to_json())
        return path


def ablation_seed(cfg: ExperimentConfig, seed: int, with_ssl: bool = True) -> dict:
    grid = synth.default_grid(cfg.n_bands)
    Xtr, ytr = station_days(cfg, seed, "train-year", cfg.n_train)
    Xte, yte = station_days(cfg, seed, "test-year", cfg.n_test, delta_scale=cfg.shift)
    out = {"seed": seed}
    for kind in belief.FEATURE_KINDS:
        ftr = belief.extract_features(Xtr, grid, kind)
        fte = belief.extract_features(Xte, grid, kind)
        std = belief.Standardizer.fit(ftr)
        model = belief.fit_ridge(std.transform(ftr), ytr, cfg.ablation_reg)
        out[kind] = {
            "dimension": int(ftr.shape[1]),
            "train_r2": r2_score(ytr, model.predict(std.transform(ftr))),
            "test_r2": r2_score(yte, model.predict(std.transform(fte))),
        }
    if with_ssl:
        out["ssl"] = ssl_seed(cfg, seed, Xtr, ytr, Xte, yte)
    return out


def ssl_seed(cfg: ExperimentConfig, seed: int, Xtr, ytr, Xte, yte) -> dict:
    grid = synth.default_grid(cfg.n_bands)
    ftr = belief.extract_features(Xtr, grid, "physics")
    std = belief.Standardizer.fit(ftr)
    ztr = std.transform(ftr)
    zte = std.transform(belief.extract_features(Xte, grid, "physics"))
    teacher = belief.fit_ridge(ztr, ytr, cfg.ablation_reg)
    pool_scene = scene_for(cfg, _stream(seed, "pool"), unlabeled_count=cfg.unlabeled_count)
    pool = std.transform(belief.extract_features(pool_scene.unlabeled_pool, grid, "physics"))
    pseudo = belief.pseudo_label(teacher, pool, ytr)
    hyper = nn.TrainConfig(**{**belief.STUDENT_HYPER.__dict__, "epochs": cfg.student_epochs,
                              "seed": _stream(seed, "student")})
    student = belief.train_student(belief.labeled_set(ztr, ytr, cfg.labeled_weight), pseudo, hyper)
    return {
        "teacher_test_r2": r2_score(yte, teacher.predict(zte)),
        "student_test_r2": r2_score(yte, student.predict(zte)),
        "pseudo_count": len(pseudo),
        "labeled_mass_fraction": cfg.labeled_weight * len(ytr) / (cfg.labeled_weight * len(ytr) + len(pseudo)),
    }


def run_hdlss_ablation(cfg: ExperimentConfig, with_ssl: bool = True) -> AblationResult:
    per_seed = [ablation_seed(cfg, s, with_ssl) for s in cfg.seeds]
    rows = []
    for kind in belief.FEATURE_KINDS:
        rows.append({
            "feature_kind": kind,
            "dimension": per_seed[0][kind]["dimension"],
            "train_r2": float(np.mean([p[kind]["train_r2"] for p in per_seed])),
            "test_r2": float(np.mean([p[kind]["test_r2"] for p in per_seed])),
        })
    ssl = {}
    if with_ssl:
        ssl = {k: float(np.mean([p["ssl"][k] for p in per_seed]))
               for k in ("teacher_test_r2", "student_test_r2")}
    else:
        ssl = {"teacher_test_r2": float("nan"), "student_test_r2": float("nan")}
    return AblationResult(rows, per_seed, ssl)


# ---------------------------------------------------------------- reward-weight sensitivity

SENSITIVITY_HEADER = ("alpha", "beta", "gamma", "mean_rmse", "detection_rate", "mean_spread", "mean_return")


@dataclass
class SensitivityTable:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SENSITIVITY_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in SENSITIVITY_HEADER])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, indent=1, sort_keys=True)

    def write(self, path, fmt: str = "csv") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv() if fmt == "csv" else self.to_json())
        return path

    def best(self, key: str = "mean_rmse") -> dict:
        if key == "detection_rate":
            return max(self.rows, key=lambda r: r[key])
        return min(self.rows, key=lambda r: r[key])


def sensitivity_scan(cfg: ExperimentConfig, weight_grid=None) -> SensitivityTable:
    """Train (or, with ``sensitivity_policy='myopic'``, instantiate) one policy per weight triple
    and evaluate it on the same seeds and scenes."""
    grid = list(weight_grid if weight_grid is not None else cfg.weight_grid)
    if not grid:
        raise ValueError("weight grid is empty")
    models = {s: build_belief(cfg, s) for s in cfg.seeds}
    rows = []
    for w in grid:
        logbook = EpisodeLog()
        for s in cfg.seeds:
            if cfg.sensitivity_policy == "dqn":
                pol = agents.DQNPolicy(train_agent(cfg, models[s], s, weights=w))
            else:
                pol = MyopicPolicy(w)
            pol.name = "scan"
            evaluate(cfg, models[s], None, s, False, logbook, policies=[pol], weights=w)
        rows.append({
            "alpha": w.alpha, "beta": w.beta, "gamma": w.gamma,
            "mean_rmse": float(np.mean(logbook.rmse["scan"])),
            "detection_rate": _rate(logbook.detected["scan"]),
            "mean_spread": float(np.mean(logbook.spread["scan"])),
            "mean_return": float(np.mean(logbook.returns["scan"])),
        })
    return SensitivityTable(rows)
