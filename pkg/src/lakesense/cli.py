"""Command-line entry point: ``lakesense <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import agents, belief, bench, env, nn, synth
from .config import ConfigError, benchmark_config, load_config

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4

# bundled config used when --config is not given
DEFAULT_SCENARIO = {
    "generate-scene": "policy_compare",
    "train-belief": "policy_compare",
    "train-agent": "policy_compare",
    "compare": "policy_compare",
    "scale": "scalability",
    "ablate": "ablation",
    "sensitivity": "sensitivity",
    "oracle": "policy_compare",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (default: bundled benchmark config)")
    common.add_argument("--seed", type=int, help="run a single master seed instead of the config's list")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--episodes", type=int, help="evaluation episodes per seed")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lakesense", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-scene", parents=[common], help="write a synthetic scene and its truth table")
    g.add_argument("--n-stations", type=int)
    g.add_argument("--unlabeled", type=int, default=0, help="size of the unlabeled spectrum pool")

    sub.add_parser("train-belief", parents=[common], help="fit the bootstrap belief ensemble")

    a = sub.add_parser("train-agent", parents=[common], help="train the DQN on simulated episodes")
    a.add_argument("--belief", help="belief model directory (default: train one)")
    a.add_argument("--dqn-episodes", type=int)

    c = sub.add_parser("compare", parents=[common], help="policy comparison with the exhaustive oracle")
    c.add_argument("--trace", action="store_true", help="also write per-step reward traces")
    sub.add_parser("scale", parents=[common], help="scalability study without the oracle")
    sub.add_parser("ablate", parents=[common], help="feature-representation and self-training ablation")
    sub.add_parser("sensitivity", parents=[common], help="reward-weight sensitivity scan")

    o = sub.add_parser("oracle", parents=[common], help="exhaustive best subset for one scene")
    o.add_argument("--scene", help="scene JSON (default: generate from the seed)")
    o.add_argument("--belief", help="belief model directory (default: train one)")
    o.add_argument("--n-stations", type=int)
    o.add_argument("--budget", type=int)
    o.add_argument("--cap", type=int)
    return p


def resolve_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.out is not None:
        overrides["output_dir"] = args.out
    n = getattr(args, "n_stations", None)
    if n is not None:
        overrides["n_stations"] = n
        overrides["preset"] = "western_basin_8" if n == 8 else None
    if getattr(args, "budget", None) is not None:
        overrides["budget"] = args.budget
    if getattr(args, "cap", None) is not None:
        overrides["oracle_cap"] = args.cap
    if args.config:
        cfg = load_config(args.config, **overrides)
    else:
        cfg = benchmark_config(DEFAULT_SCENARIO[args.command], **overrides)
    if getattr(args, "dqn_episodes", None) is not None:
        cfg.dqn = agents.DQNConfig(**{**cfg.dqn.__dict__, "episodes": args.dqn_episodes})
    return cfg


def _out(cfg) -> Path:
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _emit(table, cfg, stem: str, fmt: str) -> Path:
    path = table.write(_out(cfg) / f"{stem}.{fmt}", fmt)
    print(path)
    return path


def cmd_generate_scene(args, cfg):
    seed = cfg.seeds[0]
    sc = bench.scene_for(cfg, seed, unlabeled_count=args.unlabeled)
    d = _out(cfg)
    synth.save_scene(sc, d / "scene.json")
    synth.write_truth_csv(sc, d / "truth.csv")
    print(d / "scene.json")


def cmd_train_belief(args, cfg):
    model = bench.build_belief(cfg, cfg.seeds[0])
    d = _out(cfg) / "belief"
    belief.save_belief_model(model, d)
    print(d)


def _belief(args, cfg):
    if getattr(args, "belief", None):
        return belief.load_belief_model(args.belief)
    return bench.build_belief(cfg, cfg.seeds[0])


def cmd_train_agent(args, cfg):
    seed = cfg.seeds[0]
    model = _belief(args, cfg)
    q = bench.train_agent(cfg, model, seed)
    path = _out(cfg) / "qpolicy.json"
    agents.save_qpolicy(q, path)
    print(path)


def cmd_compare(args, cfg):
    table = bench.run_policy_compare(cfg, keep_trace=args.trace)
    _emit(table, cfg, "policy_compare", args.format)
    if args.trace:
        path = _out(cfg) / "trace.csv"
        env.write_trace_csv(table.logbook.traces, path)
        print(path)


def cmd_scale(args, cfg):
    _emit(bench.run_scalability(cfg), cfg, "scalability", args.format)


def cmd_ablate(args, cfg):
    _emit(bench.run_hdlss_ablation(cfg), cfg, "ablation", args.format)


def cmd_sensitivity(args, cfg):
    _emit(bench.sensitivity_scan(cfg), cfg, "sensitivity", args.format)


def cmd_oracle(args, cfg):
    if args.scene:
        sc = synth.load_scene(args.scene)
    else:
        sc = bench.scene_for(cfg, cfg.seeds[0])
    count = math.comb(sc.n_stations, cfg.budget)
    if count > cfg.oracle_cap:   # fail before paying for a belief model
        raise agents.InfeasibleOracleError(sc.n_stations, cfg.budget, count, cfg.oracle_cap)
    mu, _ = _belief(args, cfg).predict_scene(sc)
    t0 = time.perf_counter()
    res = agents.exhaustive_oracle(sc, mu, cfg.budget, cfg.oracle_cap)
    record = {"subset": list(res.best_subset), "rmse": res.best_rmse,
              "evaluated_count": res.evaluated_count, "wall_time": time.perf_counter() - t0}
    path = _out(cfg) / "oracle.json"
    path.write_text(json.dumps(record, indent=1))
    print(path)


COMMANDS = {
    "generate-scene": cmd_generate_scene,
    "train-belief": cmd_train_belief,
    "train-agent": cmd_train_agent,
    "compare": cmd_compare,
    "scale": cmd_scale,
    "ablate": cmd_ablate,
    "sensitivity": cmd_sensitivity,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except agents.InfeasibleOracleError as exc:
        print(f"oracle infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (nn.TrainingDivergedError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
