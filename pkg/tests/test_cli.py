import json

import pytest

from lakesense import cli

SMALL = {
    "schema_version": 1,
    "episodes": 3,
    "ensemble_size": 2,
    "member_epochs": 10,
    "n_labeled": 30,
    "resamples": 1000,
    "dqn": {"episodes": 10, "warmup": 8, "batch_size": 8, "hidden": [8]},
}


@pytest.fixture
def small_config(tmp_path):
    def make(**kw):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({**SMALL, **kw}))
        return str(path)
    return make


def test_generate_scene(tmp_path):
    assert cli.main(["generate-scene", "--seed", "2", "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "scene.json").exists()
    assert (tmp_path / "g" / "truth.csv").read_text().count("\n") == 9


def test_compare_csv_and_trace(tmp_path, small_config):
    out = tmp_path / "c"
    assert cli.main(["compare", "--config", small_config(), "--out", str(out), "--trace"]) == 0
    lines = (out / "policy_compare.csv").read_text().splitlines()
    assert lines[0].startswith("policy,mean_rmse")
    assert len(lines) == 9
    assert (out / "trace.csv").exists()


def test_compare_json(tmp_path, small_config):
    out = tmp_path / "j"
    assert cli.main(["compare", "--config", small_config(), "--out", str(out), "--format", "json"]) == 0
    assert len(json.loads((out / "policy_compare.json").read_text())["rows"]) == 8


def test_train_belief_then_agent(tmp_path, small_config):
    cfg = small_config()
    assert cli.main(["train-belief", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert cli.main(["train-agent", "--config", cfg, "--out", str(tmp_path),
                     "--belief", str(tmp_path / "belief")]) == 0
    assert (tmp_path / "qpolicy.json").exists()


def test_oracle_feasible(tmp_path, small_config):
    assert cli.main(["oracle", "--config", small_config(), "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "oracle.json").read_text())
    assert rec["evaluated_count"] == 56 and len(rec["subset"]) == 3
    assert set(rec) == {"subset", "rmse", "evaluated_count", "wall_time"}


def test_oracle_infeasible_exit_code(tmp_path):
    assert cli.main(["oracle", "--n-stations", "50", "--budget", "5", "--out", str(tmp_path)]) == 3


def test_config_errors_exit_code(tmp_path, small_config):
    assert cli.main(["compare", "--config", small_config(bogus=1)]) == 2
    assert cli.main(["compare", "--config", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["compare", "--config", small_config(), "--episodes", "0"]) == 2


def test_numerical_failure_exit_code(tmp_path, small_config, monkeypatch):
    from lakesense import bench, nn

    def boom(*a, **k):
        raise nn.TrainingDivergedError(3, float("nan"))
    monkeypatch.setattr(bench, "build_belief", boom)
    assert cli.main(["compare", "--config", small_config(), "--out", str(tmp_path)]) == 4


def test_ablate_and_sensitivity(tmp_path, small_config):
    cfg = small_config(scenario="ablation", seeds=[0], unlabeled_count=200, student_epochs=2)
    assert cli.main(["ablate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "ablation.csv").read_text().startswith("feature_kind,dimension")
    cfg = small_config(scenario="sensitivity", sensitivity_policy="myopic", weight_grid=[[1, 0, 0], [0, 0, 1]])
    assert cli.main(["sensitivity", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "sensitivity.csv").read_text().splitlines()) == 3


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["compare", "--format", "xml"])
    assert exc.value.code == 2


def test_scale(tmp_path, small_config):
    cfg = small_config(scenario="scalability", n_stations=50, budget=5, preset=None, episodes=2)
    assert cli.main(["scale", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert "infeasible" in (tmp_path / "scalability.csv").read_text()
