import json
from pathlib import Path

import numpy as np
import pytest

from neuralpi.cli import EXIT_CHECK, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from neuralpi.config import ConfigError, ExperimentConfig, load_config, parse_config
from neuralpi.control import load_controller
from neuralpi.dynamics import Trajectory

CORPUS = Path(__file__).parent / "data" / "invalid_configs"
EXPECTED = json.loads((CORPUS / "expected.json").read_text())


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_invalid_config_corpus(name):
    with pytest.raises(ConfigError) as info:
        load_config(CORPUS / name)
    for field in EXPECTED[name]:
        assert any(field in msg for msg in info.value.errors), info.value.errors


def test_corpus_is_fully_listed():
    files = {p.name for p in CORPUS.iterdir() if p.name != "expected.json"}
    assert files == set(EXPECTED)


def test_defaults_and_presets():
    v = ExperimentConfig.from_dict({})
    assert v.family == "vehicle" and v["system"]["y_bar"] == 5.2 and v["cost"]["p"] == 2
    assert v["controller"]["comm_graph"]["kind"] == "ring"  # n = 5 has no 3-regular graph
    p = ExperimentConfig.from_dict({"system": {"family": "power"}}, preset="paper")
    assert p.n == 10 and p["system"]["edges"] == "sine" and p["cost"]["p"] == 4
    assert p["train"]["episodes"] == 600
    s = ExperimentConfig.from_dict({"train": {"seed": 4}}, seed=9)
    assert all(s[sec]["seed"] == 9 for sec in ("system", "controller", "cost", "train", "simulate"))


def test_toml_and_json_are_interchangeable():
    toml = '[system]\nfamily = "power"\nn = 4\n[train]\nepisodes = 7\n'
    js = json.dumps({"system": {"family": "power", "n": 4}, "train": {"episodes": 7}})
    assert ExperimentConfig.from_dict(parse_config(toml)).to_json() == \
        ExperimentConfig.from_dict(parse_config(js)).to_json()


def test_literal_cost_scaling():
    cfg = ExperimentConfig.from_dict({"system": {"family": "power"}})
    c = cfg.cost_coefficients()
    assert np.allclose(cfg.cost_family().c, 4 * c)


# ---------------------------------------------------------------- CLI


def _write(tmp_path, name, data):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


VEH = {"system": {"family": "vehicle", "n": 3}, "simulate": {"runs": 2, "T": 4.0},
       "train": {"episodes": 3, "batch": 3, "K": 40, "dt": 0.05, "checkpoint_every": 2}}


def test_simulate_from_equilibrium(tmp_path, capsys):
    for variant in ("neural-pi", "neural-pi-comm"):
        cfg = _write(tmp_path, "c.json", {"system": {"n": 2}, "controller": {"variant": variant},
                                          "simulate": {"init": "equilibrium", "runs": 2, "T": 5.0}})
        out = tmp_path / variant
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert max(r["agreement_error"] for r in summary["runs"]) <= 1e-9


def test_simulate_outputs_round_trip_and_are_deterministic(tmp_path):
    cfg = _write(tmp_path, "c.json", VEH)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--scheme", "rk4"]) == EXIT_OK
    for f in ("trajectory_0.csv", "trajectory_1.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    text = (tmp_path / "a" / "trajectory_0.csv").read_text()
    tr = Trajectory.from_csv(text, y_bar=5.2)
    assert tr.to_csv(0) == text
    json.loads((tmp_path / "a" / "summary.json").read_text())


def test_simulate_power_with_comm(tmp_path):
    cfg = _write(tmp_path, "p.json", {"system": {"family": "power", "n": 5},
                                      "controller": {"variant": "neural-pi-comm"},
                                      "simulate": {"runs": 2, "T": 10, "dt": 0.05}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK


def test_usage_errors(tmp_path, monkeypatch):
    cfg = _write(tmp_path, "c.json", VEH)
    assert main(["simulate", "--config", cfg, "--controller", str(tmp_path / "missing.json")]) == EXIT_USAGE
    assert main(["simulate", "--config", str(CORPUS / "power_learnable_edges.toml")]) == EXIT_USAGE
    assert main(["simulate", "--config", str(tmp_path / "nope.toml")]) == EXIT_USAGE
    assert main(["launch"]) == EXIT_USAGE
    assert main(["simulate", "--config", cfg, "--scheme", "euler", "--edges", str(tmp_path / "x.json")]) == EXIT_USAGE
    assert main(["export-monotone", "--which", "edge"]) == EXIT_USAGE
    monkeypatch.setenv("NEURALPI_THREADS", "zero")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_controller_size_mismatch(tmp_path):
    cfg = _write(tmp_path, "c.json", VEH)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == EXIT_OK
    big = _write(tmp_path, "big.json", {**VEH, "system": {"n": 4}})
    assert main(["simulate", "--config", big, "--controller", str(tmp_path / "t" / "controller.json")]) == EXIT_USAGE


def test_numerical_failure_exit_code(tmp_path):
    cfg = _write(tmp_path, "c.json", {**VEH, "controller": {"variant": "linear"},
                                      "simulate": {"dt": 5.0, "T": 5000.0, "scheme": "euler"}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_NUMERIC


def test_train_zero_episodes_returns_init(tmp_path):
    data = {**VEH, "train": {"episodes": 0}}
    cfg = _write(tmp_path, "c.json", data)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    saved = json.loads((tmp_path / "o" / "controller.json").read_text())
    assert saved == ExperimentConfig.from_dict(data).build_controller().to_dict()
    assert (tmp_path / "o" / "checkpoint_00000.json").exists()


def test_train_is_byte_deterministic(tmp_path):
    cfg = _write(tmp_path, "c.json", VEH)
    for d in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / d), "--seed", "5"]) == EXIT_OK
    for f in ("loss_history.csv", "controller.json", "checkpoint_00002.json", "checkpoint_00003.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = (tmp_path / "a" / "loss_history.csv").read_text().splitlines()
    assert rows[0] == "episode,mean_loss,lr" and len(rows) == 4
    ck = json.loads((tmp_path / "a" / "checkpoint_00002.json").read_text())
    assert load_controller(tmp_path / "a" / "controller.json").variant == ck["controller"]["variant"]


def test_edge_learning_mode(tmp_path):
    data = {**VEH, "system": {"n": 3, "edges": "learnable"}, "train": {**VEH["train"], "mode": "edges"}}
    cfg = _write(tmp_path, "c.json", data)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    assert json.loads((tmp_path / "o" / "controller.json").read_text())["variant"] == "zero"
    init_edges = ExperimentConfig.from_dict(data).build_model().edges.to_dict()
    assert json.loads((tmp_path / "o" / "edges.json").read_text()) != init_edges
    assert main(["export-monotone", "--edges", str(tmp_path / "o" / "edges.json"), "--which", "edge",
                 "--out", str(tmp_path / "o"), "--points", "11"]) == EXIT_OK
    header = (tmp_path / "o" / "monotone_edge.csv").read_text().splitlines()[0]
    assert header == "z,g_0,g_1"


def test_export_monotone_table(tmp_path, capsys):
    cfg = _write(tmp_path, "c.json", {**VEH, "train": {"episodes": 0}})
    main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
    capsys.readouterr()
    ctrl_file = str(tmp_path / "o" / "controller.json")
    assert main(["export-monotone", "--controller", ctrl_file, "--which", "p", "--range", "-1", "1",
                 "--points", "5"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "z,g_0,g_1,g_2" and len(lines) == 6
    table = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    ctrl = load_controller(ctrl_file)
    assert np.allclose(table[:, 1:], ctrl.p(table[:, :1] * np.ones(3)), rtol=1e-15)


def test_verify_reports(tmp_path, capsys):
    # unit-scale costs: the default loss-scale coefficients make the marginal-cost
    # consensus too slow to settle within T
    base = {"system": {"n": 5}, "simulate": {"runs": 2, "T": 40.0}, "cost": {"c_range": [0.5, 1.5]},
            "train": {"episodes": 4, "batch": 4, "K": 60, "dt": 0.05}}
    comm = _write(tmp_path, "comm.json", {**base, "controller": {"variant": "neural-pi-comm"}})
    assert main(["train", "--config", comm, "--out", str(tmp_path / "trained")]) == EXIT_OK
    runs = [("trained", comm, ["--controller", str(tmp_path / "trained" / "controller.json")])]
    for variant in ("neural-pi", "linear"):
        runs.append((variant, _write(tmp_path, f"{variant}.json", {**base, "controller": {"variant": variant}}), []))
    for name, cfg, extra in runs:
        out = tmp_path / f"v_{name}"
        assert main(["verify", "--config", cfg, "--out", str(out), *extra]) == EXIT_OK
        rep = json.loads((out / "verify_report.json").read_text())
        assert rep["passed"] and all(c["status"] == "pass" for c in rep["checks"])
        names = {c["name"] for c in rep["checks"]}
        assert {"output_agreement", "lyapunov_decrement", "equilibrium_residual"} <= names
        if name == "trained":
            assert {"kkt_spread", "kkt_balance", "lemma2_cross_term"} <= names
    cfg = _write(tmp_path, "dense.json", {**base, "controller": {"variant": "dense"}, "simulate": {"T": 2.0}})
    main(["verify", "--config", cfg, "--out", str(tmp_path / "dense")])
    rep = json.loads((tmp_path / "dense" / "verify_report.json").read_text())
    status = {c["name"]: c["status"] for c in rep["checks"]}
    assert status["output_agreement"] == "info" and status["lyapunov_decrement"] == "info"


def test_verify_detects_failure(tmp_path):
    cfg = _write(tmp_path, "short.json", {"system": {"n": 4}, "simulate": {"runs": 1, "T": 0.5, "eps": 1e-6}})
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CHECK


def test_equilibrium_command(tmp_path, capsys):
    two = {"system": {"n": 2, "nodes": {"kappa": [1, 1], "v0": [5, 6], "v1": [1, 1]}}, "cost": {"c_range": [1, 1]}}
    assert main(["equilibrium", "--config", _write(tmp_path, "two.json", two)]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert np.allclose(doc["w_star"], [-0.3, -0.3], atol=1e-12)
    homo = {"system": {"n": 3, "nodes": {"kappa": [1, 2, 1], "v0": [5.2] * 3, "v1": [0.5, 1, 0.7]}}}
    assert main(["equilibrium", "--config", _write(tmp_path, "h.json", homo)]) == EXIT_OK
    assert np.all(np.abs(json.loads(capsys.readouterr().out)["w_star"]) <= 1e-15)
    pw = {"system": {"family": "power", "n": 6}}
    assert main(["equilibrium", "--config", _write(tmp_path, "p.json", pw), "--out", str(tmp_path / "o")]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["balance_residual"] <= 1e-9
    assert json.loads((tmp_path / "o" / "equilibrium.json").read_text()) == doc
