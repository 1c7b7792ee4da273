import json
from pathlib import Path

import pytest

from posoc.cli import load_scenario, main
from posoc.model import ConfigurationError

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

MINI_LQG = {
    "id": "mini_lqg", "kind": "lqg",
    "A": [[-0.25]], "B": [[1.0]], "C": [[1.0]], "sigma": [[0.5]],
    "Q": [[2.0]], "R": [[2.0]], "Q_T": [[2.0]],
    "m0": [0.0], "Sigma0": [[1.0]],
    "kappa": None, "fixed_eps": 0.1,
    "horizon": 1.0, "n_obs": 1, "window_K": 1,
    "training": {"M_train": 60, "dt": 0.02, "n_outer": 2, "tol": 0.001,
                 "ridge": 1e-06, "degree": 2, "seed": 5},
    "evaluation": {"M_eval": 300, "seed": 9},
}

# a chain whose greedy slab controls are not globally optimal: the invariant
# comparing backward induction with the exhaustive enumerator fails on it
BAD_CHAIN = {
    "generators": [[[-2.1, 2.1], [2.1, -2.1]], [[-0.76, 0.76], [0.76, -0.76]]],
    "running_costs": [[1.41, 0.55], [0.16, 0.94]],
    "emissions": [[[0.92, 0.08], [0.08, 0.92]], [[0.5, 0.5], [0.5, 0.5]]],
    "impulse_costs": [[0.13, 0.29], [0.15, 0.13]],
    "terminal_costs": [1.24, 1.99],
    "horizon": 0.5, "obs_times": [0.25], "dt": 0.05,
}


@pytest.fixture
def mini_scenario(tmp_path):
    path = tmp_path / "mini.json"
    path.write_text(json.dumps(MINI_LQG))
    return path


def run(args):
    return main([str(a) for a in args])


def test_oracle_success_and_outputs(tmp_path):
    out = tmp_path / "out"
    code = run(["oracle", "--scenario", SCENARIOS / "toy_chain.json",
                "--out", out])
    assert code == 0
    assert (out / "tree.csv").exists()
    assert (out / "run.log").exists()
    doc = json.loads((out / "report.json").read_text())
    assert doc["oracle"]["dp_vs_brute_force"] <= 1e-10
    assert doc["oracle"]["envelope_error"] <= 1e-10
    assert doc["oracle"]["pairing_error"] <= 1e-10
    assert doc["oracle"]["fully_observed_gap"] <= 1e-10
    assert doc["oracle"]["argmin_disagreements"] == 0


def test_oracle_reports_deterministic(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run(["oracle", "--scenario", SCENARIOS / "toy_chain.json",
                "--out", out1]) == 0
    assert run(["oracle", "--scenario", SCENARIOS / "toy_chain.json",
                "--out", out2]) == 0
    assert (out1 / "tree.csv").read_bytes() == (out2 / "tree.csv").read_bytes()


def test_missing_scenario_is_config_error(tmp_path):
    assert run(["oracle", "--scenario", tmp_path / "nope.json",
                "--out", tmp_path / "o"]) == 1


def test_malformed_scenario_is_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["oracle", "--scenario", bad, "--out", tmp_path / "o"]) == 1
    assert run(["evaluate", "--policy", "zero", "--scenario", bad,
                "--out", tmp_path / "o2"]) == 1


def test_unknown_flag_is_config_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(["oracle", "--scenario", SCENARIOS / "toy_chain.json",
             "--out", tmp_path / "o", "--bogus"])
    assert exc.value.code == 1


def test_invariant_failure_exit_code(tmp_path):
    bad = tmp_path / "bad_chain.json"
    bad.write_text(json.dumps(BAD_CHAIN))
    assert run(["oracle", "--scenario", bad, "--out", tmp_path / "o"]) == 3


def test_runtime_failure_exit_code(tmp_path, mini_scenario):
    doc = json.loads(mini_scenario.read_text())
    doc["evaluation"]["M_eval"] = 1  # too small to evaluate
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps(doc))
    assert run(["evaluate", "--policy", "zero", "--scenario", broken,
                "--out", tmp_path / "o"]) == 2


def test_evaluate_zero_policy(tmp_path, mini_scenario):
    out = tmp_path / "out"
    assert run(["evaluate", "--policy", "zero", "--scenario", mini_scenario,
                "--out", out]) == 0
    doc = json.loads((out / "report.json").read_text())
    rep = doc["reports"][0]
    assert rep["method"] == "zero"
    assert rep["cost_to_go"][0][1] == pytest.approx(rep["mean_cost"], abs=1e-9)
    assert (out / "cost_to_go_zero.csv").exists()


def test_evaluate_separation_policy(tmp_path, mini_scenario):
    out = tmp_path / "out"
    assert run(["evaluate", "--policy", "separation",
                "--scenario", mini_scenario, "--out", out]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["reports"][0]["mean_cost"] > 0.0


def test_train_outputs_and_determinism(tmp_path, mini_scenario):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    for out in (out1, out2):
        assert run(["train", "--scenario", mini_scenario, "--out", out]) == 0
        for name in ("ansatz.json", "history.csv", "cost_to_go_particle.csv",
                     "report.json"):
            assert (out / name).exists()
    for name in ("ansatz.json", "history.csv", "cost_to_go_particle.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_seed_override_changes_training(tmp_path, mini_scenario):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run(["train", "--scenario", mini_scenario, "--out", out1]) == 0
    assert run(["train", "--scenario", mini_scenario, "--seed", 77,
                "--out", out2]) == 0
    assert (out1 / "ansatz.json").read_bytes() != \
        (out2 / "ansatz.json").read_bytes()


def test_config_hash_identifies_configuration(tmp_path, mini_scenario):
    s1 = load_scenario(mini_scenario)
    s2 = load_scenario(mini_scenario)
    assert s1.config_hash == s2.config_hash
    # a seed override is a resolved-config change
    s3 = load_scenario(mini_scenario, seed_override=77)
    assert s3.config_hash != s1.config_hash
    doc = json.loads(mini_scenario.read_text())
    doc["horizon"] = 2.0
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    assert load_scenario(other).config_hash != s1.config_hash


def test_scenario_validation():
    with pytest.raises(ConfigurationError):
        load_scenario(SCENARIOS / "toy_chain.json")  # not a scenario file


def test_scenario_loader_reads_shipped_files():
    for name in ("table1_1d.json", "noise_1d_no1.json", "noise_1d_no3.json",
                 "noise_10d_no3.json", "obstacle_1d.json", "obstacle_10d.json"):
        s = load_scenario(SCENARIOS / name)
        assert s.id
        assert s.kind in ("lqg", "obstacle")
        assert s.config_hash


def test_table1_requires_single_schedule_commands(tmp_path):
    # table1_1d lists several observation counts; single-schedule commands
    # must refuse it rather than guess
    assert run(["train", "--scenario", SCENARIOS / "table1_1d.json",
                "--out", tmp_path / "o"]) == 1
