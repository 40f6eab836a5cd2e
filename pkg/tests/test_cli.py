import csv
import json

import numpy as np
import pytest

from ifl.checkpoint import load_block, save_block
from ifl.cli import main
from ifl.data import DataError
from ifl.experiment import (ConfigError, ExperimentConfig, compare_runs, compose_eval, load_data,
                            mb_to_reach, read_rounds, stream)
from ifl.models import ContractError
from ifl.nn import Block, Dense

SMALL = ["--synthetic", "--train-limit", "800", "--test-limit", "200"]


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def ifl_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ifl")
    assert main(["run", "--protocol", "ifl", "--rounds", "2", "--mc-runs", "2", "--local-steps", "2",
                 "--eval-every", "1", "--out", str(out)] + SMALL) == 0
    return out


def test_smoke_default_sizes(tmp_path, capsys):
    assert main(["run", "--protocol", "ifl", "--rounds", "2", "--mc-runs", "1", "--synthetic",
                 "--out", str(tmp_path)]) == 0
    r = rows(tmp_path / "rounds.csv")
    assert [int(x["round"]) for x in r] == [2]
    assert float(r[0]["cumulative_uplink_mb"]) == pytest.approx(2 * 221_312 / 1e6)
    assert "ifl" in capsys.readouterr().out


def test_artifacts(ifl_dir):
    r = rows(ifl_dir / "rounds.csv")
    assert list(r[0]) == ["run_id", "protocol", "round", "cumulative_uplink_mb",
                          "cumulative_downlink_mb", "mean_accuracy",
                          "acc_client1", "acc_client2", "acc_client3", "acc_client4"]
    assert [(x["run_id"], x["round"]) for x in r] == [("0", "1"), ("0", "2"), ("1", "1"), ("1", "2")]
    comp = rows(ifl_dir / "composition.csv")
    assert len(comp) == 2 * 2 * 16
    assert len(rows(ifl_dir / "sd.csv")) == 2 * 2 * 4
    resolved = json.loads((ifl_dir / "config.resolved").read_text())
    assert resolved["rounds"] == 2 and resolved["local_steps"] == 2 and resolved["synthetic"]
    assert (ifl_dir / "checkpoints" / "run1" / "round2" / "client4_modular.mfw").exists()


def test_mean_accuracy_is_client_mean(ifl_dir):
    for x in rows(ifl_dir / "rounds.csv"):
        accs = [float(x[f"acc_client{k}"]) for k in range(1, 5)]
        assert float(x["mean_accuracy"]) == pytest.approx(np.mean(accs), abs=1e-6)


def test_repeat_is_byte_identical(ifl_dir, tmp_path):
    assert main(["run", "--protocol", "ifl", "--rounds", "2", "--mc-runs", "2", "--local-steps", "2",
                 "--eval-every", "1", "--out", str(tmp_path)] + SMALL) == 0
    for name in ("rounds.csv", "composition.csv", "sd.csv"):
        assert (tmp_path / name).read_bytes() == (ifl_dir / name).read_bytes()


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"protocol": "fsl", "rounds": 3, "mc_runs": 1, "synthetic": True,
                               "train_limit": 800, "test_limit": 200, "seed": 9}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--rounds", "1", "--out", str(out)]) == 0
    resolved = json.loads((out / "config.resolved").read_text())
    assert resolved["rounds"] == 1 and resolved["protocol"] == "fsl" and resolved["seed"] == 9
    assert not (out / "composition.csv").exists()


@pytest.mark.parametrize("argv", [
    ["run", "--protocol", "gossip", "--synthetic"],
    ["run", "--rounds", "0", "--synthetic"],
    ["run", "--protocol", "ifl"],                      # no data source
    ["run", "--lr-base", "-1", "--synthetic"],
])
def test_config_errors_exit_2(argv, tmp_path):
    with pytest.raises(SystemExit) as e:
        code = main(argv + ["--out", str(tmp_path)])
        raise SystemExit(code)
    assert e.value.code == 2


def test_unknown_config_field(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1, "synthetic": True}))
    assert main(["run", "--config", str(cfg)]) == 2


def test_missing_dataset_exit_3(tmp_path):
    assert main(["run", "--data-dir", str(tmp_path), "--rounds", "1", "--out", str(tmp_path / "o")]) == 3


def test_divergence_exit_4(tmp_path):
    with np.errstate(all="ignore"):
        assert main(["run", "--rounds", "3", "--mc-runs", "1", "--lr-base", "1e30",
                     "--out", str(tmp_path)] + SMALL) == 4


# ----------------------------------------------------------------- compare

def test_compare_single_run_passthrough(ifl_dir):
    table, reach = compare_runs([ifl_dir], (0.0, 1.01))
    assert [p["round"] for p in table] == [1, 2]
    r = rows(ifl_dir / "rounds.csv")
    for p in table:
        grp = [float(x["mean_accuracy"]) for x in r if int(x["round"]) == p["round"]]
        assert p["mean_accuracy"] == pytest.approx(np.mean(grp)) and p["runs"] == 2
    assert reach["ifl"][0.0] == table[0]["cumulative_uplink_mb"]
    assert reach["ifl"][1.01] is None


def test_mb_to_reach_first_crossing():
    curve = [{"round": 1, "cumulative_uplink_mb": 1.0, "mean_accuracy": 0.5},
             {"round": 2, "cumulative_uplink_mb": 2.0, "mean_accuracy": 0.91},
             {"round": 3, "cumulative_uplink_mb": 3.0, "mean_accuracy": 0.85},
             {"round": 4, "cumulative_uplink_mb": 4.0, "mean_accuracy": 0.95}]
    assert mb_to_reach(curve, 0.9) == 2.0
    assert mb_to_reach(curve, 0.99) is None


def test_compare_cli(ifl_dir, tmp_path, capsys):
    out = tmp_path / "merged.csv"
    assert main(["compare", str(ifl_dir), "--threshold", "1.01", "--out", str(out)]) == 0
    assert "unreached" in capsys.readouterr().out
    assert len(rows(out)) == 2


def test_compare_schema_mismatch(tmp_path):
    (tmp_path / "rounds.csv").write_text("round,accuracy\n1,0.5\n")
    with pytest.raises(DataError, match="missing"):
        read_rounds(tmp_path)
    assert main(["compare", str(tmp_path)]) == 3


# ----------------------------------------------------------------- compose

def _test_set():
    return load_data(ExperimentConfig(synthetic=True, train_limit=1, test_limit=200))[1]


def test_compose_from_run(ifl_dir, tmp_path):
    ckpt = ifl_dir / "checkpoints" / "run0" / "round2"
    matrix = compose_eval(ckpt, _test_set(), tmp_path)
    assert matrix.shape == (4, 4)
    # matches the matrix logged during training at the same round
    logged = [x for x in rows(ifl_dir / "composition.csv") if x["run_id"] == "0" and x["round"] == "2"]
    assert [f"{v:.6f}" for v in matrix.ravel()] == [x["accuracy"] for x in logged]
    assert len(rows(tmp_path / "composition.csv")) == 16 and len(rows(tmp_path / "sd.csv")) == 4


def test_compose_duplicate_checkpoint(ifl_dir, tmp_path):
    src = ifl_dir / "checkpoints" / "run0" / "round2"
    for k, name in ((1, 1), (2, 2), (3, 2)):
        for part in ("base", "modular"):
            save_block(load_block(src / f"client{name}_{part}.mfw"), tmp_path / f"client{k}_{part}.mfw")
    m = compose_eval(tmp_path, _test_set())
    assert np.array_equal(m[1], m[2]) and np.array_equal(m[:, 1], m[:, 2])


def test_compose_single_checkpoint(ifl_dir, tmp_path):
    src = ifl_dir / "checkpoints" / "run0" / "round2"
    for part in ("base", "modular"):
        save_block(load_block(src / f"client3_{part}.mfw"), tmp_path / "ck" / f"client1_{part}.mfw")
    m = compose_eval(tmp_path / "ck", _test_set(), tmp_path / "out")
    assert m.shape == (1, 1)
    assert (tmp_path / "out" / "composition.csv").exists()
    assert not (tmp_path / "out" / "sd.csv").exists()


def test_compose_contract_violation(ifl_dir, tmp_path):
    src = ifl_dir / "checkpoints" / "run0" / "round2"
    for k in (1, 2):
        for part in ("base", "modular"):
            save_block(load_block(src / f"client{k}_{part}.mfw"), tmp_path / f"client{k}_{part}.mfw")
    save_block(Block([Dense(400, 10)]), tmp_path / "client2_modular.mfw")
    with pytest.raises(ContractError, match="client2"):
        compose_eval(tmp_path, _test_set())
    assert main(["compose", str(tmp_path), "--synthetic", "--test-limit", "200",
                 "--out", str(tmp_path / "o")]) == 3


def test_compose_cli(ifl_dir, tmp_path, capsys):
    ckpt = ifl_dir / "checkpoints" / "run0" / "round2"
    assert main(["compose", str(ckpt), "--synthetic", "--test-limit", "200", "--out", str(tmp_path)]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 4
    assert main(["compose", str(ckpt), "--out", str(tmp_path)]) == 2
    assert main(["compose", str(tmp_path / "nothing"), "--synthetic"]) == 3


# ------------------------------------------------------------------- seeds

def test_streams_independent_of_request_order():
    a = stream(5, 0, 2, 1).random(3)
    stream(5, 0, 1, 1).random(10)
    assert np.array_equal(a, stream(5, 0, 2, 1).random(3))
    assert not np.array_equal(a, stream(5, 0, 3, 1).random(3))


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError, match="eval_every"):
        ExperimentConfig(synthetic=True, eval_every=0)
    with pytest.raises(ConfigError, match="protocol"):
        ExperimentConfig(protocol="fl3", synthetic=True)
