import json
import subprocess
import sys
from pathlib import Path

import pytest
import torch

from tmreach.cli import EXIT_CONFIG, EXIT_DIMENSION, EXIT_OK, main
from tmreach.neural import MLPNet

GOLDEN = Path(__file__).parent / "golden" / "affine_reach_dt.csv"


def run_cli(*args):
    return main([str(a) for a in args])


def test_affine_example_matches_golden(tmp_path):
    assert run_cli("reach-dt", "--example", "affine", "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "tube.csv").read_text() == GOLDEN.read_text()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "reach-dt" and man["seed"] == 0 and "tube.csv" in man["outputs"]


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tmreach.cli", "reach-dt", "--example", "affine",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "tube.csv").read_text() == GOLDEN.read_text()


def test_replay_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("reach-dt", "--system", "pendulum", "--steps", "8", "--split", "2x2",
                   "--baseline", "interval", "--out", a) == EXIT_OK
    assert run_cli("replay", a / "manifest.json", "--out", b) == EXIT_OK
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_dimension_mismatch_exit_code(tmp_path, capsys):
    net = MLPNet.random([5, 8, 3], generator=torch.Generator().manual_seed(0))
    path = tmp_path / "net.json"
    net.save(path)
    # 5 inputs cannot be n + m with n = 3 and m = 1
    assert run_cli("reach-ct", "--net", path, "--m", "1", "--out", tmp_path / "o") == EXIT_DIMENSION
    assert "dimension" in capsys.readouterr().err
    assert run_cli("reach-dt", "--system", "pendulum", "--x0-center", "0,0,0",
                   "--out", tmp_path / "o") == EXIT_DIMENSION
    assert not (tmp_path / "o").exists()


def test_config_errors(tmp_path):
    assert run_cli("reach-dt", "--example", "nope", "--out", tmp_path) == EXIT_CONFIG
    assert run_cli("reach-ct", "--system", "unicycle", "--out", tmp_path) == EXIT_CONFIG
    assert run_cli("split", "--engine", "dt", "--out", tmp_path) == EXIT_CONFIG
    assert run_cli("mpc", "--out", tmp_path) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        run_cli("no-such-command")


def test_sound_rounding_contains_default(tmp_path):
    run_cli("reach-dt", "--example", "affine", "--out", tmp_path / "a")
    run_cli("reach-dt", "--example", "affine", "--sound-rounding", "--out", tmp_path / "b")
    plain = json.loads((tmp_path / "a" / "tube.json").read_text())
    sound = json.loads((tmp_path / "b" / "tube.json").read_text())
    assert json.dumps(plain) != json.dumps(sound)
    lo_p = torch.tensor(plain["lo"]) if "lo" in plain else None
    if lo_p is not None:
        assert torch.all(torch.tensor(sound["lo"]) <= lo_p)
        assert torch.all(torch.tensor(sound["hi"]) >= torch.tensor(plain["hi"]))


def _summary(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_reach_ct_and_refine_smoke(tmp_path, capsys):
    assert run_cli("reach-ct", "--steps", "3", "--baseline", "interval", "--out", tmp_path / "ct") == EXIT_OK
    s = _summary(capsys)
    assert s["volume"] > 0
    assert {"tube.csv", "baseline.csv", "manifest.json"} <= {f.name for f in (tmp_path / "ct").iterdir()}
    assert run_cli("refine", "--steps", "3", "--grad-iters", "2", "--inputs", "10,0,0,0",
                   "--out", tmp_path / "rf") == EXIT_OK
    s = _summary(capsys)
    assert s["volume"] <= s["initial_volume"]


def test_reach_cl_smoke(tmp_path):
    ctl = MLPNet.random([12, 8, 4], generator=torch.Generator().manual_seed(1), scale=0.1)
    ctl.save(tmp_path / "ctl.json")
    assert run_cli("reach-cl", "--controller", tmp_path / "ctl.json", "--steps", "2", "--K", "2",
                   "--eps", "0.01", "--out", tmp_path / "cl") == EXIT_OK
    bad = MLPNet.random([11, 8, 4], generator=torch.Generator().manual_seed(1))
    bad.save(tmp_path / "bad.json")
    assert run_cli("reach-cl", "--controller", tmp_path / "bad.json", "--out", tmp_path / "x") == EXIT_DIMENSION


def test_arm_split_smoke(tmp_path):
    assert run_cli("split", "--engine", "dt", "--system", "arm", "--steps", "3", "--split-preset", "dims:10,11:4",
                   "--out", tmp_path / "a") == EXIT_OK
    assert run_cli("split", "--engine", "dt", "--system", "arm", "--steps", "3",
                   "--split", "x".join(["1"] * 10 + ["2"] + ["1"] * 29), "--out", tmp_path / "b") == EXIT_OK


def test_training_commands_smoke(tmp_path, capsys):
    assert run_cli("train-dt", "--episodes", "16", "--iters", "3", "--out", tmp_path / "dt") == EXIT_OK
    MLPNet.load(tmp_path / "dt" / "model.json")
    assert (tmp_path / "dt" / "train_log.csv").read_text().startswith("iter")
    assert run_cli("train-ctl", "--episodes", "8", "--iters", "2", "--out", tmp_path / "ctl") == EXIT_OK


def test_mpc_and_bench_smoke(tmp_path, capsys):
    scenario = {"x0": [0.0, 0.0, 0.0], "goal": [1.0, 0.0, 0.0], "horizon": 3,
                "constraints": [{"type": "sphere_avoid", "center": [0.5, 0.5, 0.0], "radius": 0.2}],
                "sampler": {"population": 16, "iters": 2, "refine_iters": 1},
                "mpc": {"steps": 3}}
    assert run_cli("mpc", "--scenario", json.dumps(scenario), "--out", tmp_path / "m") == EXIT_OK
    assert (tmp_path / "m" / "mpc_log.csv").read_text().startswith("step,state")
    capsys.readouterr()
    assert run_cli("bench", "--steps", "2", "--out", tmp_path / "b") == EXIT_OK
    assert _summary(capsys)["ratio"] > 0
