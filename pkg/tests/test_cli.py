import json
import subprocess
import sys

import pytest

from uposi.cli import main

TINY_UP = ["--set", "trpo.iterations=2", "--set", "trpo.samples_per_iteration=400", "--set", "trpo.n_envs=4",
           "--set", "trpo.hidden=[8,8]", "--set", "trpo.baseline_hidden=[8]", "--set", "trpo.checkpoint_every=1"]
TINY_OSI = ["--set", "osi.iterations=2", "--set", "osi.mu_samples=4", "--set", "osi.seconds=1.0",
            "--set", "osi.hidden=[16]", "--set", "osi.epochs=2", "--set", "osi.heldout_mu_samples=2",
            "--set", "osi.heldout_seconds=0.5", "--set", "eval.round_grid_points=2", "--set", "eval.round_n_eval=1",
            "--set", "eval.max_steps=20"]


def read_all(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["train-up", "dpend", "--out", str(root / "up"), *TINY_UP]) == 0
    assert main(["train-osi", "dpend", "--up", str(root / "up" / "policy.bin"), "--out", str(root / "osi"),
                 *TINY_OSI]) == 0
    return root


def test_train_up_outputs_and_manifest(trained):
    files = read_all(trained / "up")
    for name in ("policy.bin", "policy_iter0001.bin", "train_log.csv", "config.yaml", "training.png",
                 "manifest.json"):
        assert name in files
    m = json.loads(files["manifest.json"])
    assert m["seed"] == 0 and "policy.bin" in m["outputs"]


def test_train_up_is_byte_reproducible(trained, tmp_path):
    assert main(["train-up", "dpend", "--out", str(tmp_path), *TINY_UP]) == 0
    assert read_all(tmp_path) == read_all(trained / "up")


def test_train_osi_outputs(trained):
    files = read_all(trained / "osi")
    for name in ("osi.bin", "osi_log.csv", "osi_rounds.png", "manifest.json"):
        assert name in files
    assert b"up_osi_perf" in files["osi_log.csv"].splitlines()[0]


def test_eval_sweep_is_byte_reproducible(trained, tmp_path):
    args = ["eval", "sweep", "dpend", "--up", str(trained / "up" / "policy.bin"),
            "--osi", str(trained / "osi" / "osi.bin"), "--fixed", "0.0", "--grid", "3", "--n-eval", "2",
            "--set", "eval.max_steps=30"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a, b = read_all(tmp_path / "a"), read_all(tmp_path / "b")
    assert a == b
    assert {"sweep_UP-true.csv", "sweep_UP-OSI.csv", "sweep_UP-fixed_0_0.csv", "sweep.png"} <= set(a)


def test_usage_errors_exit_2(trained, tmp_path):
    assert main(["eval", "sweep", "dpend", "--up", str(tmp_path / "missing.bin"), "--out", str(tmp_path)]) == 2
    assert main(["train-up", "dpend", "--set", "trpo.bogus=1", "--out", str(tmp_path)]) == 2
    assert main(["eval", "extrapolate", "dpend", "--up", str(trained / "up" / "policy.bin"),
                 "--out", str(tmp_path)]) == 2
    assert main(["eval", "friction-track", "hopper", "--out", str(tmp_path)]) == 2
    # a dpend checkpoint does not fit the cartpole task
    assert main(["eval", "sweep", "cartpole", "--up", str(trained / "up" / "policy.bin"),
                 "--out", str(tmp_path)]) == 2


def test_verify_numeric_exits_zero(capsys):
    assert main(["verify", "--only", "numeric"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "uposi.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "train-up" in r.stdout
