import json

import numpy as np
import pytest

from ratelab.cli import main
from ratelab.config import Config, ConfigError, config_from_dict, load_config
from ratelab.control import MANUAL_TUNE_GAINS
from ratelab.policy import checkpoint_dict, init_policy


def _write(path, obj):
    path.write_text(json.dumps(obj, indent=2))
    return str(path)


@pytest.fixture
def small_config(tmp_path):
    d = Config().to_dict()
    d["env"]["episode_time"] = 0.5
    d["ppo"].update(horizon=64, minibatch_size=32, epochs=2, total_steps=2000, n_seeds=2)
    d["pid"]["gains"] = MANUAL_TUNE_GAINS.to_dict()
    d["eval"].update(bench_samples=200, validation_time=0.3, verify_probes=200)
    return _write(tmp_path / "small.json", d)


@pytest.fixture
def checkpoint(tmp_path):
    p = init_policy(np.random.default_rng(0))
    return _write(tmp_path / "ck.json", checkpoint_dict(p))


def test_dump_defaults_round_trip(tmp_path, capsys):
    assert main(["config", "--dump-defaults"]) == 0
    text = capsys.readouterr().out
    path = tmp_path / "defaults.json"
    path.write_text(text)
    assert load_config(str(path)) == Config()


def test_partial_config_fills_defaults(tmp_path):
    cfg = load_config(_write(tmp_path / "c.json", {"ppo": {"stepsize": 0.01}}))
    assert cfg.ppo.stepsize == 0.01
    assert cfg.env == Config().env


def test_unknown_key_reports_line(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{\n  "ppo": {\n    "stepsize": 0.01,\n    "bogus": 1\n  }\n}\n')
    with pytest.raises(ConfigError) as info:
        load_config(str(path))
    assert f"{path}:4:" in str(info.value)
    assert "bogus" in str(info.value)


def test_unknown_section():
    with pytest.raises(ConfigError, match="nonsense"):
        config_from_dict({"nonsense": {}})


def test_syntax_error_exit_code(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "ppo": {\n    "stepsize": ,\n  }\n}\n')
    assert main(["config", "--config", str(path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("ratelab: error: config:") and f"{path}:3:" in err


def test_usage_errors_exit_2(capsys):
    for argv in ([], ["fly"], ["train", "--steps", "many"], ["export"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2
    capsys.readouterr()


def test_runtime_error_is_one_line(tmp_path, capsys):
    bad = tmp_path / "ck.json"
    bad.write_text("{}")
    assert main(["export", "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("ratelab: error:")


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_train_is_reproducible_by_hash(tmp_path, small_config, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--seed", "3", "--config", small_config, "--out", str(a)]) == 0
    assert main(["train", "--seed", "3", "--config", small_config, "--out", str(b)]) == 0
    ma, mb = _manifest(a), _manifest(b)
    assert ma["files"] == mb["files"]
    assert set(ma["files"]) == {"checkpoint.json", "checkpoint_seed3.json", "checkpoint_seed4.json",
                                "rewards_seed3.csv", "rewards_seed4.csv"}
    assert ma["seeds"] == [3, 4]
    assert "selected seed" in capsys.readouterr().out


def test_manifest_can_be_fed_back(tmp_path, small_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", small_config, "--out", str(a)]) == 0
    assert main(["train", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert _manifest(a)["files"] == _manifest(b)["files"]


def test_export_with_verification(tmp_path, checkpoint, small_config):
    out = tmp_path / "x"
    argv = ["export", "--checkpoint", checkpoint, "--config", small_config, "--out", str(out),
            "--emit-source", str(out / "nn.c"), "--emit-weights", str(out / "nn.bin"),
            "--verify", "200"]
    assert main(argv) == 0
    report = json.loads((out / "export_report.json").read_text())
    assert report["verify_model"]["passed"]
    assert report["verify_compiled"].get("passed", True)
    assert report["weight_constants"] == 1412
    assert (out / "nn.c").read_text().startswith("/*")
    assert set(_manifest(out)["files"]) >= {"nn.c", "nn.bin", "export_report.json"}


def test_replay_compare_bench(tmp_path, checkpoint, small_config):
    out = tmp_path / "r"
    common = ["--config", small_config, "--out", str(out)]
    assert main(["replay", "--checkpoint", checkpoint, "--script", "validation", *common]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) >= {"per_axis", "average"}
    assert main(["replay", "--log", str(out / "flight_log.csv"), *common]) == 0
    assert main(["compare", "--checkpoint", checkpoint, "--script", "validation", *common]) == 0
    assert (out / "compare_trace.csv").exists()
    assert main(["bench", "--checkpoint", checkpoint, "--n", "200", *common]) == 0
    bench = json.loads((out / "bench.json").read_text())
    for t in bench["targets"].values():
        assert t["bcet_us"] <= t["wcet_us"]
        assert 0.0 <= t["variability_window"] <= 1.0


def test_tune_pid_writes_gains(tmp_path, capsys):
    out = tmp_path / "z"
    assert main(["tune-pid", "--out", str(out)]) == 0
    gains = json.loads((out / "pid_gains.json").read_text())
    assert set(gains["gains"]) == {"roll", "pitch", "yaw"}
    assert "K_u" in capsys.readouterr().out
