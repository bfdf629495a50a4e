import json
import subprocess
import sys

import numpy as np
import pytest

from tdsnet.activations import read_ppm
from tdsnet.cli import main
from tdsnet.config import RunConfig, parse_value, read_config_file
from tdsnet.network import ConfigError

MICRO_TEXT = """\
# micro geometry so every command runs in seconds
frames = 4
height = 16
width = 16
patch = 4
layers = 2
frozen_dim = 16
frozen_heads = 2
side_dim = 8
side_heads = 2
t_raw = 8
sprite = 4
clips_per_class = 2
val_per_class = 1
epochs = 1
warmup_epochs = 0
batch_size = 4
"""


@pytest.fixture
def micro_conf(tmp_path):
    p = tmp_path / "micro.conf"
    p.write_text(MICRO_TEXT)
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def test_parse_values():
    assert parse_value("td_layer_mask", "1010") == (True, False, True, False)
    assert parse_value("td_layer_mask", "all") is None
    assert parse_value("velocities", "3,-3") == (3, -3)
    assert parse_value("cls_shift_enabled", "off") is False
    assert parse_value("alpha", "0.5") == 0.5
    with pytest.raises(ConfigError):
        parse_value("epochs", "many")
    with pytest.raises(ConfigError):
        parse_value("nonsense", "1")


def test_config_file_round_trip(tmp_path, micro_conf):
    cfg = RunConfig.preset("tiny").update(read_config_file(micro_conf)).validate()
    out = tmp_path / "again.conf"
    out.write_text(cfg.to_text())
    assert RunConfig.preset("paper").update(read_config_file(out)) == cfg


def test_unknown_key_in_file_is_rejected(tmp_path):
    p = tmp_path / "bad.conf"
    p.write_text("warp_speed = 9\n")
    with pytest.raises(ConfigError):
        read_config_file(p)


def test_invalid_arguments_exit_1(tmp_path, micro_conf):
    assert run("train", "--out", tmp_path, "--bogus", "1") == 1
    assert run("train", "--out", tmp_path, "--side-dim", "7", "--config", micro_conf) == 1
    assert run("train", "--out", tmp_path, "--preset", "huge") == 1
    assert run("profile", "--out", tmp_path, "--topology", "side,lora", "--config", micro_conf) == 1


def test_runtime_failures_exit_2(tmp_path, micro_conf):
    bad = tmp_path / "bad.tdsc"
    bad.write_bytes(b"nope")
    assert run("eval", "--config", micro_conf, "--out", tmp_path, "--checkpoint", bad) == 2
    assert run("train", "--config", micro_conf, "--out", tmp_path, "--data", tmp_path / "missing") == 2


def test_seed_precedence(monkeypatch, tmp_path, micro_conf, capsys):
    monkeypatch.setenv("TDS_SEED", "5")
    assert run("gen-data", "--config", micro_conf, "--out", tmp_path) == 0
    assert "seed = 5" in capsys.readouterr().out
    assert run("gen-data", "--config", micro_conf, "--out", tmp_path, "--seed", "9") == 0
    assert "seed = 9" in capsys.readouterr().out


def test_gen_train_eval_pipeline(tmp_path, micro_conf, capsys):
    data = tmp_path / "data"
    assert run("gen-data", "--config", micro_conf, "--out", data) == 0
    capsys.readouterr()
    assert run("train", "--config", micro_conf, "--out", tmp_path / "run", "--data", data) == 0
    out = capsys.readouterr().out
    assert out.startswith("# command = train\n")
    epoch_line = [s for s in out.splitlines() if s.startswith("{")][0]
    assert set(json.loads(epoch_line)) == {"epoch", "loss", "top1", "top5", "lr", "seconds"}
    assert run("eval", "--config", micro_conf, "--out", tmp_path / "ev", "--data", data,
               "--checkpoint", tmp_path / "run" / "checkpoint.tdsc") == 0
    res = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert 0.0 <= res["train"]["top1"] <= 100.0


def test_gradcheck_command(tmp_path, micro_conf):
    assert run("gradcheck", "--config", micro_conf, "--out", tmp_path, "--max-entries", "2") == 0
    res = json.loads((tmp_path / "gradcheck.json").read_text())
    assert res["max_relative_error"] < 1e-4
    assert res["probes"] == 2 * res["tensors"]


def test_profile_command(tmp_path, micro_conf, capsys):
    assert run("profile", "--config", micro_conf, "--out", tmp_path) == 0
    assert "strictly increase" in capsys.readouterr().out
    rep = json.loads((tmp_path / "profile.json").read_text())
    assert [r["topology"] for r in rep["topologies"]] == ["side", "inbackbone", "full"]
    assert (tmp_path / "profile.txt").exists()


def test_ablate_command(tmp_path, micro_conf):
    assert run("ablate", "--config", micro_conf, "--out", tmp_path, "--axis", "window-radius", "--values", "0,1") == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) == {"window_radius=0", "window_radius=1"}
    assert (tmp_path / "window_radius=1" / "metrics.jsonl").exists()
    assert run("ablate", "--config", micro_conf, "--out", tmp_path / "ab", "--axis", "alpha-beta",
               "--values", "1:1,1:0") == 0
    assert run("ablate", "--config", micro_conf, "--out", tmp_path, "--axis", "seed", "--values", "1") == 1


def test_dump_activations(tmp_path, micro_conf):
    assert run("dump-activations", "--config", micro_conf, "--out", tmp_path, "--scale", "2") == 0
    img = read_ppm(tmp_path / "layer1_frame00.ppm")
    assert img.shape == (8, 3 * 8 + 2, 3)
    maps = np.load(tmp_path / "layer1_maps.npz")
    assert maps["motion"].shape == (4, 4, 4) and maps["motion"].any()
    assert run("dump-activations", "--config", micro_conf, "--out", tmp_path / "s", "--static") == 0
    assert not np.load(tmp_path / "s" / "layer1_maps.npz")["motion"].any()
    assert run("dump-activations", "--config", micro_conf, "--out", tmp_path, "--layer", "5") == 1


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "tdsnet", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gradcheck" in r.stdout
