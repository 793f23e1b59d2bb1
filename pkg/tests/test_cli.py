import csv
import json

import pytest
import yaml

from rme.cli import main


@pytest.fixture
def short_static(tmp_path):
    path = tmp_path / "short.yaml"
    path.write_text(yaml.safe_dump({
        "schema_version": 1, "name": "short_static", "duration": 1.3, "seed": 0,
        "events": [{"type": "attach_mass", "t": 0.3, "m": 0.7, "r": [0.06, 0.0, 0.13]}],
    }))
    return path


def test_simulate_twice_is_byte_identical(tmp_path, short_static):
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(short_static), "--seed", "42", "--out", str(tmp_path / name)]) == 0
    for art in ("runlog.csv", "runlog.json"):
        assert (tmp_path / "a" / art).read_bytes() == (tmp_path / "b" / art).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 42 and len(manifest["config_hash"]) == 64
    assert "windows/window_0000.npz" in manifest["artifacts"]


def test_estimate_on_logged_window(tmp_path, short_static):
    assert main(["simulate", "--config", str(short_static), "--out", str(tmp_path / "sim")]) == 0
    window = tmp_path / "sim" / "windows" / "window_0000"
    for prior in ("nn", "zero"):
        out = tmp_path / prior
        assert main(["estimate", "--window", str(window), "--prior", prior, "--out", str(out)]) == 0
        post = json.loads((out / "posterior.json").read_text())
        assert {"mu", "sigma", "iterations", "wall_ms"} <= set(post)
        assert post["mu"][0] == pytest.approx(0.7, abs=0.1)


def test_replay_reproduces_artifacts(tmp_path, short_static):
    assert main(["simulate", "--config", str(short_static), "--out", str(tmp_path / "run")]) == 0
    assert main(["replay", str(tmp_path / "run" / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    assert json.loads((tmp_path / "again" / "replay.json").read_text())["identical"]


def test_replay_detects_tampering(tmp_path, short_static, capsys):
    assert main(["simulate", "--config", str(short_static), "--out", str(tmp_path / "run")]) == 0
    manifest = tmp_path / "run" / "manifest.json"
    data = json.loads(manifest.read_text())
    data["artifacts"]["runlog.csv"] = "0" * 64
    manifest.write_text(json.dumps(data))
    assert main(["replay", str(manifest), "--out", str(tmp_path / "again")]) == 1
    assert "runlog.csv" in capsys.readouterr().err


def test_ablate_prior_table_layout(tmp_path):
    assert main(["ablate-prior", "--n", "2", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "ablation_prior.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["prior"] for r in rows] == ["nn", "zero"]
    assert [k for k in rows[0] if k.startswith("mse_")] == ["mse_m", "mse_r_x", "mse_r_y", "mse_r_z"]


def test_usage_error_exits_2(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path)]) == 2
    assert main(["no-such-command"]) == 2


def test_domain_error_is_one_line_exit_1(tmp_path, capsys):
    assert main(["simulate", "--config", "no_such_scenario", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: DomainError:")


def test_bad_weights_file(tmp_path, capsys):
    bad = tmp_path / "w.bin"
    bad.write_bytes(b"junk")
    code = main(["ablate-prior", "--n", "1", "--weights", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error: WeightsFormatError:")
