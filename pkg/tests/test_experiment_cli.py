import json
import shutil

import numpy as np
import pytest

from candyman.cli import main
from candyman.dataset import load_dataset
from candyman.dynamics import load_model, read_trajectory_csv, save_model
from candyman.experiment import ConfigError, load_config, preset_names


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def s1_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("s1")
    assert run("generate", "--config", "s1", "--out", root / "data") == 0
    assert run("train", "--config", "s1", "--data", root / "data", "--out", root / "model") == 0
    assert run("rollout", "--model", root / "model", "--data", root / "data", "--steps", 200,
               "--out", root / "traj.csv") == 0
    return root


# -- configs ------------------------------------------------------------------


def test_every_preset_loads():
    for name in preset_names():
        cfg = load_config(name)
        assert cfg.name == name


def test_bursting_preset_contents():
    cfg = load_config("s6")
    assert cfg.n_charts == 6 and cfg.latent_dim == 3
    assert cfg.chart.whiten and cfg.chart.mode == "pca_anchored" and cfg.chart.alpha == 1.0
    assert cfg.system == "ks_bursting"


def test_unknown_keys_rejected(tmp_path):
    doc = load_config("s1").to_json()
    doc["epochs"] = 5
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_config(p)
    doc = load_config("s1").to_json()
    doc["autoencoder"]["train"]["lr"] = 0.1
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_config(p)


def test_mismatched_latent_dim_rejected(tmp_path):
    doc = load_config("s1").to_json()
    doc["latent_dim"] = 2
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_config(p)


# -- generate -------------------------------------------------------------------


def test_generate_shapes(tmp_path, s1_run):
    ds = load_dataset(s1_run / "data" / "train")
    assert ds.points.shape == (40, 2)
    assert run("generate", "--config", "s3", "--out", tmp_path / "s3") == 0
    assert load_dataset(tmp_path / "s3" / "train").points.shape == (1000, 3)


def test_generate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--config", "s2", "--seed", 7, "--out", tmp_path / d) == 0
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_existing_output_needs_force(tmp_path):
    out = tmp_path / "d"
    assert run("generate", "--config", "s1", "--out", out) == 0
    assert run("generate", "--config", "s1", "--out", out) == 4
    assert run("generate", "--config", "s1", "--out", out, "--force") == 0


# -- exit codes -------------------------------------------------------------------


def test_config_error_exit(tmp_path):
    assert run("generate", "--config", tmp_path / "missing.json", "--out", tmp_path / "x") == 3
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert run("generate", "--config", p, "--out", tmp_path / "x") == 3


def test_argparse_exit():
    with pytest.raises(SystemExit) as e:
        main(["train", "--config", "s1"])
    assert e.value.code == 2


def test_missing_data_exit(tmp_path):
    assert run("train", "--config", "s1", "--data", tmp_path / "nothing", "--out", tmp_path / "m") == 4


def test_tampered_data_exit(tmp_path, s1_run):
    shutil.copytree(s1_run / "data", tmp_path / "data")
    csv = tmp_path / "data" / "train.csv"
    lines = csv.read_text().splitlines()
    lines[3] = lines[3].replace("0.", "1.", 1)
    csv.write_text("\n".join(lines) + "\n")
    assert run("train", "--config", "s1", "--data", tmp_path / "data", "--out", tmp_path / "m") == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_exit(tmp_path, s1_run):
    doc = load_config("s1").to_json()
    doc["autoencoder"]["train"]["lr_init"] = 1e300
    p = tmp_path / "wild.json"
    p.write_text(json.dumps(doc))
    assert run("train", "--config", p, "--data", s1_run / "data", "--out", tmp_path / "m") == 5


def test_rollout_divergence_exit(tmp_path, s1_run):
    model = load_model(s1_run / "model")
    for cd in model.dynamics:
        cd.f.biases[-1] = cd.f.biases[-1] + np.nan
    save_model(model, tmp_path / "broken")
    code = run("rollout", "--model", tmp_path / "broken", "--data", s1_run / "data", "--steps", 5,
               "--out", tmp_path / "t.csv")
    assert code == 6


def test_unknown_diagnostic_exit(tmp_path, s1_run):
    assert run("eval", "--model", s1_run / "model", "--diagnostics", "bogus", "--out", tmp_path / "e") == 3


# -- train / rollout / eval ----------------------------------------------------------


def test_chart_override(tmp_path, s1_run):
    assert run("train", "--config", "s1", "--data", s1_run / "data", "--charts", 1, "--out", tmp_path / "m") == 0
    assert len(load_model(tmp_path / "m").atlas) == 1


def test_trajectory_file(s1_run):
    t = read_trajectory_csv(s1_run / "traj.csv")
    assert len(t) == 201 and t.ambient.shape == (201, 2)
    assert np.all(np.abs(np.linalg.norm(t.ambient, axis=1) - 1) < 0.05)


def test_eval_outputs(tmp_path, s1_run):
    out = tmp_path / "e"
    code = run("eval", "--model", s1_run / "model", "--trajectory", s1_run / "traj.csv",
               "--diagnostics", "mse,period,smoothness", "--out", out)
    assert code == 0
    for name in ("mse.csv", "period.csv", "smoothness.csv", "summary.txt"):
        assert (out / name).is_file()
    rows = (out / "period.csv").read_text().splitlines()
    assert rows[0] == "kind,periodic,period,uncertainty"
    kind, periodic, period, _ = rows[1].split(",")
    assert kind == "recurrence" and periodic == "1" and abs(float(period) - 40) <= 1


def test_eval_needs_inputs(tmp_path):
    assert run("eval", "--diagnostics", "period", "--out", tmp_path / "e") == 3


def test_train_twice_identical(tmp_path, s1_run):
    assert run("train", "--config", "s1", "--data", s1_run / "data", "--out", tmp_path / "m") == 0
    for f in sorted(p.name for p in (s1_run / "model").iterdir()):
        assert (tmp_path / "m" / f).read_bytes() == (s1_run / "model" / f).read_bytes(), f
