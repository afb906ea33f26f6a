import json
from pathlib import Path

import numpy as np
import pytest

from kdarek.cli import build_parser, main
from kdarek.config import (
    SafeCtrlConfig,
    TrainCommandConfig,
    apply_override,
    config_hash,
    get_runtime_config,
    load_config,
)
from kdarek.errors import ConfigError, ModelFileError
from kdarek.serialization import SCHEMA, decode_model, encode_model, load_model, save_model, write_csv


# ------------------------------- config ---------------------------------- #

def test_config_syntax_error_reports_line_and_column(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n    "seed": 1,\n    "trials": ,\n}\n')
    with pytest.raises(ConfigError, match=r"bad\.json:3:\d+"):
        load_config(path, SafeCtrlConfig)


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "extra.json"
    path.write_text(json.dumps({"seed": 1, "world": {"gravity": 9.81}}))
    with pytest.raises(ConfigError, match="world.gravity"):
        load_config(path, SafeCtrlConfig)


def test_config_rejects_out_of_range_values():
    with pytest.raises(ConfigError, match="cbf.gamma"):
        load_config(None, SafeCtrlConfig, {"cbf.gamma": "1.5"})


def test_overrides_are_parsed_as_json():
    cfg = load_config(None, TrainCommandConfig, {"train.epochs": "7", "kdarek.widths": "[1, 5, 5]",
                                                 "train.optimizer": "adam"})
    assert cfg.train.epochs == 7
    assert cfg.kdarek.widths == [1, 5, 5]
    assert cfg.train.optimizer == "adam"


def test_apply_override_refuses_non_section():
    data = {"seed": 1}
    with pytest.raises(ConfigError):
        apply_override(data, "seed.value", 2)
    apply_override(data, "world.dt", 0.05)
    assert data == {"seed": 1, "world": {"dt": 0.05}}


def test_config_hash_tracks_content():
    a = load_config(None, TrainCommandConfig)
    b = load_config(None, TrainCommandConfig, {"seed": 1})
    assert config_hash(a) == config_hash(load_config(None, TrainCommandConfig))
    assert config_hash(a) != config_hash(b)


def test_runtime_config_from_environment(monkeypatch):
    monkeypatch.setenv("KDAREK_JOBS", "3")
    monkeypatch.setenv("KDAREK_LOG_LEVEL", "debug")
    monkeypatch.delenv("KDAREK_BUILD_ID", raising=False)
    runtime = get_runtime_config()
    assert runtime["jobs"] == 3 and runtime["log_level"] == "DEBUG" and runtime["build_id"] is None

    monkeypatch.setenv("KDAREK_JOBS", "many")
    with pytest.raises(ValueError):
        get_runtime_config()
    monkeypatch.setenv("KDAREK_JOBS", "1")
    monkeypatch.setenv("KDAREK_LOG_LEVEL", "LOUD")
    with pytest.raises(ValueError):
        get_runtime_config()


# ------------------------------ exit codes ------------------------------- #

def test_safectrl_requires_seed():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["safectrl"])
    assert info.value.code == 2


def test_exit_code_for_bad_config(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--set", "train.epochs=0", "--out", str(tmp_path)]) == 2


def test_exit_code_for_bad_runtime_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("KDAREK_JOBS", "0")
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_exit_code_for_missing_model(tmp_path):
    assert main(["bound", "--model", str(tmp_path / "nope.json"), "--x", "0", "--out", str(tmp_path)]) == 3


def test_exit_code_for_corrupt_model(tmp_path):
    path = tmp_path / "model.json"
    path.write_text('{"schema": "kdarek/v1", "kind": "kdarek"')
    assert main(["bound", "--model", str(path), "--x", "0", "--out", str(tmp_path)]) == 3
    with pytest.raises(ModelFileError):
        load_model(path)


def test_exit_code_for_diverging_training(tmp_path):
    argv = ["train", "--out", str(tmp_path), "--set", "train.optimizer=adam", "--set", "train.learning_rate=1e300",
            "--set", "train.epochs=5"]
    assert main(argv) == 4


def test_exit_code_for_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    argv = ["train", "--out", str(blocker / "sub"), "--set", "train.epochs=2", "--set", "data.n_train=20"]
    assert main(argv) == 5


# ---------------------------- model files -------------------------------- #

@pytest.fixture(scope="module")
def trained_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    argv = ["train", "--out", str(out), "--seed", "2", "--set", "train.epochs=20", "--set", "train.optimizer=adam",
            "--set", "train.learning_rate=0.05", "--set", "data.n_train=30"]
    assert main(argv) == 0
    return out


def test_train_writes_model_and_manifest(trained_model):
    manifest = json.loads((trained_model / "manifest.json").read_text())
    assert manifest["schema"] == SCHEMA
    assert manifest["manifest"]["command"] == "train"
    assert manifest["manifest"]["seed"] == 2
    assert "train" in manifest["manifest"]["timings"]
    assert (trained_model / "model.json").exists()


def test_model_round_trip_preserves_bounds(trained_model):
    estimator = load_model(trained_model / "model.json")
    again = decode_model(json.loads(json.dumps(encode_model(estimator))))
    for x in (-7.0, 0.0, 0.4, 5.5):
        a, b = estimator.bound([x]), again.bound([x])
        np.testing.assert_allclose(a.total, b.total, rtol=1e-12)
        np.testing.assert_allclose(a.prediction, b.prediction, rtol=1e-12)
        assert a.nearest_knot_ids == b.nearest_knot_ids


def test_bound_command_prints_decomposition(trained_model, tmp_path, capsys):
    argv = ["bound", "--model", str(trained_model / "model.json"), "--x", "0.5", "--x", "-1", "--out", str(tmp_path)]
    assert main(argv) == 0
    printed = json.loads(capsys.readouterr().out)
    assert [b["x"] for b in printed["bounds"]] == [[0.5], [-1.0]]
    for b in printed["bounds"]:
        assert b["total"][0] == pytest.approx(b["spline_term"][0] + b["propagation_gain"] * b["mlp_term"])
    stored = json.loads((tmp_path / "bound.json").read_text())
    assert stored["bounds"] == printed["bounds"]


def test_bound_command_checks_point_dimension(trained_model, tmp_path):
    argv = ["bound", "--model", str(trained_model / "model.json"), "--x", "0.5,1.0", "--out", str(tmp_path)]
    assert main(argv) == 2
    argv = ["bound", "--model", str(trained_model / "model.json"), "--x", "abc", "--out", str(tmp_path)]
    assert main(argv) == 2


def test_gp_and_darek_round_trip(tmp_path):
    from kdarek.baselines import DarekSettings, GpHyper, fit_darek, gp_fit, gp_predict
    from kdarek.netcore import TrainConfig

    X = np.linspace(-1, 1, 12)[:, None]
    gp = gp_fit(X, np.sin(X).ravel(), GpHyper())
    loaded = load_model(save_model(tmp_path / "gp.json", gp))
    np.testing.assert_allclose(gp_predict(loaded, X)[0], gp_predict(gp, X)[0])

    darek, _ = fit_darek(X, X ** 2, DarekSettings(), TrainConfig(epochs=5))
    loaded = load_model(save_model(tmp_path / "darek.json", darek))
    np.testing.assert_allclose(loaded.bound([0.3]).total, darek.bound([0.3]).total, rtol=1e-12)

def test_model_file_keeps_derived_knot_data(trained_model):
    document = json.loads((trained_model / "model.json").read_text())
    estimator = decode_model(document)
    np.testing.assert_allclose(np.array(document["knots"]["features"]), estimator.triple.features, rtol=1e-12)
    np.testing.assert_array_equal(np.array(document["knots"]["permutations"]), estimator.triple.permutations)
    np.testing.assert_allclose(np.array(document["residuals"]), estimator.residuals.values, rtol=1e-12, atol=1e-15)


def test_rebudgeted_model_round_trips(trained_model):
    estimator = load_model(trained_model / "model.json").rebudget(4.0)
    again = decode_model(json.loads(json.dumps(encode_model(estimator))))
    assert again.budget == estimator.budget
    np.testing.assert_allclose(again.bound([0.4]).total, estimator.bound([0.4]).total, rtol=1e-12)


@pytest.mark.parametrize("path", [("knots", "features"), ("knots", "sorted_features"), ("residuals",)])
def test_tampered_kdarek_file_is_rejected(trained_model, path):
    document = json.loads((trained_model / "model.json").read_text())
    node = document
    for key in path[:-1]:
        node = node[key]
    values = np.array(node[path[-1]], dtype=float)
    values.flat[0] += 0.5
    node[path[-1]] = values.tolist()
    with pytest.raises(ModelFileError):
        decode_model(document)


def test_tampered_gp_and_darek_files_are_rejected():
    from kdarek.baselines import DarekSettings, GpHyper, fit_darek, gp_fit
    from kdarek.netcore import TrainConfig

    X = np.linspace(-1, 1, 12)[:, None]
    document = encode_model(gp_fit(X, np.sin(X).ravel(), GpHyper()))
    document = json.loads(json.dumps({"schema": SCHEMA, **document}))
    decode_model(document)
    document["chol"][0][0] += 0.5
    with pytest.raises(ModelFileError):
        decode_model(document)

    darek, _ = fit_darek(X, X ** 2, DarekSettings(), TrainConfig(epochs=5))
    document = json.loads(json.dumps({"schema": SCHEMA, **encode_model(darek)}))
    decode_model(document)
    document["hidden"]["residuals"][0][0] += 0.5
    with pytest.raises(ModelFileError):
        decode_model(document)



def test_unknown_schema_is_rejected():
    with pytest.raises(ModelFileError):
        decode_model({"schema": "other/v9", "kind": "gp"})
    with pytest.raises(ModelFileError):
        decode_model({"schema": SCHEMA, "kind": "forest"})


# ------------------------------- outputs --------------------------------- #

def test_csv_uses_lf_and_round_trip_floats(tmp_path):
    path = write_csv(tmp_path / "out.csv", ["a", "b", "c"], [[0.1, 2, None], [1e-17, True, "x"]])
    raw = Path(path).read_bytes()
    assert b"\r\n" not in raw
    assert raw.decode() == "a,b,c\n0.1,2,\n1e-17,True,x\n"


@pytest.mark.slow
def test_cosine_outputs_are_reproducible(tmp_path):
    def run(out):
        argv = ["cosine", "--out", str(out), "--set", "train.epochs=30", "--set", "train.optimizer=adam",
                "--set", "ensemble.members=2", "--set", "data.n_test=50", "--set", "data.curve_points=40"]
        assert main(argv) == 0
        return out

    first, second = run(tmp_path / "a"), run(tmp_path / "b")
    for name in ("cosine_summary.csv", "cosine_curves.csv", "cosine_summary.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    first_manifest = json.loads((first / "manifest.json").read_text())["manifest"]
    second_manifest = json.loads((second / "manifest.json").read_text())["manifest"]
    assert first_manifest["config_hash"] == second_manifest["config_hash"]
