import json
import math
from pathlib import Path

import numpy as np
import pytest

from evaluator.cosine_evaluator import cosine_dataset, violation_percent
from evaluator.safety_evaluator import collision_ordering, noise_free_success
from evaluator.timing_evaluator import growth, speedup
from kdarek.cli import main
from kdarek.config import CosineData
from kdarek.safectrl import CampaignRow


def _row(model, d_p, d_v, success, collision):
    return CampaignRow(model, d_p, d_v, success, collision, 10 - success - collision, 50.0, 0)


def test_cosine_dataset_grids():
    data = CosineData(n_train=5, n_test=7, curve_points=3)
    X, Y, X_test, X_curve = cosine_dataset(data)
    assert X.shape == (5, 1) and X_test.shape == (7, 1)
    np.testing.assert_allclose(Y.ravel(), 10.0 * np.cos(X.ravel()))
    np.testing.assert_allclose(X_curve.ravel(), [-3 * math.pi, 0.0, 3 * math.pi])


def test_violation_percent():
    truth = np.array([0.0, 1.0, 2.0, 3.0])
    assert violation_percent(truth, truth + 0.1, np.full(4, 0.2)) == 0.0
    assert violation_percent(truth, truth + [0.1, 0.3, 0.0, 0.5], np.full(4, 0.2)) == pytest.approx(50.0)


def test_timing_ratios():
    rows = [
        {"model": "K-DAREK", "n": 500, "train_median_s": 1.0, "total_median_s": 2.0},
        {"model": "GP", "n": 500, "train_median_s": 0.5, "total_median_s": 6.0},
        {"model": "GP", "n": 5000, "train_median_s": 50.0, "total_median_s": 60.0},
    ]
    assert speedup(rows, "GP", "K-DAREK", 500) == pytest.approx(3.0)
    assert speedup(rows, "Ensemble", "K-DAREK", 500) is None
    assert growth(rows, "GP", 500, 5000) == pytest.approx(100.0)
    assert growth(rows, "K-DAREK", 500, 5000) is None


def test_campaign_summaries():
    rows = [_row("D2", 0.0, 0.0, 10, 0), _row("K-D2", 0.0, 0.0, 9, 0),
            _row("D2", 1.0, 0.0, 5, 3), _row("K-D2", 1.0, 0.0, 8, 1),
            _row("D2", 0.5, 0.0, 9, 0), _row("K-D2", 0.5, 0.0, 6, 4)]
    assert noise_free_success(rows, 10) == pytest.approx(0.9)
    assert collision_ordering(rows, "K-D2", "D2") is True
    assert collision_ordering(rows, "D2", "K-D2") is False
    assert collision_ordering(rows[:2], "K-D2", "D2") is None
    # only the d_p = 1 cells are compared
    assert collision_ordering(rows[:2] + rows[4:], "K-D2", "D2") is None


def test_bench_command_writes_timings(tmp_path):
    argv = ["bench", "--out", str(tmp_path), "--set", "sizes=[20]", "--set", "repetitions=1",
            "--set", "n_query=5", "--set", "train.epochs=3", "--set", "train.optimizer=adam",
            "--set", "train.learning_rate=0.01", "--set", "ensemble.members=2"]
    assert main(argv) == 0
    lines = (tmp_path / "timing.csv").read_text().splitlines()
    assert lines[0] == "model,n,train_median_s,inference_median_s,total_median_s"
    assert [line.split(",")[0] for line in lines[1:]] == ["K-DAREK", "GP", "Ensemble"]
    trends = json.loads((tmp_path / "timing_trends.json").read_text())["trends"]
    assert trends["n"] == 20 and trends["gp_train_growth_500_to_5000"] is None


def test_safectrl_command_runs_small_campaign(tmp_path):
    argv = ["safectrl", "--seed", "3", "--out", str(tmp_path),
            "--set", "trials=1", "--set", "position_levels=[0.0, 1.0]", "--set", "velocity_levels=[0.0]",
            "--set", 'models=["D2", "K-D2"]', "--set", "world.max_steps=15",
            "--set", "error_models.data_steps=60", "--set", "error_models.n_knots=10",
            "--set", "train.epochs=3", "--set", "dump_trajectories=true"]
    assert main(argv) == 0
    lines = (tmp_path / "safectrl_campaign.csv").read_text().splitlines()
    assert lines[0] == "model,d_p,d_v,success,collision,stuck,mean_steps,seed0"
    assert len(lines) == 1 + 2 * 2
    assert (tmp_path / "trajectory_D2.csv").exists() and (tmp_path / "trajectory_K-D2.csv").exists()
    trends = json.loads((tmp_path / "safectrl_trends.json").read_text())
    assert trends["trials"] == 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())["manifest"]
    assert manifest["seed"] == 3


@pytest.mark.slow
def test_kdarek_outpaces_baselines_at_scale(tmp_path):
    from evaluator.timing_evaluator import evaluate_timing
    from kdarek.config import BenchConfig, load_config

    cfg = load_config(Path(__file__).parents[1] / "config" / "bench.json", BenchConfig,
                      {"sizes": [5000], "repetitions": 1})
    rows, _ = evaluate_timing(cfg, tmp_path)
    assert speedup(rows, "Ensemble", "K-DAREK", 5000) >= 2.0
    assert speedup(rows, "GP", "K-DAREK", 5000) >= 4.0
