import os
import time

import numpy as np

from evaluator.cosine_evaluator import cosine_dataset
from kdarek.baselines import ensemble_predict, ensemble_train, gp_predict, gp_select
from kdarek.bounds import fit_kdarek, select_knots
from kdarek.serialization import write_csv, write_json


# ------------------------------ METRICS ---------------------------------- #

def timed(fn):
    start = time.perf_counter()
    value = fn()
    return value, time.perf_counter() - start


def speedup(rows, slow, fast, n):
    """total-time ratio slow / fast at dataset size n, None when either is missing."""
    times = {r["model"]: r["total_median_s"] for r in rows if r["n"] == n}
    if slow not in times or fast not in times or times[fast] == 0:
        return None
    return times[slow] / times[fast]


def growth(rows, model, n_small, n_large):
    times = {r["n"]: r["train_median_s"] for r in rows if r["model"] == model}
    if n_small not in times or n_large not in times or times[n_small] == 0:
        return None
    return times[n_large] / times[n_small]


# ------------------------------ DRIVER ----------------------------------- #

def _fit_and_query(name, cfg, X, Y, X_query, train_cfg):
    if name == "K-DAREK":
        triple = select_knots(X, Y, cfg.kdarek.n_knots, "quantile", cfg.kdarek.spline_order)
        estimator, train_s = timed(lambda: fit_kdarek(X, Y, cfg.kdarek, train_cfg, triple)[0])
        _, infer_s = timed(lambda: [estimator.bound(x) for x in X_query])
    elif name == "GP":
        model, train_s = timed(lambda: gp_select(X, Y, cfg.gp)[0])
        _, infer_s = timed(lambda: gp_predict(model, X_query))
    else:
        triple = select_knots(X, Y, cfg.kdarek.n_knots, "quantile", cfg.kdarek.spline_order)
        model, train_s = timed(lambda: ensemble_train(X, Y, cfg.ensemble, train_cfg, triple))
        _, infer_s = timed(lambda: ensemble_predict(model, X_query))
    return train_s, infer_s


def evaluate_timing(cfg, output_dir):
    """Median train and inference wall clock per model and dataset size."""
    train_cfg = cfg.train.model_copy(update={"seed": cfg.seed})
    rows = []
    for n in cfg.sizes:
        data = cfg.data.model_copy(update={"n_train": n, "n_test": cfg.n_query})
        X, Y, X_query, _ = cosine_dataset(data, cfg.seed)
        for name in cfg.models:
            samples = [_fit_and_query(name, cfg, X, Y, X_query, train_cfg) for _ in range(cfg.repetitions)]
            train_s = float(np.median([s[0] for s in samples]))
            infer_s = float(np.median([s[1] for s in samples]))
            rows.append({"model": name, "n": n, "train_median_s": train_s, "inference_median_s": infer_s,
                         "total_median_s": train_s + infer_s})
            print(f"[n={n}] {name}: Train={train_s:.3f}s | Inference={infer_s:.4f}s")

    n_max = max(cfg.sizes)
    trends = {
        "n": n_max,
        "ensemble_over_kdarek": speedup(rows, "Ensemble", "K-DAREK", n_max),
        "gp_over_kdarek": speedup(rows, "GP", "K-DAREK", n_max),
        "gp_train_growth_500_to_5000": growth(rows, "GP", 500, 5000),
    }
    print(f"[trends] Ensemble/K-DAREK={trends['ensemble_over_kdarek']} | GP/K-DAREK={trends['gp_over_kdarek']}")

    header = ["model", "n", "train_median_s", "inference_median_s", "total_median_s"]
    files = [
        write_csv(os.path.join(output_dir, "timing.csv"), header, [[r[h] for h in header] for r in rows]),
        write_json(os.path.join(output_dir, "timing_trends.json"), {"experiment": "bench", "trends": trends}),
    ]
    print(f"\n✅ Timing results written to {output_dir}")
    return rows, files


# ------------------------------- MAIN ------------------------------------ #

if __name__ == "__main__":
    from kdarek.config import BenchConfig, load_config

    evaluate_timing(load_config("config/bench.json", BenchConfig), "outputs")
