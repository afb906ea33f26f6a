import json
import os

import numpy as np
from sklearn.metrics import mean_squared_error

from kdarek.baselines import ensemble_predict, ensemble_train, fit_darek, gp_predict, gp_select
from kdarek.bounds import fit_kdarek, select_knots
from kdarek.netcore import count_parameters
from kdarek.serialization import write_csv, write_json


# ------------------------------- DATA ------------------------------------ #

def cosine_dataset(data, seed=0):
    """Training samples on an even grid, an in-range test grid and a wider curve grid."""
    rng = np.random.default_rng(seed)
    X = np.linspace(data.x_min, data.x_max, data.n_train)
    Y = data.amplitude * np.cos(X) + rng.normal(0.0, data.noise_std, len(X))
    X_test = np.linspace(data.x_min, data.x_max, data.n_test)
    X_curve = np.linspace(data.x_min - data.curve_extension, data.x_max + data.curve_extension,
                          data.curve_points)
    return X[:, None], Y[:, None], X_test[:, None], X_curve[:, None]


def target(data, X):
    return data.amplitude * np.cos(np.asarray(X, dtype=float).ravel())


# ------------------------------ METRICS ---------------------------------- #

def violation_percent(truth, prediction, half_width):
    """% of points whose true error exceeds the predicted half-width."""
    error = np.abs(np.ravel(truth) - np.ravel(prediction))
    return 100.0 * float(np.mean(error > np.ravel(half_width)))


def bounded_predictions(estimator, X):
    bounds = [estimator.bound(x) for x in X]
    prediction = np.array([b.prediction[0] for b in bounds])
    half_width = np.array([b.total[0] for b in bounds])
    return prediction, half_width


# ------------------------------ DRIVER ----------------------------------- #

def evaluate_cosine(cfg, output_dir, jobs=1):
    """
    K-DAREK, DAREK and Ensemble trained on the same data; all four share the knots.
    Writes the per-model summary and the bound curves; returns (results, files).
    """
    data = cfg.data
    X, Y, X_test, X_curve = cosine_dataset(data, cfg.seed)
    f_test, f_curve = target(data, X_test), target(data, X_curve)
    train_cfg = cfg.train.model_copy(update={"seed": cfg.seed})
    triple = select_knots(X, Y, cfg.kdarek.n_knots, "quantile", cfg.kdarek.spline_order)

    kdarek, _ = fit_kdarek(X, Y, cfg.kdarek, train_cfg, triple)
    darek, _ = fit_darek(X, Y, cfg.darek, train_cfg, triple)
    # the GP is conditioned on the shared knot samples only
    gp, _ = gp_select(triple.inputs, triple.targets, cfg.gp)
    ensemble = ensemble_train(X, Y, cfg.ensemble, train_cfg, triple, jobs=jobs)

    def gp_curve(Xq):
        mean, std, _, _ = gp_predict(gp, Xq)
        return mean, 3.0 * std

    def ensemble_curve(Xq):
        mean, std, _, _ = ensemble_predict(ensemble, Xq)
        return mean[:, 0], 3.0 * std[:, 0]

    evaluated = [
        ("K-DAREK", lambda Xq: bounded_predictions(kdarek, Xq), count_parameters(kdarek.model)),
        ("DAREK", lambda Xq: bounded_predictions(darek, Xq), count_parameters(darek.model)),
        ("GP", gp_curve, None),
        ("Ensemble", ensemble_curve, sum(count_parameters(m) for m in ensemble.members)),
    ]

    results, curve_rows = [], []
    for name, curve, size in evaluated:
        prediction, half_width = curve(X_test)
        mse = mean_squared_error(f_test, prediction)
        violations = violation_percent(f_test, prediction, half_width)
        results.append({"model": name, "mse": float(mse), "violation_percent": violations, "size": size})
        print(f"[{name}] MSE={mse:.3f} | Violations={violations:.1f}% | Size={size if size is not None else '-'}")

        prediction, half_width = curve(X_curve)
        curve_rows.extend([name, x, f, p, p - u, p + u]
                          for x, f, p, u in zip(X_curve.ravel(), f_curve, prediction, half_width))

    files = [
        write_csv(os.path.join(output_dir, "cosine_summary.csv"), ["model", "mse", "violation_percent", "size"],
                  [[r["model"], r["mse"], r["violation_percent"], r["size"]] for r in results]),
        write_csv(os.path.join(output_dir, "cosine_curves.csv"), ["model", "x", "f", "f_hat", "lower", "upper"],
                  curve_rows),
        write_json(os.path.join(output_dir, "cosine_summary.json"),
                   {"experiment": "cosine", "gp_hyper": gp.hyper.model_dump(), "results": results}),
    ]
    print(f"\n✅ Cosine results written to {output_dir}")
    return results, files


# ------------------------------- MAIN ------------------------------------ #

if __name__ == "__main__":
    from kdarek.config import CosineConfig, load_config

    cfg = load_config("config/cosine.json", CosineConfig)
    results, _ = evaluate_cosine(cfg, "outputs")
    print(json.dumps(results, indent=4))
