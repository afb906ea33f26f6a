import os

from kdarek.safectrl import (
    CAMPAIGN_HEADER,
    TRAJECTORY_HEADER,
    FixedErrorModel,
    collect_dynamics_data,
    run_campaign,
    run_trial,
    train_error_models,
)
from kdarek.serialization import write_csv, write_json


# ------------------------------ METRICS ---------------------------------- #

def noise_free_success(rows, trials):
    """Lowest success rate over models in the d_p = d_v = 0 cell."""
    cells = [r.success / trials for r in rows if r.d_p == 0 and r.d_v == 0]
    return min(cells) if cells else None


def collision_ordering(rows, better, worse):
    """True when `better` never collides more than `worse` in any cell with d_p = 1."""
    table = {(r.model, r.d_p, r.d_v): r.collision for r in rows}
    pairs = [(table[(better, d_p, d_v)], table[(worse, d_p, d_v)])
             for (model, d_p, d_v) in table if model == better and d_p == 1 and (worse, d_p, d_v) in table]
    return all(a <= b for a, b in pairs) if pairs else None


# ------------------------------ DRIVER ----------------------------------- #

def evaluate_safety(cfg, output_dir, jobs=1):
    """Train the error models once, then run every (model, d_p, d_v) cell on paired seeds."""
    X, Y = collect_dynamics_data(cfg.world, cfg.error_models.data_steps, cfg.seed,
                                 cfg.error_models.exploration_std)
    train_cfg = cfg.train.model_copy(update={"seed": cfg.seed})
    learned = train_error_models(X, Y, cfg.error_models, train_cfg)
    learned["nominal"] = FixedErrorModel()
    models = {name: learned[name] for name in cfg.models}

    rows = run_campaign(models, cfg.world, cfg.cbf, cfg.position_levels, cfg.velocity_levels,
                        cfg.trials, cfg.seed, jobs=jobs)
    for r in rows:
        print(f"[{r.model}] d_p={r.d_p:g} d_v={r.d_v:g} → Success={r.success} | "
              f"Collision={r.collision} | Stuck={r.stuck}")

    files = [write_csv(os.path.join(output_dir, "safectrl_campaign.csv"), CAMPAIGN_HEADER,
                       [r.as_row() for r in rows])]

    if cfg.dump_trajectories:
        d_p, d_v = max(cfg.position_levels), max(cfg.velocity_levels)
        for name, model in models.items():
            outcome = run_trial(cfg.world, cfg.cbf, model.for_noise(d_p, d_v, cfg.world), cfg.seed,
                                noise=(d_p, d_v), record=True)
            files.append(write_csv(os.path.join(output_dir, f"trajectory_{name}.csv"), TRAJECTORY_HEADER,
                                   outcome.trajectory))

    trends = {
        "noise_free_min_success_rate": noise_free_success(rows, cfg.trials),
        "kd2_collisions_le_d2": collision_ordering(rows, "K-D2", "D2"),
    }
    files.append(write_json(os.path.join(output_dir, "safectrl_trends.json"),
                            {"experiment": "safectrl", "trials": cfg.trials, "trends": trends}))
    print(f"\n✅ Safe-control results written to {output_dir}")
    return rows, files


# ------------------------------- MAIN ------------------------------------ #

if __name__ == "__main__":
    from kdarek.config import SafeCtrlConfig, load_config

    cfg = load_config("config/safectrl.json", SafeCtrlConfig, {"seed": 0})
    evaluate_safety(cfg, "outputs")
