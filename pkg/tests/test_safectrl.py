import numpy as np
import pytest

from kdarek.safectrl import (
    AgentScript,
    AgentState,
    BoundErrorModel,
    CbfParams,
    DisturbancePolytope,
    ErrorModelSettings,
    FixedErrorModel,
    WorldConfig,
    cbf_constraints,
    cbf_filter,
    collect_dynamics_data,
    double_integrator,
    mpc_reference,
    riccati_gain,
    run_campaign,
    run_trial,
    step_dynamics,
    system_lipschitz,
    train_error_models,
)
from kdarek.netcore import TrainConfig

WORLD = WorldConfig()
PARAMS = CbfParams()


def _state(p, v):
    return AgentState(np.array(p, dtype=float), np.array(v, dtype=float))


# ------------------------------ dynamics --------------------------------- #

def test_step_dynamics_matches_hand_values():
    x = step_dynamics([0.0, 0.0, 0.0, 0.0], [1.0, 0.0], np.zeros(4), 0.1)
    np.testing.assert_allclose(x, [0.005, 0.0, 0.1, 0.0])
    x = step_dynamics([1.0, 2.0, 1.0, -1.0], [0.0, 0.0], np.zeros(4), 0.1)
    np.testing.assert_allclose(x, [1.1, 1.9, 1.0, -1.0])
    x = step_dynamics(np.zeros(4), np.zeros(2), [0.01, 0.0, 0.0, -0.05], 0.1)
    np.testing.assert_allclose(x, [0.01, 0.0, 0.0, -0.05])


def test_double_integrator_matches_step():
    A, B = double_integrator(0.1)
    x, u = np.array([0.3, -1.0, 0.2, 0.5]), np.array([0.7, -0.4])
    np.testing.assert_allclose(A @ x + B @ u, step_dynamics(x, u, np.zeros(4), 0.1))


def test_agent_state_rejects_non_finite():
    with pytest.raises(ValueError):
        _state([np.nan, 0.0], [0.0, 0.0])
    np.testing.assert_array_equal(AgentState.from_vector(np.arange(4.0)).as_vector(), np.arange(4.0))


def test_polytope_worst_vertex():
    polytope = DisturbancePolytope([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(polytope.worst_vertex(np.array([1.0, -2.0, 0.0, 3.0])), [-0.1, 0.2, 0.0, -0.4])
    with pytest.raises(ValueError):
        DisturbancePolytope([0.1, -0.2, 0.0, 0.0])


def test_system_lipschitz_on_grid_levels():
    cells = [(d_p, d_v) for d_p in (0.0, 1.0) for d_v in (0.0, 1.0, 2.0, 3.0)]
    values = [system_lipschitz(d_p, d_v, WORLD) for d_p, d_v in cells]
    assert values[0] == WORLD.lipschitz_floor
    np.testing.assert_allclose(values[1:], [d_p + d_v * WORLD.dt for d_p, d_v in cells[1:]])
    assert len(set(values)) == len(cells)


def test_noise_cells_respread_only_the_spline_share(kdarek_fit):
    estimator, _ = kdarek_fit
    model = BoundErrorModel(estimator)
    budgets = [model.for_noise(d_p, d_v, WORLD).estimator.budget
               for d_p in (0.0, 1.0) for d_v in (0.0, 1.0, 2.0, 3.0)]
    assert len({b.spline_lipschitz for b in budgets}) == len(budgets)
    for b in budgets:
        assert b.mlp_lipschitz == estimator.budget.mlp_lipschitz
        assert b.layer_cap == estimator.budget.layer_cap


# -------------------------------- MPC ------------------------------------ #

def test_mpc_at_goal_is_zero():
    np.testing.assert_allclose(mpc_reference([0.0, 4.0, 0.0, 0.0], (0.0, 4.0), WORLD), [0.0, 0.0], atol=1e-12)


def test_mpc_pushes_toward_goal():
    u = mpc_reference([0.0, 0.0, 0.0, 0.0], (1.0, 0.0), WORLD)
    assert u[0] > 0
    assert u[1] == pytest.approx(0.0, abs=1e-12)
    far = mpc_reference([0.0, -40.0, 0.0, 0.0], (0.0, 40.0), WORLD)
    np.testing.assert_allclose(far, [0.0, WORLD.max_accel], atol=1e-12)


def test_one_step_mpc_matches_grid_search():
    K, P = riccati_gain(WORLD, horizon=1)
    A, B = double_integrator(WORLD.dt)
    x = np.array([0.3, -0.2, 0.1, 0.0])
    u = mpc_reference(x, (0.0, 0.0), WORLD, horizon=1)
    assert np.all(np.abs(u) < WORLD.max_accel)

    grid = np.linspace(-2.0, 2.0, 801)
    U = np.array([(a, b) for a in grid for b in grid])
    nxt = (A @ x)[None, :] + U @ B.T
    cost = np.sum(U ** 2, axis=1) + np.einsum("ni,ij,nj->n", nxt, P, nxt)
    np.testing.assert_allclose(u, U[np.argmin(cost)], atol=0.01)
    np.testing.assert_allclose(K @ x, -u, atol=1e-12)


def test_riccati_gain_rejects_bad_horizon():
    with pytest.raises(ValueError):
        riccati_gain(WORLD, horizon=0)


# -------------------------------- CBF ------------------------------------ #

EGO = np.array([0.0, 0.0, 0.0, 0.5])
ONCOMING = _state([0.0, 2.0], [0.0, -0.5])


def test_filter_without_agents_returns_reference():
    result = cbf_filter(np.array([0.5, -0.3]), EGO, [], DisturbancePolytope.zero(), PARAMS, WORLD)
    np.testing.assert_array_equal(result.u, [0.5, -0.3])
    assert not result.fallback and result.n_constraints == 0


def test_filter_ignores_agents_outside_sensing_radius():
    far = _state([0.0, PARAMS.sensing_radius + 0.5], [0.0, -0.5])
    result = cbf_filter(np.array([0.5, 1.0]), EGO, [far], DisturbancePolytope.zero(), PARAMS, WORLD)
    assert result.n_constraints == 0
    np.testing.assert_array_equal(result.u, [0.5, 1.0])


def test_filter_projects_onto_single_constraint():
    u_ref = np.array([0.5, 1.0])
    A, b = cbf_constraints(EGO, [ONCOMING], DisturbancePolytope.zero(), PARAMS, WORLD)
    assert A.shape == (1, 2) and A[0] @ u_ref > b[0]
    a = A[0]
    expected = u_ref - (a @ u_ref - b[0]) / (a @ a) * a
    assert np.all(np.abs(expected) <= WORLD.max_accel)

    result = cbf_filter(u_ref, EGO, [ONCOMING], DisturbancePolytope.zero(), PARAMS, WORLD)
    assert not result.fallback and result.n_constraints == 1
    np.testing.assert_allclose(result.u, expected, atol=1e-9)


def test_larger_polytope_tightens_filter():
    u_ref = np.array([0.5, 1.0])
    _, b_zero = cbf_constraints(EGO, [ONCOMING], DisturbancePolytope.zero(), PARAMS, WORLD)
    _, b_wide = cbf_constraints(EGO, [ONCOMING], DisturbancePolytope(np.full(4, 0.01)), PARAMS, WORLD)
    assert b_wide[0] < b_zero[0]

    deviation = []
    for w in (0.0, 0.005, 0.01):
        result = cbf_filter(u_ref, EGO, [ONCOMING], DisturbancePolytope(np.full(4, w)), PARAMS, WORLD)
        deviation.append(np.linalg.norm(result.u - u_ref))
    assert deviation == sorted(deviation)


def _barrier_of(x, other, params=PARAMS):
    radius = 2.0 * WORLD.agent_radius + params.safety_margin
    dp, dv = x[:2] - other.position, x[2:] - other.velocity
    return 2.0 * dp @ dv + params.alpha * (dp @ dp - radius ** 2)


def test_barrier_row_linearizes_next_barrier():
    """Without disturbance margins the row matches H(x_{t+1}) up to the u^2 term."""
    exact = CbfParams(other_velocity_sigmas=0.0)
    u = np.array([0.0, -0.2])
    A, b = cbf_constraints(EGO, [ONCOMING], DisturbancePolytope.zero(), exact, WORLD)

    nxt = step_dynamics(EGO, u, np.zeros(4), WORLD.dt)
    moved = _state(ONCOMING.position + ONCOMING.velocity * WORLD.dt, ONCOMING.velocity)
    linear = b[0] - A[0] @ u + (1.0 - exact.gamma) * _barrier_of(EGO, ONCOMING, exact)
    beta = 0.5 * WORLD.dt ** 2
    quadratic = (2.0 * beta * WORLD.dt + exact.alpha * beta ** 2) * (u @ u)
    assert _barrier_of(nxt, moved, exact) == pytest.approx(linear + quadratic, abs=1e-12)


def test_barrier_row_is_conservative_over_disturbances():
    polytope = DisturbancePolytope([0.01, 0.01, 0.05, 0.05])
    A, b = cbf_constraints(EGO, [ONCOMING], polytope, PARAMS, WORLD)
    h_now = _barrier_of(EGO, ONCOMING)
    jitter = PARAMS.other_velocity_sigmas * WORLD.other_velocity_jitter
    rng = np.random.default_rng(5)
    for _ in range(2000):
        u = rng.uniform(-WORLD.max_accel, WORLD.max_accel, 2)
        d = rng.uniform(-1.0, 1.0, 4) * polytope.half_widths
        nxt = step_dynamics(EGO, u, d, WORLD.dt)
        moved = _state(ONCOMING.position + ONCOMING.velocity * WORLD.dt,
                       ONCOMING.velocity + rng.uniform(-jitter, jitter, 2))
        guaranteed = b[0] - A[0] @ u
        assert _barrier_of(nxt, moved) - (1.0 - PARAMS.gamma) * h_now >= guaranteed - 1e-12


def test_infeasible_constraint_uses_slack_fallback():
    ego = np.array([0.0, 0.0, 0.0, 1.0])
    closing = _state([0.0, 0.9], [0.0, -1.0])
    result = cbf_filter(np.array([0.0, 2.0]), ego, [closing], DisturbancePolytope.zero(), PARAMS, WORLD)
    assert result.fallback
    np.testing.assert_allclose(result.u, [0.0, -WORLD.max_accel], atol=1e-6)


# ------------------------------- trials ---------------------------------- #

def test_trial_without_agents_reaches_goal():
    world = WorldConfig(n_other_agents=0)
    outcome = run_trial(world, PARAMS, FixedErrorModel(), seed=0)
    assert outcome.tag == "Success"
    assert outcome.fallback_steps == 0
    assert np.isinf(outcome.min_distance)


def test_trial_starting_in_contact_collides_immediately():
    script = AgentScript(start=WORLD.ego_start, waypoints=((0.0, 0.0),), speed=0.5)
    outcome = run_trial(WORLD, PARAMS, FixedErrorModel(), seed=0, scripts=[script])
    assert outcome.tag == "Collision" and outcome.steps == 0


def test_trials_are_reproducible():
    world = WorldConfig(max_steps=80)
    noisy = (1.0, 2.0)
    first = run_trial(world, PARAMS, FixedErrorModel((0.01, 0.01, 0.02, 0.02)), seed=7, noise=noisy, record=True)
    second = run_trial(world, PARAMS, FixedErrorModel((0.01, 0.01, 0.02, 0.02)), seed=7, noise=noisy)
    assert first.trajectory_hash == second.trajectory_hash
    assert first.tag == second.tag and first.steps == second.steps
    assert len(first.trajectory) == first.steps * (1 + world.n_other_agents)
    assert all(len(row) == 12 for row in first.trajectory)

    other = run_trial(world, PARAMS, FixedErrorModel(), seed=8, noise=noisy)
    assert other.trajectory_hash != first.trajectory_hash


def test_small_campaign_structure():
    world = WorldConfig(max_steps=30)
    models = {"nominal": FixedErrorModel(), "wide": FixedErrorModel((0.02, 0.02, 0.05, 0.05))}
    rows = run_campaign(models, world, PARAMS, [0.0], [0.0, 1.0], trials=2, seed0=3)
    assert [(r.model, r.d_p, r.d_v) for r in rows] == [
        ("nominal", 0.0, 0.0), ("nominal", 0.0, 1.0), ("wide", 0.0, 0.0), ("wide", 0.0, 1.0)]
    for r in rows:
        assert r.success + r.collision + r.stuck == 2
        assert r.seed0 == 3 and 0 < r.mean_steps <= 30


def test_collected_dynamics_data_is_noise_free():
    X, Y = collect_dynamics_data(WORLD, 50, seed=1)
    assert X.shape == (50, 6) and Y.shape == (50, 4)
    for x, y in zip(X, Y):
        np.testing.assert_allclose(y, step_dynamics(x[:4], x[4:], np.zeros(4), WORLD.dt))
    assert np.all(np.abs(X[:, 4:]) <= WORLD.max_accel)


@pytest.mark.slow
def test_campaign_trends_with_learned_bounds():
    X, Y = collect_dynamics_data(WORLD, 5000, seed=0)
    learned = train_error_models(X, Y, ErrorModelSettings(),
                                 TrainConfig(epochs=300, optimizer="adam", learning_rate=0.01, seed=0))
    models = {name: learned[name] for name in ("D2", "K-D2")}
    trials = 20

    quiet = run_campaign(models, WORLD, PARAMS, [0.0], [0.0], trials, seed0=0)
    assert all(r.success >= 0.85 * trials for r in quiet)

    noisy = {(r.model, r.d_v): r.collision
             for r in run_campaign(models, WORLD, PARAMS, [1.0], [0.0, 1.0, 2.0, 3.0], trials, seed0=0)}
    for d_v in (0.0, 1.0, 2.0, 3.0):
        assert noisy[("K-D2", d_v)] <= noisy[("D2", d_v)]
