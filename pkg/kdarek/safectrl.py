"""
Multi-agent safe control: an ego double integrator tracks its goal with an
obstacle-free MPC controller, and a discrete-time CBF quadratic program keeps
it clear of scripted agents. The CBF constraint is tightened by a disturbance
polytope whose half-widths come from a learned error model's worst-case bound.
"""

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal, Protocol

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import solve, solve_discrete_are

from kdarek.baselines import DarekSettings, fit_darek
from kdarek.bounds import KdarekSettings, fit_kdarek, select_knots
from kdarek.errors import QpInfeasible
from kdarek.qp import qp_solve

logger = logging.getLogger("kdarek.safectrl")

OUTCOMES = ("Success", "Collision", "Stuck")


# ------------------------------- CONFIG ---------------------------------- #

class WorldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dt: float = Field(0.1, gt=0)
    arena_half_size: float = Field(5.0, gt=0)
    ego_start: tuple[float, float] = (0.0, -4.0)
    goal: tuple[float, float] = (0.0, 4.0)
    agent_radius: float = Field(0.3, gt=0)
    goal_tolerance: float = Field(0.2, gt=0)
    max_steps: int = Field(400, ge=1)
    stuck_window: int = Field(50, ge=1)
    stuck_distance: float = Field(0.05, ge=0)
    n_other_agents: int = Field(4, ge=0)
    other_speed_range: tuple[float, float] = (0.5, 1.0)
    other_velocity_jitter: float = Field(0.05, ge=0)
    lane_half_span: float = Field(2.0, ge=0)
    position_noise_unit: float = Field(0.01, ge=0)
    velocity_noise_unit: float = Field(0.05, ge=0)
    lipschitz_floor: float = Field(0.01, gt=0)
    max_accel: float = Field(2.0, gt=0)
    mpc_horizon: int = Field(8, ge=1)
    mpc_position_weight: float = Field(1.0, gt=0)
    mpc_velocity_weight: float = Field(1.0, gt=0)
    mpc_input_weight: float = Field(1.0, gt=0)


class CbfParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(0.4, gt=0, le=1)
    alpha: float = Field(1.0, gt=0)
    safety_margin: float = Field(0.05, ge=0)
    sensing_radius: float = Field(15.0, gt=0)
    other_velocity_sigmas: float = Field(3.0, ge=0)
    slack_penalty: float = Field(1e6, gt=0)


class ErrorModelSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_steps: int = Field(5000, ge=10)
    exploration_std: float = Field(0.5, ge=0)
    n_knots: int = Field(25, ge=4)
    train_lipschitz: float = Field(6.0, gt=0)
    lipschitz_kp1: float = Field(0.1, ge=0)
    spline_order: int = Field(3, ge=1)
    spline_intervals: int = Field(4, ge=1)


# ------------------------------- TYPES ----------------------------------- #

@dataclass(frozen=True)
class AgentState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        position = np.asarray(self.position, dtype=float).reshape(2)
        velocity = np.asarray(self.velocity, dtype=float).reshape(2)
        if not (np.all(np.isfinite(position)) and np.all(np.isfinite(velocity))):
            raise ValueError(f"Non-finite agent state {position}, {velocity}")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "velocity", velocity)

    def as_vector(self):
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, x):
        return cls(position=x[:2], velocity=x[2:4])


@dataclass(frozen=True)
class DisturbancePolytope:
    """Box |d_i| <= half_widths[i] over (p_x, p_y, v_x, v_y)."""

    half_widths: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.half_widths, dtype=float).reshape(4)
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError(f"Polytope half-widths must be finite and nonnegative, got {w}")
        object.__setattr__(self, "half_widths", w)

    @classmethod
    def zero(cls):
        return cls(np.zeros(4))

    def worst_vertex(self, gradient):
        """Vertex minimizing gradient^T d."""
        return -np.sign(gradient) * self.half_widths


@dataclass(frozen=True)
class AgentScript:
    start: tuple
    waypoints: tuple
    speed: float
    jitter: float = 0.0


@dataclass(frozen=True)
class TrialOutcome:
    tag: Literal["Success", "Collision", "Stuck"]
    steps: int
    min_distance: float
    fallback_steps: int = 0
    trajectory_hash: str = ""
    trajectory: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class FilterResult:
    u: np.ndarray
    fallback: bool
    n_constraints: int


# ---------------------------- ERROR MODELS ------------------------------- #

class ErrorModel(Protocol):
    def polytope(self, x, u) -> DisturbancePolytope: ...

    def for_noise(self, d_p, d_v, world) -> "ErrorModel": ...


@dataclass(frozen=True)
class FixedErrorModel:
    """Constant half-widths; zeros give the nominal (non-robust) filter."""

    half_widths: tuple = (0.0, 0.0, 0.0, 0.0)

    def polytope(self, x, u):
        return DisturbancePolytope(np.asarray(self.half_widths))

    def for_noise(self, d_p, d_v, world):
        return self


def system_lipschitz(d_p, d_v, world):
    """L_f = d_p + d_v * dt on the noise grid levels; the noise-free cell gets lipschitz_floor."""
    value = float(d_p) + float(d_v) * world.dt
    return value if value > 0 else world.lipschitz_floor


@dataclass(frozen=True)
class BoundErrorModel:
    """Worst-case bound of a next-state estimator at (x, u) used as polytope half-widths."""

    estimator: object

    def polytope(self, x, u):
        return DisturbancePolytope(self.estimator.bound(np.concatenate([x, u])).total)

    def for_noise(self, d_p, d_v, world):
        return BoundErrorModel(self.estimator.rebudget(system_lipschitz(d_p, d_v, world)))


# ------------------------------ DYNAMICS --------------------------------- #

def step_dynamics(x, u, d, dt):
    """p' = p + v dt + u dt^2 / 2, v' = v + u dt, then x' += d."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p, v = x[:2], x[2:4]
    nxt = np.concatenate([p + v * dt + 0.5 * u * dt * dt, v + u * dt])
    return nxt + np.asarray(d, dtype=float)


def double_integrator(dt):
    A = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    B = np.vstack([0.5 * dt * dt * np.eye(2), dt * np.eye(2)])
    return A, B


@lru_cache(maxsize=32)
def _riccati(dt, horizon, q_p, q_v, r):
    A, B = double_integrator(dt)
    Q = np.diag([q_p, q_p, q_v, q_v])
    R = r * np.eye(2)
    terminal = solve_discrete_are(A, B, Q, R)
    P = terminal
    for _ in range(horizon):
        K = solve(R + B.T @ P @ B, B.T @ P @ A, assume_a="pos")
        P = Q + A.T @ P @ (A - B @ K)
    return K, terminal


def riccati_gain(world, horizon=None):
    """First-step feedback gain of the horizon-N tracking problem and its terminal weight."""
    if horizon is None:
        horizon = world.mpc_horizon
    if horizon < 1:
        raise ValueError(f"MPC horizon must be >= 1, got {horizon}")
    return _riccati(world.dt, horizon, world.mpc_position_weight, world.mpc_velocity_weight,
                    world.mpc_input_weight)


def mpc_reference(x, goal, world, horizon=None):
    """u = -K0 (x - [goal, 0, 0]), clipped to the actuator box."""
    K, _ = riccati_gain(world, horizon)
    error = np.asarray(x, dtype=float) - np.concatenate([np.asarray(goal, dtype=float), np.zeros(2)])
    return np.clip(-K @ error, -world.max_accel, world.max_accel)


# -------------------------------- CBF ------------------------------------ #

def _barrier(dp, dv, alpha, radius):
    return 2.0 * dp @ dv + alpha * (dp @ dp - radius ** 2)


def cbf_constraints(x, others, polytope, params, world):
    """
    Rows (A, b) with A u <= b enforcing H(x_{t+1}) >= (1 - gamma) H(x_t) for each
    agent inside the sensing radius, H = 2 dp^T dv + alpha (|dp|^2 - R^2).

    H(x_{t+1}) is taken at u = 0, d = 0 with the other agent at constant velocity.
    Its u^2 term is nonnegative and is dropped. The linear disturbance term is
    evaluated at the worst polytope vertex, and the u-d and d-d cross terms are
    bounded below over the actuator box. The other agent's next velocity may
    differ from the current one by other_velocity_sigmas * jitter per axis.
    """
    dt, alpha = world.dt, params.alpha
    beta = 0.5 * dt * dt
    radius = 2.0 * world.agent_radius + params.safety_margin
    x = np.asarray(x, dtype=float)
    w = polytope.half_widths
    w_other = params.other_velocity_sigmas * world.other_velocity_jitter
    e_p = float(np.linalg.norm(w[:2]))
    e_v = float(np.linalg.norm(w[2:] + w_other))
    u_max = math.sqrt(2.0) * world.max_accel
    cross = 2.0 * u_max * (beta * e_v + (dt + alpha * beta) * e_p) + 2.0 * e_p * e_v

    rows, bounds = [], []
    for other in others:
        dp = x[:2] - other.position
        if np.linalg.norm(dp) > params.sensing_radius:
            continue
        dv = x[2:4] - other.velocity
        h_now = _barrier(dp, dv, alpha, radius)

        dp_next = dp + dv * dt
        c_p = 2.0 * dv + 2.0 * alpha * dp_next
        c_v = 2.0 * dp_next
        g = beta * c_p + dt * c_v
        gradient = np.concatenate([c_p, c_v])
        worst = gradient @ polytope.worst_vertex(gradient) - w_other * np.sum(np.abs(c_v))
        rows.append(-g)
        bounds.append(_barrier(dp_next, dv, alpha, radius) + worst - cross - (1.0 - params.gamma) * h_now)
    return np.array(rows).reshape(-1, 2), np.array(bounds)


def _box(world):
    return np.vstack([np.eye(2), -np.eye(2)]), np.full(4, world.max_accel)


def cbf_filter(u_ref, x, others, polytope, params, world):
    """
    Closest input to u_ref satisfying every robust CBF row and the actuator box.
    If no input satisfies them all, the slack-penalized program gives the input
    that violates the rows least; `fallback` is set.
    """
    u_ref = np.clip(np.asarray(u_ref, dtype=float), -world.max_accel, world.max_accel)
    A_cbf, b_cbf = cbf_constraints(x, others, polytope, params, world)
    k = len(A_cbf)
    if k == 0 or np.all(A_cbf @ u_ref <= b_cbf):
        return FilterResult(u_ref, False, k)

    A_box, b_box = _box(world)
    try:
        sol = qp_solve(np.eye(2), -u_ref, np.vstack([A_cbf, A_box]), np.concatenate([b_cbf, b_box]))
        return FilterResult(sol.x, False, k)
    except QpInfeasible:
        pass

    H = np.diag(np.concatenate([np.ones(2), np.full(k, params.slack_penalty)]))
    f = np.concatenate([-u_ref, np.zeros(k)])
    A = np.vstack([
        np.hstack([A_cbf, -np.eye(k)]),
        np.hstack([np.zeros((k, 2)), -np.eye(k)]),
        np.hstack([A_box, np.zeros((4, k))]),
    ])
    b = np.concatenate([b_cbf, np.zeros(k), b_box])
    sol = qp_solve(H, f, A, b)
    logger.debug(f"CBF program infeasible; slack fallback with max slack {np.max(sol.x[2:]):.3g}")
    return FilterResult(sol.x[:2], True, k)


# ---------------------------- OTHER AGENTS ------------------------------- #

def default_scripts(world, rng):
    """Agents crossing the ego's corridor on horizontal lanes, alternating direction."""
    scripts = []
    n = world.n_other_agents
    lanes = np.linspace(-world.lane_half_span, world.lane_half_span, n) if n > 1 else np.zeros(n)
    edge = world.arena_half_size - 1.0
    for i, lane in enumerate(lanes):
        side = -edge if i % 2 == 0 else edge
        middle = (rng.uniform(-0.5, 0.5), lane + rng.uniform(-0.5, 0.5))
        scripts.append(AgentScript(start=(side, lane), waypoints=(middle, (-side, lane)),
                                   speed=float(rng.uniform(*world.other_speed_range)),
                                   jitter=world.other_velocity_jitter))
    return scripts


def _script_velocity(position, script, target):
    if target >= len(script.waypoints):
        return np.zeros(2)
    heading = np.asarray(script.waypoints[target]) - position
    distance = np.linalg.norm(heading)
    return heading / distance * script.speed if distance > 0 else np.zeros(2)


# ------------------------------- TRIALS ---------------------------------- #

def _min_distance(ego, others):
    if not others:
        return np.inf
    return float(min(np.linalg.norm(ego[:2] - o.position) for o in others))


def run_trial(world, params, error_model, seed, noise=(0.0, 0.0), scripts=None, record=False):
    """
    One seeded episode. Noise levels are grid units; d is drawn uniformly from
    the box scaled by the configured noise units.
    """
    rng = np.random.default_rng(seed)
    if scripts is None:
        scripts = default_scripts(world, rng)
    widths = np.repeat([noise[0] * world.position_noise_unit, noise[1] * world.velocity_noise_unit], 2)
    contact = 2.0 * world.agent_radius
    goal = np.asarray(world.goal, dtype=float)

    ego = np.array([*world.ego_start, 0.0, 0.0])
    targets = [0] * len(scripts)
    others = [AgentState(s.start, _script_velocity(np.asarray(s.start), s, 0)) for s in scripts]
    digest = hashlib.sha256()
    rows = []
    history = [ego[:2].copy()]
    fallbacks = 0

    def finish(tag, steps, closest):
        if fallbacks:
            logger.info(f"Trial seed={seed}: {fallbacks} slack fallback step(s)")
        return TrialOutcome(tag, steps, closest, fallbacks, digest.hexdigest(), rows)

    closest = _min_distance(ego, others)
    if closest < contact:
        return finish("Collision", 0, closest)

    for t in range(1, world.max_steps + 1):
        u_ref = mpc_reference(ego, goal, world)
        polytope = error_model.polytope(ego, u_ref)
        result = cbf_filter(u_ref, ego, others, polytope, params, world)
        fallbacks += result.fallback
        if record:
            rows.append([t - 1, 0, *ego, *result.u, *polytope.half_widths])
            rows.extend([t - 1, i + 1, *o.position, *o.velocity, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
                        for i, o in enumerate(others))

        ego = step_dynamics(ego, result.u, rng.uniform(-1.0, 1.0, 4) * widths, world.dt)
        moved = []
        for i, (script, other) in enumerate(zip(scripts, others)):
            position = other.position + other.velocity * world.dt
            if targets[i] < len(script.waypoints) and \
                    np.linalg.norm(np.asarray(script.waypoints[targets[i]]) - position) <= script.speed * world.dt:
                targets[i] += 1
            velocity = _script_velocity(position, script, targets[i])
            if targets[i] < len(script.waypoints):
                velocity = velocity + rng.normal(0.0, script.jitter, 2)
            moved.append(AgentState(position, velocity))
        others = moved

        digest.update(ego.tobytes())
        for o in others:
            digest.update(o.as_vector().tobytes())
        history.append(ego[:2].copy())
        closest = min(closest, _min_distance(ego, others))

        if _min_distance(ego, others) < contact:
            return finish("Collision", t, closest)
        if np.linalg.norm(ego[:2] - goal) <= world.goal_tolerance:
            return finish("Success", t, closest)
        if t >= world.stuck_window and \
                np.linalg.norm(history[-1] - history[-1 - world.stuck_window]) < world.stuck_distance:
            return finish("Stuck", t, closest)
    return finish("Stuck", world.max_steps, closest)


TRAJECTORY_HEADER = ["t", "agent_id", "px", "py", "vx", "vy", "u1", "u2", "b_px", "b_py", "b_vx", "b_vy"]


@dataclass(frozen=True)
class CampaignRow:
    model: str
    d_p: float
    d_v: float
    success: int
    collision: int
    stuck: int
    mean_steps: float
    seed0: int

    def as_row(self):
        return [self.model, self.d_p, self.d_v, self.success, self.collision, self.stuck,
                self.mean_steps, self.seed0]


CAMPAIGN_HEADER = ["model", "d_p", "d_v", "success", "collision", "stuck", "mean_steps", "seed0"]


def _run_cell(args):
    name, error_model, d_p, d_v, world, params, trials, seed0 = args
    torch.set_num_threads(1)
    model = error_model.for_noise(d_p, d_v, world)
    outcomes = [run_trial(world, params, model, seed0 + i, noise=(d_p, d_v)) for i in range(trials)]
    counts = {tag: sum(o.tag == tag for o in outcomes) for tag in OUTCOMES}
    return CampaignRow(name, d_p, d_v, counts["Success"], counts["Collision"], counts["Stuck"],
                       float(np.mean([o.steps for o in outcomes])), seed0)


def run_campaign(error_models, world, params, position_levels, velocity_levels, trials, seed0, jobs=1):
    """
    Every (model, d_p, d_v) cell runs `trials` paired seeds seed0 + i, so models
    face identical scenarios. Rows come back in (model, d_p, d_v) order.
    """
    tasks = [(name, model, float(d_p), float(d_v), world, params, trials, seed0)
             for name, model in error_models.items()
             for d_p in position_levels for d_v in velocity_levels]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(task) for task in tasks]
    for row in rows:
        logger.info(f"Cell {row.model} d_p={row.d_p:g} d_v={row.d_v:g}: "
                    f"{row.success}/{row.collision}/{row.stuck} (success/collision/stuck)")
    return rows


# --------------------------- MODEL TRAINING ------------------------------ #

def collect_dynamics_data(world, steps, seed, exploration_std=0.5):
    """Noise-free rollouts of MPC plus exploration noise toward random goals; returns ([x, u], x')."""
    rng = np.random.default_rng(seed)
    half = world.arena_half_size - 0.5

    def fresh_goal():
        return rng.uniform(-half, half, 2)

    x = np.concatenate([rng.uniform(-half, half, 2), np.zeros(2)])
    goal = fresh_goal()
    inputs, targets = [], []
    for t in range(steps):
        u = mpc_reference(x, goal, world) + rng.normal(0.0, exploration_std, 2)
        u = np.clip(u, -world.max_accel, world.max_accel)
        nxt = step_dynamics(x, u, np.zeros(4), world.dt)
        inputs.append(np.concatenate([x, u]))
        targets.append(nxt)
        x = nxt
        if np.linalg.norm(x[:2] - goal) <= world.goal_tolerance or (t + 1) % 100 == 0:
            goal = fresh_goal()
        if np.any(np.abs(x[:2]) > world.arena_half_size):
            x = np.concatenate([rng.uniform(-half, half, 2), np.zeros(2)])
    return np.array(inputs), np.array(targets)


def train_error_models(X, Y, settings, train_cfg):
    """D2 (two spline layers), K-D2 (MLP widths [1,5]) and K-D3 (widths [1,5,5]) on shared knots."""
    triple = select_knots(X, Y, settings.n_knots, "farthest-point", settings.spline_order)
    common = dict(n_knots=settings.n_knots, spline_order=settings.spline_order,
                  spline_intervals=settings.spline_intervals, lipschitz_f=settings.train_lipschitz,
                  lipschitz_kp1=settings.lipschitz_kp1)

    models = {}
    darek, _ = fit_darek(X, Y, DarekSettings(hidden_dim=5, **common), train_cfg, triple)
    models["D2"] = BoundErrorModel(darek)
    for name, widths in (("K-D2", [1, 5]), ("K-D3", [1, 5, 5])):
        estimator, _ = fit_kdarek(X, Y, KdarekSettings(widths=widths, **common),
                                  train_cfg, triple)
        models[name] = BoundErrorModel(estimator)
    logger.info(f"Trained error models {list(models)} on {len(X)} transitions")
    return models
