"""
Comparison models: exact GP regression, a deep ensemble of small two-layer
spline networks, and the two-spline-layer DAREK network with its own bound.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from sklearn.metrics.pairwise import rbf_kernel

from kdarek.bounds import (
    DarekKnots,
    LipschitzBudget,
    compute_hidden_knots,
    darek_two_layer_bound,
    make_budget,
    respread_budget,
    select_knots,
)
from kdarek.errors import NotPositiveDefinite
from kdarek.netcore import DTYPE, SplineBlock, predict, train

logger = logging.getLogger("kdarek.baselines")

GP_JITTERS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
UNCERTAINTY_SIGMAS = 3.0


def _as_matrix(a):
    a = np.asarray(a, dtype=float)
    return a.reshape(len(a), -1)


# --------------------------------- GP ------------------------------------ #

class GpHyper(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lengthscale: float = Field(1.0, gt=0)
    signal_std: float = Field(1.0, gt=0)
    noise_std: float = Field(1e-2, ge=0)


class GpGrid(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lengthscale: list[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    signal_std: list[float] = Field(default_factory=lambda: [1.0, 5.0, 10.0])
    noise_std: list[float] = Field(default_factory=lambda: [1e-4, 1e-2])


@dataclass(frozen=True)
class GpModel:
    hyper: GpHyper
    inputs: np.ndarray
    targets: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    log_marginal_likelihood: float


def squared_exponential(A, B, hyper):
    """sigma_f^2 * exp(-|a - b|^2 / (2 l^2))"""
    gamma = 1.0 / (2.0 * hyper.lengthscale ** 2)
    return hyper.signal_std ** 2 * rbf_kernel(_as_matrix(A), _as_matrix(B), gamma=gamma)


def gp_fit(X, y, hyper):
    """
    Cholesky of K + (sigma_n^2 + jitter) I, with jitter escalating from 1e-10 to
    1e-6 until the factorization succeeds.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    n = len(X)
    if n == 0:
        raise ValueError("GP needs at least one training point")
    if len(y) != n:
        raise ValueError(f"{n} inputs but {len(y)} targets")

    K = squared_exponential(X, X, hyper) + hyper.noise_std ** 2 * np.eye(n)
    for jitter in GP_JITTERS:
        try:
            L = cholesky(K + jitter * np.eye(n), lower=True)
            break
        except LinAlgError:
            logger.warning(f"Covariance not positive definite with jitter {jitter:.0e}; escalating")
    else:
        eig = np.linalg.eigvalsh(K)
        message = (f"Covariance not positive definite after jitter {GP_JITTERS[-1]:.0e} "
                   f"(n={n}, min eigenvalue {eig[0]:.3e}, max {eig[-1]:.3e}, hyper={hyper.model_dump()})")
        logger.error(message)
        raise NotPositiveDefinite(message)

    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
    return GpModel(hyper=hyper, inputs=X, targets=y, chol=L, alpha=alpha, jitter=jitter,
                   log_marginal_likelihood=float(lml))


def gp_predict(model, X):
    """Posterior mean, std and the mean +/- 3 std interval of the latent function."""
    Ks = squared_exponential(X, model.inputs, model.hyper)
    mean = Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    var = np.maximum(model.hyper.signal_std ** 2 - np.sum(v ** 2, axis=0), 0.0)
    std = np.sqrt(var)
    return mean, std, mean - UNCERTAINTY_SIGMAS * std, mean + UNCERTAINTY_SIGMAS * std


def gp_select(X, y, grid=None):
    """Grid search maximizing the log-marginal likelihood; returns (best model, [(hyper, lml)])."""
    grid = grid or GpGrid()
    best, table = None, []
    for ell, sf, sn in product(grid.lengthscale, grid.signal_std, grid.noise_std):
        hyper = GpHyper(lengthscale=ell, signal_std=sf, noise_std=sn)
        try:
            model = gp_fit(X, y, hyper)
        except NotPositiveDefinite:
            continue
        table.append((hyper, model.log_marginal_likelihood))
        if best is None or model.log_marginal_likelihood > best.log_marginal_likelihood:
            best = model
    if best is None:
        raise NotPositiveDefinite("No grid point produced a positive definite covariance")
    logger.info(f"GP hyperparameters: {best.hyper.model_dump()} (lml={best.log_marginal_likelihood:.4f})")
    return best, table


# -------------------------------- DAREK ---------------------------------- #

class DarekModel(torch.nn.Module):
    """Two spline layers: input -> hidden_dim -> output_dim."""

    def __init__(self, input_dim, hidden_dim, output_dim, order=3, intervals=4, seed=0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.order = order
        self.layer1 = SplineBlock(input_dim, hidden_dim, order, intervals, generator)
        self.layer2 = SplineBlock(hidden_dim, output_dim, order, intervals, generator)

    @property
    def output_block(self):
        return self.layer2

    def features(self, X):
        return self.layer1(X)

    def feature_parameters(self):
        return list(self.layer1.parameters())

    def forward(self, X):
        hidden = self.layer1(X)
        return self.layer2(hidden), hidden

    def normalize_(self, tol=1e-10, max_iters=100):
        return 0

    @torch.no_grad()
    def regrid(self, knot_inputs, refit=True):
        knot_inputs = torch.as_tensor(knot_inputs, dtype=DTYPE)
        degenerate = self.layer1.regrid(knot_inputs, refit=refit)
        self.layer2.regrid(self.layer1(knot_inputs), refit=refit)
        return degenerate


class DarekSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_dim: int = Field(5, ge=1)
    spline_order: int = Field(3, ge=1)
    spline_intervals: int = Field(4, ge=1)
    n_knots: int = Field(9, ge=2)
    knot_strategy: Literal["auto", "quantile", "farthest-point"] = "auto"
    lipschitz_f: float = Field(10.0, gt=0)
    lipschitz_kp1: float = Field(10.0, ge=0)


def darek_train(X, Y, settings, train_cfg, triple):
    """Train a DAREK network whose layer grids follow the knot samples and their hidden outputs."""
    X, Y = _as_matrix(X), _as_matrix(Y)
    model = DarekModel(X.shape[1], settings.hidden_dim, Y.shape[1], settings.spline_order,
                       settings.spline_intervals, seed=train_cfg.seed)
    return train(model, X, Y, train_cfg, triple.inputs)


@dataclass(frozen=True)
class DarekEstimator:
    model: DarekModel
    knots: DarekKnots
    budget: LipschitzBudget

    def bound(self, x):
        return darek_two_layer_bound(self.model, x, self.knots, self.budget)

    def predict(self, X):
        return predict(self.model, X)

    def rebudget(self, lipschitz_f):
        return replace(self, budget=respread_budget(self.budget, lipschitz_f))


def fit_darek(X, Y, settings, train_cfg, triple=None):
    X, Y = _as_matrix(X), _as_matrix(Y)
    if triple is None:
        triple = select_knots(X, Y, settings.n_knots, settings.knot_strategy, settings.spline_order)
    result = darek_train(X, Y, settings, train_cfg, triple)
    budget = make_budget(settings.lipschitz_f, X.shape[1], 1, settings.hidden_dim,
                         settings.lipschitz_kp1, settings.spline_order)
    knots = compute_hidden_knots(result.model, triple)
    return DarekEstimator(model=result.model, knots=knots, budget=budget), result


# ------------------------------- ENSEMBLE -------------------------------- #

class EnsembleSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    members: int = Field(10, ge=2)
    hidden_dim: int = Field(5, ge=1)
    spline_order: int = Field(3, ge=1)
    spline_intervals: int = Field(4, ge=1)
    same_seed: bool = False


@dataclass(frozen=True)
class EnsembleModel:
    members: list
    seeds: list

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError(f"An ensemble needs at least 2 members, got {len(self.members)}")


def _train_member(args):
    X, Y, darek_settings, train_cfg, triple = args
    torch.set_num_threads(1)
    return darek_train(X, Y, darek_settings, train_cfg, triple).model


def ensemble_train(X, Y, settings, train_cfg, triple, jobs=1):
    """Members differ only in their seed (train_cfg.seed + i); `jobs` > 1 trains them in a process pool."""
    X, Y = _as_matrix(X), _as_matrix(Y)
    member_settings = DarekSettings(hidden_dim=settings.hidden_dim, spline_order=settings.spline_order,
                                    spline_intervals=settings.spline_intervals)
    seeds = [train_cfg.seed if settings.same_seed else train_cfg.seed + i for i in range(settings.members)]
    tasks = [(X, Y, member_settings, train_cfg.model_copy(update={"seed": s}), triple) for s in seeds]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            members = list(pool.map(_train_member, tasks))
    else:
        members = [darek_train(*task).model for task in tasks]
    logger.info(f"Trained {len(members)} ensemble members (seeds {seeds[0]}..{seeds[-1]})")
    return EnsembleModel(members=members, seeds=seeds)


def ensemble_predict(model, X):
    """Mean and (population) std over members, with the mean +/- 3 std interval; shapes (n, m)."""
    outputs = np.stack([predict(member, X) for member in model.members])
    mean = outputs.mean(axis=0)
    std = outputs.std(axis=0)
    return mean, std, mean - UNCERTAINTY_SIGMAS * std, mean + UNCERTAINTY_SIGMAS * std


def violation_rate(truth, lower, upper):
    """Percentage of points whose true value leaves the interval."""
    truth = np.asarray(truth, dtype=float).reshape(np.shape(lower))
    return 100.0 * float(np.mean((truth < lower) | (truth > upper)))


__all__ = [
    "GpHyper", "GpGrid", "GpModel", "squared_exponential", "gp_fit", "gp_predict", "gp_select",
    "DarekModel", "DarekSettings", "DarekEstimator", "darek_train", "fit_darek",
    "EnsembleSettings", "EnsembleModel", "ensemble_train", "ensemble_predict", "violation_rate",
]
