"""
Distance-aware worst-case error bounds.

A trained model keeps a small set of training samples as knots. The bound at a
query is the spline-block error over the feature knots plus the MLP-block error
(distance to the nearest knot coordinate) propagated through the spline
Lipschitz constant.
"""

import logging
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from sklearn.metrics.pairwise import euclidean_distances

from kdarek.errors import DegenerateColumn, DimensionMismatch, TooFewSamples
from kdarek.interp import (
    KnotWindow,
    LipschitzOrderK,
    interpolation_error_bound,
    newton_max_abs,
    newton_poly,
    select_interval,
    separate_knots,
    spline_error_bound,
    window_for,
)
from kdarek.netcore import DTYPE, KdarekModel, forward, predict, train

logger = logging.getLogger("kdarek.bounds")


# ------------------------------- TYPES ----------------------------------- #

@dataclass(frozen=True)
class KnotTriple:
    """
    Selected samples (T, Y) and, once a model exists, their features K.

    `features` rows line up with `inputs`; `sorted_features[:, c]` is column c
    ascending, taken from `features[permutations[c], c]` (plus jitter when the
    column is degenerate).
    """

    inputs: np.ndarray
    targets: np.ndarray
    sample_ids: np.ndarray
    input_order: np.ndarray
    features: np.ndarray = None
    sorted_features: np.ndarray = None
    permutations: np.ndarray = None
    degenerate_columns: tuple = ()

    @property
    def n_knots(self):
        return len(self.inputs)


@dataclass(frozen=True)
class ResidualMatrix:
    values: np.ndarray  # signed f_hat(T) - Y, shape (m_k, m)


@dataclass(frozen=True)
class LipschitzBudget:
    lipschitz_f: float
    input_dim: int
    n_layers: int
    n_splines: int
    layer_cap: float
    mlp_lipschitz: float
    spline_lipschitz: float
    higher_order: LipschitzOrderK


@dataclass(frozen=True)
class ErrorBound:
    total: np.ndarray
    spline_term: np.ndarray
    mlp_term: float
    propagation_gain: float
    nearest_knot_ids: tuple
    prediction: np.ndarray = None

    def as_dict(self):
        return {
            "total": self.total.tolist(),
            "spline_term": self.spline_term.tolist(),
            "mlp_term": float(self.mlp_term),
            "propagation_gain": float(self.propagation_gain),
            "nearest_knot_ids": list(self.nearest_knot_ids),
            "prediction": None if self.prediction is None else self.prediction.tolist(),
        }


# --------------------------- KNOT SELECTION ------------------------------ #

def _as_matrix(a):
    a = np.asarray(a, dtype=float)
    return a.reshape(len(a), -1)


def _farthest_point(X, m_k):
    """Greedy max-min selection seeded by the sample nearest to the centroid; ties -> lowest index."""
    first = int(np.argmin(euclidean_distances(X, X.mean(axis=0, keepdims=True))[:, 0]))
    chosen = [first]
    reach = euclidean_distances(X, X[[first]])[:, 0]
    reach[first] = -1.0
    while len(chosen) < m_k:
        nxt = int(np.argmax(reach))
        chosen.append(nxt)
        reach = np.minimum(reach, euclidean_distances(X, X[[nxt]])[:, 0])
        reach[chosen] = -1.0
    return np.sort(np.array(chosen))


def select_knots(X, Y, m_k, strategy="auto", order=3):
    """
    Keep m_k training samples as knots.

    `quantile` (d = 1) takes samples at uniform quantiles of x, both extremes
    included; `farthest-point` runs greedy max-min selection. `auto` picks by d.
    """
    X, Y = _as_matrix(X), _as_matrix(Y)
    n, d = X.shape
    if m_k < order + 1:
        raise TooFewSamples(f"Order {order} splines need at least {order + 1} knots, got m_k={m_k}")
    if n < m_k:
        raise TooFewSamples(f"Cannot select {m_k} knots from {n} samples")
    if strategy == "auto":
        strategy = "quantile" if d == 1 else "farthest-point"

    if strategy == "quantile":
        if d != 1:
            raise ValueError(f"Quantile knot selection needs 1-D inputs, got d={d}")
        by_x = np.argsort(X[:, 0], kind="stable")
        ids = by_x[np.floor(np.linspace(0, n - 1, m_k) + 0.5).astype(int)]
    elif strategy == "farthest-point":
        ids = _farthest_point(X, m_k)
    else:
        raise ValueError(f"Unknown knot selection strategy: {strategy}")

    inputs = X[ids]
    order_per_dim = np.stack([np.argsort(inputs[:, i], kind="stable") for i in range(d)])
    return KnotTriple(inputs=inputs, targets=Y[ids], sample_ids=np.asarray(ids), input_order=order_per_dim)


def _sorted_columns(values, strict):
    columns, perms, degenerate = [], [], []
    for c in range(values.shape[1]):
        ordered, perm, jittered = separate_knots(values[:, c])
        columns.append(ordered)
        perms.append(perm)
        if jittered:
            degenerate.append(c)
    if degenerate:
        if strict:
            raise DegenerateColumn(degenerate)
        logger.warning(f"Feature column(s) {degenerate} have near-duplicate knots; jittered")
    return np.column_stack(columns), np.stack(perms), tuple(degenerate)


def compute_feature_knots(model, triple, strict=False):
    """Pass T through the MLP block and keep the features, sorted per column."""
    with torch.no_grad():
        features = model.features(torch.as_tensor(triple.inputs, dtype=DTYPE)).numpy()
    sorted_features, perms, degenerate = _sorted_columns(features, strict)
    return replace(triple, features=features, sorted_features=sorted_features,
                   permutations=perms, degenerate_columns=degenerate)


def compute_residuals(model, triple):
    return ResidualMatrix(values=predict(model, triple.inputs) - triple.targets)


# ------------------------------ BUDGET ----------------------------------- #

def make_budget(lipschitz_f, input_dim, n_layers, n_splines, lipschitz_kp1, order=3):
    """Split L_f equally over the L MLP layers and the spline layer: L_h = (L_f / d)^(1/(L+1))."""
    for name, value in (("lipschitz_f", lipschitz_f), ("input_dim", input_dim),
                        ("n_layers", n_layers), ("n_splines", n_splines)):
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")
    layer_cap = (lipschitz_f / input_dim) ** (1.0 / (n_layers + 1))
    return LipschitzBudget(
        lipschitz_f=float(lipschitz_f),
        input_dim=int(input_dim),
        n_layers=int(n_layers),
        n_splines=int(n_splines),
        layer_cap=layer_cap,
        mlp_lipschitz=layer_cap ** n_layers,
        spline_lipschitz=layer_cap / n_splines,
        higher_order=LipschitzOrderK(order=order + 1, value=float(lipschitz_kp1)),
    )


def respread_budget(budget, lipschitz_f):
    """
    Move a trained budget to another system constant L_f.

    The MLP layers keep the caps they were trained under, so L_MLP is unchanged
    and the spline block takes the rest: L_sp = L_f / (d * L_MLP * q).
    """
    if not lipschitz_f > 0:
        raise ValueError(f"lipschitz_f must be positive, got {lipschitz_f}")
    spline = lipschitz_f / (budget.input_dim * budget.mlp_lipschitz * budget.n_splines)
    return replace(budget, lipschitz_f=float(lipschitz_f), spline_lipschitz=spline)


# ------------------------------ BOUNDS ----------------------------------- #

def _nearest(sorted_column, value):
    """Position of the nearest entry of an ascending column; ties -> lower position."""
    j = int(np.searchsorted(sorted_column, value))
    if j == 0:
        return 0
    if j == len(sorted_column):
        return j - 1
    return j - 1 if value - sorted_column[j - 1] <= sorted_column[j] - value else j


def mlp_block_error(x, triple, budget, lipschitz_per_dim=None):
    """
    sum_i L_MLP_i * |x_i - tau*_i| with tau*_i the nearest knot coordinate in dimension i.

    Returns (u_MLP, knot row of each tau*_i).
    """
    x = np.asarray(x, dtype=float).ravel()
    d = triple.inputs.shape[1]
    if len(x) != d:
        raise DimensionMismatch(f"Expected {d} input dimension(s), got {len(x)}")
    if lipschitz_per_dim is None:
        lipschitz_per_dim = np.full(d, budget.mlp_lipschitz)

    u_mlp, nearest = 0.0, []
    for i in range(d):
        rows = triple.input_order[i]
        column = triple.inputs[rows, i]
        pos = _nearest(column, x[i])
        nearest.append(int(rows[pos]))
        u_mlp += lipschitz_per_dim[i] * abs(x[i] - column[pos])
    return u_mlp, tuple(nearest)


def distribute_residuals(residuals, q):
    """Every spline of group r gets E[:, r] / q."""
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    E = np.asarray(getattr(residuals, "values", residuals), dtype=float)
    return np.repeat((E / q)[np.newaxis], q, axis=0)


def _column_error(value, sorted_knots, sorted_residuals, lipschitz):
    """
    u = u_bar + |P[e]| of one spline column, for every output at once.

    Outside the knot column the residual interpolant is replaced by its largest
    magnitude between the edge knot and the query.
    """
    order = lipschitz.order - 1
    j = select_interval(sorted_knots, value)
    start, stop = window_for(sorted_knots, j, order)
    window = KnotWindow(sorted_knots[start:stop], sorted_residuals[start:stop], order)
    if sorted_knots[0] <= value <= sorted_knots[-1]:
        return spline_error_bound(value, window, lipschitz)
    if value < sorted_knots[0]:
        residual = newton_max_abs(newton_poly(window), value, sorted_knots[0])
    else:
        residual = newton_max_abs(newton_poly(window), sorted_knots[-1], value)
    return interpolation_error_bound(value, window, lipschitz) + residual


def spline_block_errors(xi, triple, shares, budget):
    """u_sp for every output group, shape (m,)."""
    q = triple.sorted_features.shape[1]
    total = 0.0
    for i in range(q):
        total = total + _column_error(xi[i], triple.sorted_features[:, i],
                                      shares[i][triple.permutations[i]], budget.higher_order)
    return np.asarray(total, dtype=float)


def spline_block_error(xi, triple, shares, budget, r):
    return float(spline_block_errors(xi, triple, shares, budget)[r])


def total_bound(model, x, triple, budget, residuals):
    """u_f = u_sp + L_sp * u_MLP for every output."""
    prediction, xi = forward(model, x)
    shares = distribute_residuals(residuals, triple.sorted_features.shape[1])
    spline = spline_block_errors(xi, triple, shares, budget)
    u_mlp, nearest = mlp_block_error(x, triple, budget)
    return ErrorBound(
        total=spline + budget.spline_lipschitz * u_mlp,
        spline_term=spline,
        mlp_term=u_mlp,
        propagation_gain=budget.spline_lipschitz,
        nearest_knot_ids=nearest,
        prediction=prediction,
    )


# --------------------------- DAREK BASELINE ------------------------------ #

@dataclass(frozen=True)
class DarekKnots:
    triple: KnotTriple
    hidden: np.ndarray
    sorted_hidden: np.ndarray
    permutations: np.ndarray
    residuals: ResidualMatrix
    degenerate_columns: tuple = ()


def compute_hidden_knots(model, triple, strict=False):
    """Layer-2 knots are the layer-1 outputs of the knot samples."""
    with torch.no_grad():
        f, hidden = model(torch.as_tensor(triple.inputs, dtype=DTYPE))
    hidden = hidden.numpy()
    sorted_hidden, perms, degenerate = _sorted_columns(hidden, strict)
    return DarekKnots(triple=triple, hidden=hidden, sorted_hidden=sorted_hidden, permutations=perms,
                      residuals=ResidualMatrix(values=f.numpy() - triple.targets),
                      degenerate_columns=degenerate)


def darek_two_layer_bound(model, x, knots, budget):
    """
    u = u_h2(h1(x); h1(T)) + L_h2 * 1^T u_h1(x; T).

    Layer-1 splines interpolate their own knot outputs, so their knot error is
    zero and every hidden unit carries the same sum of interpolation terms over
    the input dimensions. The output residual is shared equally by the layer-2
    splines of each group.
    """
    x = np.asarray(x, dtype=float).ravel()
    triple = knots.triple
    d = triple.inputs.shape[1]
    if len(x) != d:
        raise DimensionMismatch(f"Expected {d} input dimension(s), got {len(x)}")
    with torch.no_grad():
        f, hidden = model(torch.as_tensor(x[np.newaxis], dtype=DTYPE))
    f, hidden = f[0].numpy(), hidden[0].numpy()
    lipschitz = budget.higher_order
    order = lipschitz.order - 1

    per_unit, nearest = 0.0, []
    for p in range(d):
        rows = triple.input_order[p]
        column = triple.inputs[rows, p]
        nearest.append(int(rows[_nearest(column, x[p])]))
        column, _, _ = separate_knots(column)
        start, stop = window_for(column, select_interval(column, x[p]), order)
        window = KnotWindow(column[start:stop], np.zeros(stop - start), order)
        per_unit += interpolation_error_bound(x[p], window, lipschitz)
    propagated = len(hidden) * per_unit

    shares = distribute_residuals(knots.residuals, len(hidden))
    spline = 0.0
    for j in range(len(hidden)):
        spline = spline + _column_error(hidden[j], knots.sorted_hidden[:, j],
                                        shares[j][knots.permutations[j]], lipschitz)
    spline = np.asarray(spline, dtype=float)

    gain = budget.spline_lipschitz
    return ErrorBound(total=spline + gain * propagated, spline_term=spline, mlp_term=propagated,
                      propagation_gain=gain, nearest_knot_ids=tuple(nearest), prediction=f)


# ------------------------------ ESTIMATOR -------------------------------- #

class KdarekSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    widths: list[int] = Field(default_factory=lambda: [1, 5])
    spline_order: int = Field(3, ge=1)
    spline_intervals: int = Field(4, ge=1)
    n_knots: int = Field(9, ge=2)
    knot_strategy: Literal["auto", "quantile", "farthest-point"] = "auto"
    lipschitz_f: float = Field(10.0, gt=0)
    lipschitz_kp1: float = Field(10.0, ge=0)


@dataclass(frozen=True)
class KdarekEstimator:
    model: KdarekModel
    triple: KnotTriple
    residuals: ResidualMatrix
    budget: LipschitzBudget

    def bound(self, x):
        return total_bound(self.model, x, self.triple, self.budget, self.residuals)

    def predict(self, X):
        return predict(self.model, X)

    def rebudget(self, lipschitz_f):
        """Same model and knots, bound evaluated under another system Lipschitz constant."""
        return replace(self, budget=respread_budget(self.budget, lipschitz_f))


def fit_kdarek(X, Y, settings, train_cfg, triple=None):
    """Select knots, build a model under the Lipschitz budget, train it, and precompute residuals."""
    X, Y = _as_matrix(X), _as_matrix(Y)
    d, m = X.shape[1], Y.shape[1]
    if triple is None:
        triple = select_knots(X, Y, settings.n_knots, settings.knot_strategy, settings.spline_order)
    n_layers = len(settings.widths) - 1
    budget = make_budget(settings.lipschitz_f, d, n_layers, settings.widths[-1],
                         settings.lipschitz_kp1, settings.spline_order)
    model = KdarekModel(d, settings.widths, m, caps=[budget.layer_cap] * n_layers,
                        order=settings.spline_order, intervals=settings.spline_intervals,
                        seed=train_cfg.seed)
    result = train(model, X, Y, train_cfg, triple.inputs)
    triple = compute_feature_knots(model, triple)
    estimator = KdarekEstimator(model=model, triple=triple, residuals=compute_residuals(model, triple),
                                budget=budget)
    return estimator, result


def bounds_to_rows(X, bounds):
    """CSV header and rows: x*, f_hat, u_total and u_sp per output, u_MLP, nearest knot ids."""
    X = _as_matrix(X)
    d, m = X.shape[1], len(bounds[0].total)
    header = ([f"x{i}" for i in range(d)] + [f"f_hat{r}" for r in range(m)]
              + [f"u_total{r}" for r in range(m)] + [f"u_sp{r}" for r in range(m)]
              + ["u_mlp"] + [f"nearest{i}" for i in range(d)])
    rows = []
    for x, b in zip(X, bounds):
        rows.append(list(x) + list(b.prediction) + list(b.total) + list(b.spline_term)
                    + [b.mlp_term] + list(b.nearest_knot_ids))
    return header, rows
