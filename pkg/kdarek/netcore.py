"""
K-DAREK network: d spectrally normalized ReLU-MLPs (one per input dimension)
whose outputs are summed into a feature vector, followed by a block of
learnable B-splines, one group of q splines per output.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from kdarek.errors import DimensionMismatch, NonFiniteLoss, TooFewKnots
from kdarek.interp import separate_knots

logger = logging.getLogger("kdarek.netcore")

DTYPE = torch.float64


# ------------------------- SPECTRAL NORMALIZATION ------------------------ #

@dataclass
class PowerIteration:
    sigma: float
    u: torch.Tensor
    iterations: int
    converged: bool


def sigma_max(weight, u=None, tol=1e-6, max_iters=100):
    """
    Largest singular value by power iteration, warm-started from `u`.

    Returns the best estimate with converged=False (and a warning) when the
    relative change has not dropped below `tol` after `max_iters` iterations.
    """
    W = torch.as_tensor(weight, dtype=DTYPE)
    if W.ndim != 2 or W.numel() == 0:
        raise ValueError(f"Expected a nonempty matrix, got shape {tuple(W.shape)}")
    if u is None:
        u = torch.randn(W.shape[0], generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    u = F.normalize(torch.as_tensor(u, dtype=DTYPE), dim=0)

    sigma, sigma_prev = 0.0, 0.0
    with torch.no_grad():
        for it in range(1, max_iters + 1):
            v = F.normalize(W.t() @ u, dim=0)
            wv = W @ v
            sigma = float(torch.linalg.vector_norm(wv))
            if sigma == 0.0:
                if not torch.any(W != 0):
                    return PowerIteration(0.0, u, it, True)
                # iterate fell into the left null space; restart from the largest column
                u = F.normalize(W[:, int(torch.argmax(torch.linalg.vector_norm(W, dim=0)))], dim=0)
                continue
            u = wv / sigma
            if abs(sigma - sigma_prev) <= tol * sigma:
                return PowerIteration(sigma, u, it, True)
            sigma_prev = sigma

    logger.warning(f"Power iteration did not converge in {max_iters} iterations (sigma~{sigma:.6g})")
    return PowerIteration(sigma, u, max_iters, False)


def spectral_normalize(weight, cap, u=None, tol=1e-6, max_iters=100):
    """cap * W / sigma_max(W) when sigma_max(W) > cap, else W unchanged."""
    if not cap > 0:
        raise ValueError(f"Lipschitz cap must be positive, got {cap}")
    W = torch.as_tensor(weight, dtype=DTYPE)
    estimate = sigma_max(W, u=u, tol=tol, max_iters=max_iters)
    if estimate.sigma > cap:
        return W * (cap / estimate.sigma)
    return W


# ----------------------------- SNR-MLP ----------------------------------- #

def _uniform(shape, bound, generator):
    return (2.0 * torch.rand(shape, generator=generator, dtype=DTYPE) - 1.0) * bound


class SnrMlp(torch.nn.Module):
    """ReLU MLP with linear output whose layers are kept under per-layer spectral caps."""

    def __init__(self, widths, caps, generator=None):
        super().__init__()
        widths = list(widths)
        if len(widths) < 2 or widths[0] != 1:
            raise ValueError(f"SNR-MLP widths must start at 1 and have at least one layer, got {widths}")
        if len(caps) != len(widths) - 1:
            raise ValueError(f"{len(widths) - 1} layers but {len(caps)} Lipschitz caps")
        if generator is None:
            generator = torch.Generator().manual_seed(0)

        self.widths = widths
        self.caps = [float(c) for c in caps]
        self.layers = torch.nn.ModuleList()
        for l, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            layer = torch.nn.Linear(fan_in, fan_out, dtype=DTYPE)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                layer.weight.copy_(_uniform((fan_out, fan_in), bound, generator))
                layer.bias.copy_(_uniform((fan_out,), bound, generator))
            self.layers.append(layer)
            self.register_buffer(f"power_u_{l}", torch.randn(fan_out, generator=generator, dtype=DTYPE))
        self.normalize_()

    @property
    def n_layers(self):
        return len(self.layers)

    def forward(self, x):
        for l, layer in enumerate(self.layers):
            x = layer(x)
            if l < len(self.layers) - 1:
                x = torch.relu(x)
        return x

    @torch.no_grad()
    def normalize_(self, tol=1e-10, max_iters=100):
        """Rescale every layer over its cap in place; returns the number of non-converged layers."""
        missed = 0
        for l, (layer, cap) in enumerate(zip(self.layers, self.caps)):
            buffer = getattr(self, f"power_u_{l}")
            estimate = sigma_max(layer.weight, u=buffer, tol=tol, max_iters=max_iters)
            buffer.copy_(estimate.u)
            missed += not estimate.converged
            if estimate.sigma > cap:
                layer.weight.mul_(cap / estimate.sigma)
        return missed


# ----------------------------- SPLINES ----------------------------------- #

def extended_knots(breakpoints, order):
    """Breakpoints padded with `order` knots on each side at the edge spacings."""
    b = np.asarray(breakpoints, dtype=float)
    left = b[0] - (b[1] - b[0]) * np.arange(order, 0, -1)
    right = b[-1] + (b[-1] - b[-2]) * np.arange(1, order + 1)
    return np.concatenate([left, b, right])


class SplineBlock(torch.nn.Module):
    """
    `out_features` groups of `in_features` order-k B-splines; output r is
    sum_i s_{r,i}(z_i). Each spline lives on its own grid of `intervals`
    polynomial pieces; queries outside the grid use the edge piece.
    """

    def __init__(self, in_features, out_features, order=3, intervals=4, generator=None, init_std=0.1):
        super().__init__()
        if intervals < 1:
            raise ValueError(f"A spline needs at least one interval, got {intervals}")
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        self.in_features = in_features
        self.out_features = out_features
        self.order = order
        self.intervals = intervals

        default = extended_knots(np.linspace(-1.0, 1.0, intervals + 1), order)
        self.register_buffer("grid", torch.tensor(np.tile(default, (in_features, 1)), dtype=DTYPE))
        self.coefficients = torch.nn.Parameter(
            init_std * torch.randn(out_features, in_features, self.n_coef, generator=generator, dtype=DTYPE)
        )

    @property
    def n_coef(self):
        return self.intervals + self.order

    def knot_vector(self, i):
        return self.grid[i].detach().numpy().copy()

    def breakpoints(self, i):
        return self.knot_vector(i)[self.order:self.order + self.intervals + 1]

    def cell_widths(self):
        """Width of one grid interval for every input column."""
        core = self.grid[:, self.order:self.order + self.intervals + 1]
        return (core[:, -1] - core[:, 0]) / self.intervals

    @torch.no_grad()
    def set_breakpoints(self, i, breakpoints):
        if len(breakpoints) != self.intervals + 1:
            raise ValueError(f"Expected {self.intervals + 1} breakpoints, got {len(breakpoints)}")
        self.grid[i].copy_(torch.as_tensor(extended_knots(breakpoints, self.order), dtype=DTYPE))

    def spans(self, i, z):
        """Knot-vector span index of each query, clamped to the edge pieces."""
        breaks = self.grid[i, self.order:self.order + self.intervals + 1].contiguous()
        interval = torch.searchsorted(breaks, z.detach().contiguous(), right=True) - 1
        return interval.clamp(0, self.intervals - 1) + self.order

    def local_basis(self, i, z, span):
        """The k+1 basis functions that are nonzero on `span`, evaluated at z (de Boor / Cox)."""
        t = self.grid[i]
        basis = [torch.ones_like(z)]
        left, right = [None], [None]
        for p in range(1, self.order + 1):
            left.append(z - t[span + 1 - p])
            right.append(t[span + p] - z)
            saved = torch.zeros_like(z)
            nxt = []
            for r in range(p):
                temp = basis[r] / (right[r + 1] + left[p - r])
                nxt.append(saved + right[r + 1] * temp)
                saved = left[p - r] * temp
            nxt.append(saved)
            basis = nxt
        return torch.stack(basis, dim=-1)

    def _span_index(self, span):
        return (span - self.order).unsqueeze(1) + torch.arange(self.order + 1)

    def evaluate_feature(self, i, z, span=None):
        """Outputs of the splines s_{., i} at z, shape (n, out_features)."""
        if span is None:
            span = self.spans(i, z)
        elif isinstance(span, int):
            span = torch.full(z.shape, span, dtype=torch.long)
        basis = self.local_basis(i, z, span)
        selected = self.coefficients[:, i, :][:, self._span_index(span)]
        return torch.einsum("nk,onk->no", basis, selected)

    def basis_matrix(self, i, z):
        span = self.spans(i, z)
        B = torch.zeros(len(z), self.n_coef, dtype=DTYPE)
        return B.scatter(1, self._span_index(span), self.local_basis(i, z, span))

    def forward(self, Z):
        out = self.evaluate_feature(0, Z[:, 0])
        for i in range(1, self.in_features):
            out = out + self.evaluate_feature(i, Z[:, i])
        return out

    @torch.no_grad()
    def regrid(self, knot_features, refit=True, samples_per_knot=4):
        """
        Move every grid onto the sorted knot features of its input column.

        With `refit`, coefficients are refit by least squares to the old spline
        sampled at samples_per_knot * m_k points over the new range. Returns the
        indices of degenerate (jittered) columns.
        """
        knot_features = torch.as_tensor(knot_features, dtype=DTYPE)
        m_k = knot_features.shape[0]
        if m_k < self.intervals + 1:
            raise TooFewKnots(f"{self.intervals} intervals need {self.intervals + 1} knots, got {m_k}")
        picks = np.floor(np.linspace(0, m_k - 1, self.intervals + 1) + 0.5).astype(int)

        degenerate = []
        for i in range(self.in_features):
            ordered, _, jittered = separate_knots(knot_features[:, i].numpy())
            if jittered:
                degenerate.append(i)
            breakpoints = ordered[picks]
            if not refit:
                self.set_breakpoints(i, breakpoints)
                continue
            z = torch.linspace(breakpoints[0], breakpoints[-1], samples_per_knot * m_k, dtype=DTYPE)
            target = self.evaluate_feature(i, z)
            self.set_breakpoints(i, breakpoints)
            solution = torch.linalg.lstsq(self.basis_matrix(i, z), target).solution
            self.coefficients[:, i, :] = solution.T
        if degenerate:
            logger.debug(f"Jittered degenerate spline grid column(s) {degenerate}")
        return degenerate


# ----------------------------- MODEL ------------------------------------- #

class KdarekModel(torch.nn.Module):
    """d SNR-MLPs summed into q features, then m groups of q splines."""

    def __init__(self, input_dim, widths, output_dim, caps, order=3, intervals=4, seed=0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.input_dim = input_dim
        self.widths = list(widths)
        self.feature_dim = self.widths[-1]
        self.output_dim = output_dim
        self.order = order
        self.mlps = torch.nn.ModuleList(SnrMlp(widths, caps, generator) for _ in range(input_dim))
        self.spline_block = SplineBlock(self.feature_dim, output_dim, order, intervals, generator)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def output_block(self):
        return self.spline_block

    def feature_parameters(self):
        return list(self.mlps.parameters())

    def features(self, X):
        xi = self.mlps[0](X[:, 0:1])
        for p in range(1, self.input_dim):
            xi = xi + self.mlps[p](X[:, p:p + 1])
        return xi

    def forward(self, X):
        xi = self.features(X)
        return self.spline_block(xi), xi

    def normalize_(self, tol=1e-10, max_iters=100):
        return sum(mlp.normalize_(tol, max_iters) for mlp in self.mlps)

    @torch.no_grad()
    def regrid(self, knot_inputs, refit=True):
        xi = self.features(torch.as_tensor(knot_inputs, dtype=DTYPE))
        return self.spline_block.regrid(xi, refit=refit)


def _as_batch(x, dim):
    x = torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)
    if x.ndim == 1:
        x = x.unsqueeze(0)
    if x.shape[-1] != dim:
        raise DimensionMismatch(f"Expected {dim} input dimension(s), got {x.shape[-1]}")
    return x


@torch.no_grad()
def mlp_forward(mlp, x_p):
    return mlp(torch.tensor([[float(x_p)]], dtype=DTYPE))[0].numpy()


@torch.no_grad()
def spline_forward(block, xi):
    return block(_as_batch(xi, block.in_features))[0].numpy()


@torch.no_grad()
def forward(model, x):
    """(f, xi) for a single input vector."""
    f, xi = model(_as_batch(x, model.input_dim))
    return f[0].numpy(), xi[0].numpy()


@torch.no_grad()
def predict(model, X):
    X = np.asarray(X, dtype=float)
    return model(_as_batch(X.reshape(len(X), -1), model.input_dim))[0].numpy()


def count_parameters(model):
    """Spline coefficients plus MLP weights and biases; grids are buffers."""
    return sum(p.numel() for p in model.parameters())


# ----------------------------- TRAINING ---------------------------------- #

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(500, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    seed: int = Field(0, ge=0)
    knot_regrid_period: int = Field(10, ge=1)
    max_feature_shift: float = Field(0.02, gt=0)
    power_tol: float = Field(1e-10, gt=0)
    power_max_iters: int = Field(100, ge=1)
    log_every: int = Field(100, ge=1)


@dataclass
class TrainResult:
    model: torch.nn.Module
    loss_history: list = field(default_factory=list)
    slope_audit: np.ndarray = None
    power_warnings: int = 0
    shortened_steps: int = 0


def spline_slope_audit(block, samples_per_interval=32):
    """Empirical max |d s_{r,i}/d z| over each grid, summed over the group: one value per output."""
    slopes = np.zeros(block.out_features)
    for i in range(block.in_features):
        b = block.breakpoints(i)
        z = torch.linspace(b[0], b[-1], samples_per_interval * block.intervals + 1, dtype=DTYPE)
        z.requires_grad_(True)
        values = block.evaluate_feature(i, z)
        for r in range(block.out_features):
            (grad,) = torch.autograd.grad(values[:, r].sum(), z, retain_graph=True)
            slopes[r] += float(grad.abs().max())
    return slopes


@torch.no_grad()
def limit_feature_step(model, previous, X, features_before, max_shift):
    """
    Pull the feature parameters back toward `previous` so that no training
    feature moves by more than `max_shift` grid cells in one step.

    Returns the fraction of the step that was kept.
    """
    cells = model.output_block.cell_widths().clamp_min(torch.finfo(DTYPE).tiny)
    moved = (model.features(X) - features_before).abs().amax(dim=0) / cells
    worst = float(moved.max())
    if math.isfinite(worst) and worst <= max_shift:
        return 1.0
    kept = max_shift / worst if math.isfinite(worst) else 0.0
    for param, before in zip(model.feature_parameters(), previous):
        param.copy_(before + kept * (param - before))
    return kept


def train(model, X, Y, cfg, knot_inputs):
    """
    Full-batch MSE training with a spectral normalization pass after every step.

    Steps on the spline coefficients are taken as the optimizer proposes them;
    steps on the feature parameters are shortened so that no training feature
    moves by more than `max_feature_shift` grid cells at once.

    Grids start on the features of `knot_inputs`, are regridded every
    `knot_regrid_period` epochs and once at the end. loss_history[e] is the loss
    before update e; the last entry is the loss of the returned model.
    """
    X_t = torch.as_tensor(np.asarray(X, dtype=float), dtype=DTYPE)
    Y_t = torch.as_tensor(np.asarray(Y, dtype=float), dtype=DTYPE)
    if X_t.ndim == 1:
        X_t = X_t.unsqueeze(1)
    if Y_t.ndim == 1:
        Y_t = Y_t.unsqueeze(1)
    if len(X_t) == 0:
        raise ValueError("Training set is empty")
    if X_t.shape[1] != model.input_dim or Y_t.shape[1] != model.output_dim or len(X_t) != len(Y_t):
        raise DimensionMismatch(
            f"Dataset shapes {tuple(X_t.shape)} -> {tuple(Y_t.shape)} do not fit a "
            f"{model.input_dim} -> {model.output_dim} model"
        )

    torch.manual_seed(cfg.seed)
    model.regrid(knot_inputs, refit=False)
    params = list(model.parameters())
    if cfg.optimizer == "adam":
        optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    else:
        optimizer = torch.optim.SGD(params, lr=cfg.learning_rate)

    history = []
    power_warnings = shortened = 0
    for epoch in range(cfg.epochs):
        optimizer.zero_grad()
        prediction, features = model(X_t)
        loss = torch.mean((prediction - Y_t) ** 2)
        value = float(loss.detach())
        if not math.isfinite(value):
            logger.error(f"Training diverged at epoch {epoch} (loss={value})")
            raise NonFiniteLoss(epoch, value)
        history.append(value)
        loss.backward()
        previous = [p.detach().clone() for p in model.feature_parameters()]
        optimizer.step()
        power_warnings += model.normalize_(cfg.power_tol, cfg.power_max_iters)
        if limit_feature_step(model, previous, X_t, features.detach(), cfg.max_feature_shift) < 1.0:
            shortened += 1

        if (epoch + 1) % cfg.knot_regrid_period == 0:
            model.regrid(knot_inputs, refit=True)
        if (epoch + 1) % cfg.log_every == 0:
            logger.info(f"epoch {epoch + 1}/{cfg.epochs} loss={value:.6g}")

    model.regrid(knot_inputs, refit=True)
    with torch.no_grad():
        history.append(float(torch.mean((model(X_t)[0] - Y_t) ** 2)))

    slopes = spline_slope_audit(model.output_block)
    logger.info(f"Training finished: loss {history[0]:.6g} -> {history[-1]:.6g}, "
                f"{shortened} shortened feature step(s), spline slope audit {np.round(slopes, 4).tolist()}")
    return TrainResult(model=model, loss_history=history, slope_audit=slopes,
                       power_warnings=power_warnings, shortened_steps=shortened)
