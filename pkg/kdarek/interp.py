"""
Newton divided-difference polynomials and the interpolation / spline error
bounds built on them.

Everything here is a pure function over immutable values. Window values may
carry a trailing output axis, shape (k+1, m), so all outputs of a spline group
share one window and one divided-difference pass.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from kdarek.errors import DuplicateKnots, EmptyKnots, LengthMismatch, TooFewKnots

KNOT_SEPARATION = 1e-10
KNOT_JITTER = 1e-9


def _separation_eps(knots):
    if len(knots) < 2:
        return 0.0
    return KNOT_SEPARATION * float(knots[-1] - knots[0])


def _check_knots(knots, values):
    if len(knots) == 0:
        raise LengthMismatch("At least one knot is required")
    if len(knots) != len(values):
        raise LengthMismatch(f"{len(knots)} knots but {len(values)} values")
    if len(knots) > 1:
        gaps = np.diff(knots)
        eps = _separation_eps(knots)
        if np.any(gaps <= eps):
            i = int(np.argmin(gaps))
            raise DuplicateKnots(
                f"Knots {knots[i]!r} and {knots[i + 1]!r} are closer than {eps:.3e}"
            )


@dataclass(frozen=True)
class KnotWindow:
    knots: np.ndarray
    values: np.ndarray
    order: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        _check_knots(knots, values)
        if len(knots) != self.order + 1:
            raise LengthMismatch(f"Order {self.order} needs {self.order + 1} knots, got {len(knots)}")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class NewtonPoly:
    window: KnotWindow
    coeffs: np.ndarray


@dataclass(frozen=True)
class LipschitzOrderK:
    order: int
    value: float

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"Lipschitz order must be >= 1, got {self.order}")
        if not self.value >= 0:
            raise ValueError(f"Lipschitz constant must be nonnegative, got {self.value}")


def divided_differences(knots, values):
    """Top edge of the divided-difference table: Newton-form coefficients."""
    knots = np.asarray(knots, dtype=float)
    coef = np.array(values, dtype=float, copy=True)
    _check_knots(knots, coef)

    n = len(knots)
    tail = (1,) * (coef.ndim - 1)
    for j in range(1, n):
        denom = (knots[j:] - knots[:n - j]).reshape((-1,) + tail)
        coef[j:] = (coef[j:] - coef[j - 1:n - 1]) / denom
    return coef


def newton_poly(window):
    return NewtonPoly(window=window, coeffs=divided_differences(window.knots, window.values))


def newton_eval(poly, x):
    """Nested (Horner) evaluation of the Newton form; extrapolates freely."""
    knots = poly.window.knots
    coeffs = poly.coeffs
    y = coeffs[-1]
    for i in range(len(coeffs) - 2, -1, -1):
        y = coeffs[i] + (x - knots[i]) * y
    return y


def newton_to_polynomial(poly):
    """Monomial-basis form of a scalar-valued Newton polynomial."""
    if poly.coeffs.ndim != 1:
        raise ValueError("Only scalar-valued Newton polynomials can be converted")
    knots = poly.window.knots
    p = Polynomial([poly.coeffs[-1]])
    for i in range(len(poly.coeffs) - 2, -1, -1):
        p = Polynomial([poly.coeffs[i]]) + Polynomial([-knots[i], 1.0]) * p
    return p


def newton_max_abs(poly, a, b):
    """max |P(z)| over z in [a, b]; per output when the window is vector valued."""
    lo, hi = (a, b) if a <= b else (b, a)
    if poly.coeffs.ndim > 1:
        flat = poly.coeffs.reshape(len(poly.coeffs), -1)
        out = np.empty(flat.shape[1])
        for c in range(flat.shape[1]):
            window = KnotWindow(poly.window.knots, poly.window.values.reshape(len(flat), -1)[:, c],
                                poly.window.order)
            out[c] = newton_max_abs(NewtonPoly(window, flat[:, c]), lo, hi)
        return out.reshape(poly.coeffs.shape[1:])

    candidates = [lo, hi]
    if len(poly.coeffs) > 2:
        for root in newton_to_polynomial(poly).deriv().roots():
            if abs(root.imag) <= 1e-12 * max(1.0, abs(root.real)) and lo < root.real < hi:
                candidates.append(float(root.real))
    return float(max(abs(newton_eval(poly, z)) for z in candidates))


def select_interval(sorted_knots, x):
    """Index j with knots[j] <= x < knots[j+1], clamped to the first / last interval."""
    m = len(sorted_knots)
    if m < 2:
        raise EmptyKnots(f"Interval search needs at least 2 knots, got {m}")
    j = int(np.searchsorted(sorted_knots, x, side="right")) - 1
    return min(max(j, 0), m - 2)


def window_for(sorted_knots, j, k):
    """
    Index range (start, stop) of the k+1 knots nearest to interval j.

    Candidates are the contiguous windows that contain interval j; the one whose
    farthest knot is closest to the interval midpoint wins, ties going to the
    lower start index.
    """
    m = len(sorted_knots)
    if m < k + 1:
        raise TooFewKnots(f"Order {k} needs {k + 1} knots, got {m}")
    if m == k + 1:
        return 0, m
    j = min(max(j, 0), m - 2)
    if k == 0:
        return j, j + 1

    mid = 0.5 * (sorted_knots[j] + sorted_knots[j + 1])
    first = max(0, j + 1 - k)
    last = min(j, m - k - 1)
    best, best_reach = first, math.inf
    for start in range(first, last + 1):
        reach = max(abs(sorted_knots[start] - mid), abs(sorted_knots[start + k] - mid))
        if reach < best_reach:
            best, best_reach = start, reach
    return best, best + k + 1


def interpolation_error_bound(x, window, lipschitz):
    """L^{k+1} / (k+1)! * |prod(x - knot)| over the window."""
    k = window.order
    if lipschitz.order != k + 1:
        raise ValueError(f"Order-{k} window needs a Lipschitz constant of order {k + 1}, "
                         f"got {lipschitz.order}")
    product = 1.0
    for knot in window.knots:
        product *= x - knot
    return lipschitz.value / math.factorial(k + 1) * abs(product)


def spline_error_bound(x, window, lipschitz):
    """Interpolation bound plus the interpolated (signed) residuals at the window knots."""
    residual = np.abs(newton_eval(newton_poly(window), x))
    return interpolation_error_bound(x, window, lipschitz) + residual


def separate_knots(column):
    """
    Sort a knot column and make it strictly increasing.

    Returns (sorted column, permutation, degenerate). A degenerate column gets the
    ramp KNOT_JITTER * scale * [0, 1, ...] added, which keeps the order stable.
    """
    column = np.asarray(column, dtype=float)
    perm = np.argsort(column, kind="stable")
    ordered = column[perm]
    if len(ordered) < 2:
        return ordered, perm, False

    spread = float(ordered[-1] - ordered[0])
    if np.all(np.diff(ordered) > KNOT_SEPARATION * spread) and spread > 0:
        return ordered, perm, False

    scale = spread if spread > 0 else 1.0
    return ordered + KNOT_JITTER * scale * np.arange(len(ordered)), perm, True
