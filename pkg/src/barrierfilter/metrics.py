"""Filter diagnostics: grid total variation, NMSE and the decay-rate fit."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize_scalar

from .exceptions import ContractViolation, InsufficientDecayError, NormalizationError
from .filters import ParticleEnsemble

Array = NDArray[np.float64]

OUTSIDE = -1


@dataclass(frozen=True)
class HypercubeGrid:
    """Uniform partition of an axis-aligned cube around ``center``.

    Each dimension is cut into ``floor(r / r_sub)`` cells of width
    ``2 r_sub``. Cells are half-open ``[low, high)`` except the topmost one
    in each dimension, which also contains its upper face.
    """

    center: Array
    r: float
    r_sub: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if c.ndim != 1 or c.size == 0 or not np.all(np.isfinite(c)):
            raise ContractViolation("center must be a finite vector")
        if not (0 < self.r_sub <= self.r):
            raise ContractViolation("need 0 < r_sub <= r")
        object.__setattr__(self, "center", c)

    @property
    def cells_per_dim(self) -> int:
        # guard against r / r_sub landing a hair under an integer
        return int(math.floor(self.r / self.r_sub + 1e-12))

    @property
    def half_width(self) -> float:
        return self.r_sub * self.cells_per_dim

    @property
    def n_cells(self) -> int:
        return self.cells_per_dim ** self.center.size


def cell_index(g: HypercubeGrid, x: ArrayLike) -> NDArray[np.int64] | int:
    """Mixed-radix cell index of each state, or ``OUTSIDE`` (-1)."""
    x = np.asarray(x, dtype=float)
    k = g.cells_per_dim
    offset = x - (g.center - g.half_width)
    per_dim = np.floor(offset / (2.0 * g.r_sub))
    # the upper face belongs to the top cell
    at_top = np.abs(x - (g.center + g.half_width)) == 0
    per_dim = np.where(at_top, k - 1, per_dim)
    inside = np.all((per_dim >= 0) & (per_dim < k), axis=-1)
    radix = k ** np.arange(g.center.size - 1, -1, -1, dtype=np.int64)
    idx = np.where(inside, per_dim.clip(0, k - 1).astype(np.int64) @ radix, OUTSIDE)
    return int(idx) if idx.ndim == 0 else idx


def cell_masses(g: HypercubeGrid, e: ParticleEnsemble) -> dict[int, float]:
    """Total weight per occupied cell; mass outside the cube is dropped."""
    if not e.normalized:
        raise ContractViolation("cell masses need normalised weights")
    idx = np.asarray(cell_index(g, e.particles))
    keep = idx != OUTSIDE
    cells, inverse = np.unique(idx[keep], return_inverse=True)
    mass = np.bincount(inverse, weights=e.weights[keep], minlength=cells.size)
    return dict(zip(cells.tolist(), mass.tolist()))


def tv_discretized(g: HypercubeGrid, a: ParticleEnsemble, b: ParticleEnsemble) -> float:
    """Half the L1 distance between the cell masses of two weighted ensembles."""
    ma, mb = cell_masses(g, a), cell_masses(g, b)
    total = math.fsum(abs(ma.get(c, 0.0) - mb.get(c, 0.0)) for c in sorted(ma.keys() | mb.keys()))
    return min(max(0.5 * total, 0.0), 1.0)


def nmse_curve(truth: ArrayLike, estimates: ArrayLike) -> Array:
    """``T ||X_n - xhat_n||^2 / sum_m ||X_m||^2`` for each of the ``T`` steps."""
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    if truth.shape != estimates.shape:
        raise ContractViolation("truth and estimates must have the same shape")
    power = np.sum(truth**2)
    if power == 0:
        raise NormalizationError("truth sequence is identically zero")
    T = truth.shape[0]
    return T * np.sum((truth - estimates) ** 2, axis=1) / power


@dataclass(frozen=True)
class TvCurve:
    values: Array
    n_runs: int = 1
    stderr: Array | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or np.any(v < 0) or np.any(v > 1):
            raise ContractViolation("TV values must lie in [0, 1]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class DecayFit:
    gamma_hat: float
    d0: float
    n_cut: int

    def model(self, n: ArrayLike) -> Array:
        """The fitted bound ``(1 - gamma^2)^n / gamma^2 * d0``."""
        g2 = self.gamma_hat**2
        return (1.0 - g2) ** np.asarray(n, dtype=float) / g2 * self.d0


def decay_cutoff(values: ArrayLike, floor_quantile: float = 0.5) -> int:
    """Last index of the leading run above ``(1 + floor_quantile) * floor``.

    The floor is the mean of the final 20% of the curve. Returns -1 when the
    first value is already at or below the threshold.
    """
    v = np.asarray(values, dtype=float)
    tail = max(1, int(math.ceil(0.2 * v.size)))
    threshold = (1.0 + floor_quantile) * float(np.mean(v[-tail:]))
    below = np.flatnonzero(~(v > threshold))
    return (int(below[0]) if below.size else v.size) - 1


def fit_gamma(
    curve: TvCurve | ArrayLike, d0: float | None, floor_quantile: float = 0.5
) -> DecayFit:
    """Least-squares fit of ``gamma`` in log space up to the Monte Carlo floor.

    Minimises ``sum_n (log v_n - n log(1 - gamma^2) + 2 log gamma - log d0)^2``
    over ``0 < gamma < 1`` for ``n = 0..n_cut``. With ``d0=None`` the scale
    is profiled out, which leaves a straight-line fit of ``log v_n`` whose
    slope is ``log(1 - gamma^2)``; the returned ``d0`` is then the estimate.
    """
    values = curve.values if isinstance(curve, TvCurve) else np.asarray(curve, dtype=float)
    if values.size < 3:
        raise ContractViolation("need at least three points to fit")
    if d0 is not None and not d0 > 0:
        raise ContractViolation("d0 must be positive")
    n_cut = decay_cutoff(values, floor_quantile)
    if n_cut < 2:
        raise InsufficientDecayError(f"curve decays over only {n_cut + 1} points")
    n = np.arange(n_cut + 1, dtype=float)
    log_v = np.log(values[: n_cut + 1])

    if d0 is None:
        slope, intercept = np.polyfit(n, log_v, 1)
        if not slope < 0:
            raise InsufficientDecayError("curve does not decay")
        g2 = -math.expm1(slope)
        return DecayFit(gamma_hat=math.sqrt(g2), d0=math.exp(intercept) * g2, n_cut=n_cut)

    log_d0 = math.log(d0)

    def sse(gamma: float) -> float:
        pred = n * math.log1p(-gamma * gamma) - 2.0 * math.log(gamma) + log_d0
        return float(np.sum((log_v - pred) ** 2))

    # coarse scan to bracket the global minimum, then bounded Brent
    grid = np.linspace(1e-4, 1 - 1e-4, 400)
    i = int(np.argmin([sse(g) for g in grid]))
    lo = grid[max(i - 1, 0)] if i > 0 else 1e-12
    hi = grid[min(i + 1, grid.size - 1)] if i < grid.size - 1 else 1 - 1e-12
    res = minimize_scalar(sse, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return DecayFit(gamma_hat=float(res.x), d0=float(d0), n_cut=n_cut)
