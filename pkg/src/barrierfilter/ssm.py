"""State-space model building blocks.

States are plain ``numpy`` arrays whose last axis has length ``d_x``; any
leading axes are treated as a batch (typically the particle axis). The
observation model is linear-Gaussian, ``y = H^T x + noise``, and its
likelihood is kept unnormalised with peak value one, so ``log g(x) <= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import ContractViolation, RejectionFailure

KernelFn = Callable[[NDArray[np.float64], np.random.Generator], NDArray[np.float64]]


def _finite_vector(values: ArrayLike, name: str) -> NDArray[np.float64]:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractViolation(f"{name} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class GaussianPrior:
    """Isotropic Gaussian ``N(mean, variance * I)``."""

    mean: NDArray[np.float64]
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "mean", _finite_vector(self.mean, "mean"))
        if not self.variance > 0:
            raise ContractViolation("prior variance must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class LinearGaussianObservation:
    """Observation ``y = H^T x + sigma_y * noise`` with ``H`` of shape (d_x, d_y)."""

    H: NDArray[np.float64]
    sigma_y: float
    y: NDArray[np.float64]

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        if H.ndim != 2:
            raise ContractViolation("H must be a d_x-by-d_y matrix")
        if not np.all(np.isfinite(H)):
            raise ContractViolation("H has non-finite entries")
        if not self.sigma_y > 0:
            raise ContractViolation("sigma_y must be positive")
        y = _finite_vector(self.y, "y")
        if y.shape[0] != H.shape[1]:
            raise ContractViolation(
                f"y has length {y.shape[0]} but H has {H.shape[1]} columns"
            )
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "y", y)

    @property
    def d_x(self) -> int:
        return self.H.shape[0]

    @property
    def d_y(self) -> int:
        return self.H.shape[1]

    def with_y(self, y: ArrayLike) -> LinearGaussianObservation:
        return LinearGaussianObservation(self.H, self.sigma_y, y)

    def residual(self, x: ArrayLike) -> NDArray[np.float64]:
        """``H^T x - y`` over the batch axes of ``x``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d_x:
            raise ContractViolation(
                f"state has length {x.shape[-1]}, observation model expects {self.d_x}"
            )
        return x @ self.H - self.y


@dataclass(frozen=True)
class SuperlevelConstraint:
    """The set ``{x : log g(x) >= -rho}`` for a given observation."""

    rho: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ContractViolation("rho must be positive")


def log_likelihood(obs: LinearGaussianObservation, x: ArrayLike) -> NDArray[np.float64] | float:
    """Return ``-||y - H^T x||^2 / (2 sigma_y^2)`` (batched over leading axes)."""
    r = obs.residual(x)
    out = -np.einsum("...j,...j->...", r, r) / (2.0 * obs.sigma_y**2)
    return float(out) if np.ndim(out) == 0 else out


def in_constraint(
    c: SuperlevelConstraint, obs: LinearGaussianObservation, x: ArrayLike
) -> bool | NDArray[np.bool_]:
    """Membership of ``x`` in the superlevel set; the boundary is included."""
    member = np.asarray(log_likelihood(obs, x)) >= -c.rho
    return bool(member) if member.ndim == 0 else member


def sample_prior(
    prior: GaussianPrior, rng: np.random.Generator, size: int | None = None
) -> NDArray[np.float64]:
    """Draw one state (``size=None``) or ``size`` states stacked on axis 0."""
    shape = (prior.dim,) if size is None else (size, prior.dim)
    return prior.mean + np.sqrt(prior.variance) * rng.standard_normal(shape)


def rejection_constrained_sample(
    kernel_sampler: KernelFn,
    c: SuperlevelConstraint,
    obs: LinearGaussianObservation,
    x_prev: ArrayLike,
    rng: np.random.Generator,
    max_tries: int = 10_000,
) -> NDArray[np.float64]:
    """Sample the kernel restricted to the constraint set by plain rejection.

    Exact but possibly very slow; meant as a reference for the barrier kernel.
    Raises :class:`RejectionFailure` after ``max_tries`` rejected proposals.
    """
    if max_tries < 1:
        raise ContractViolation("max_tries must be at least 1")
    x_prev = np.asarray(x_prev, dtype=float)
    for _ in range(max_tries):
        proposal = kernel_sampler(x_prev, rng)
        if in_constraint(c, obs, proposal):
            return proposal
    raise RejectionFailure(max_tries)


def rejection_constrained_batch(
    kernel_sampler: KernelFn,
    c: SuperlevelConstraint,
    obs: LinearGaussianObservation,
    x_prev: ArrayLike,
    rng: np.random.Generator,
    max_tries: int = 10_000,
) -> NDArray[np.float64]:
    """Vectorised rejection sampling for a batch of starting states.

    ``x_prev`` has shape ``(N, d_x)``. All still-pending rows are proposed
    together each round; a row that has been rejected ``max_tries`` times
    raises :class:`RejectionFailure`.
    """
    if max_tries < 1:
        raise ContractViolation("max_tries must be at least 1")
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=float))
    out = np.empty_like(x_prev)
    pending = np.arange(x_prev.shape[0])
    for _ in range(max_tries):
        proposal = kernel_sampler(x_prev[pending], rng)
        ok = np.asarray(in_constraint(c, obs, proposal))
        out[pending[ok]] = proposal[ok]
        pending = pending[~ok]
        if pending.size == 0:
            return out
    raise RejectionFailure(max_tries)
