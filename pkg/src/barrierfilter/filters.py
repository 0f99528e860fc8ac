"""Particle filters and ensemble Kalman filters, one recursion step at a time.

The step functions are deliberately stateless: they take an ensemble, a
transition sampler, the current observation model and a random generator,
and return new ensembles. Drivers that loop over time live in
:mod:`barrierfilter.harness`.

Weights are kept in log space. A transition sampler maps a batch of states
``(N, d_x)`` to a batch of propagated states, drawing row ``i``'s noise from
row ``i`` of each standard-normal block, so particle slots own their noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .exceptions import ContractViolation, DegeneracyError
from .sde import BarrierSpec, ItoSde, TimeGrid, barrier_sde, simulate_segment
from .ssm import (
    LinearGaussianObservation,
    SuperlevelConstraint,
    log_likelihood,
    rejection_constrained_batch,
)

Array = NDArray[np.float64]
KernelKind = Literal["unconstrained-sde", "barrier-sde", "rejection-oracle"]


@dataclass(frozen=True)
class ParticleEnsemble:
    """``N`` particles with log weights; ``normalized`` marks sum-to-one weights."""

    particles: Array
    log_weights: Array
    normalized: bool = False

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.particles, dtype=float))
        lw = np.asarray(self.log_weights, dtype=float)
        if x.shape[0] < 1 or lw.shape != (x.shape[0],):
            raise ContractViolation("need N >= 1 particles and N log weights")
        if not np.all(np.isfinite(x)):
            raise ContractViolation("particles have non-finite entries")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ContractViolation("log weights must be finite or -inf")
        object.__setattr__(self, "particles", x)
        object.__setattr__(self, "log_weights", lw)

    @classmethod
    def uniform(cls, particles: ArrayLike) -> ParticleEnsemble:
        x = np.atleast_2d(np.asarray(particles, dtype=float))
        n = x.shape[0]
        return cls(x, np.full(n, -np.log(n)), normalized=True)

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def weights(self) -> Array:
        return np.exp(self.log_weights)


@dataclass(frozen=True)
class EnkfEnsemble:
    """Equal-weight ensemble; ``regularized`` flags a jittered innovation solve."""

    members: Array
    regularized: bool = False

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.members, dtype=float))
        if x.shape[0] < 2:
            raise ContractViolation("an EnKF ensemble needs at least two members")
        object.__setattr__(self, "members", x)

    @property
    def size(self) -> int:
        return self.members.shape[0]


@dataclass(frozen=True)
class KernelSampler:
    """A batched transition sampler tagged with how it treats the constraint."""

    fn: Callable[[Array, np.random.Generator], Array] = field(repr=False)
    kind: KernelKind = "unconstrained-sde"

    def __call__(self, x: Array, rng: np.random.Generator) -> Array:
        return self.fn(x, rng)


def sde_kernel(sde: ItoSde, t0: float, t1: float, J: int) -> KernelSampler:
    return KernelSampler(
        lambda x, rng: simulate_segment(sde, x, t0, t1, J, rng), "unconstrained-sde"
    )


def barrier_kernel(base: ItoSde, b: BarrierSpec, grid: TimeGrid) -> KernelSampler:
    guided = barrier_sde(base, b)
    J = grid.substeps
    return KernelSampler(
        lambda x, rng: simulate_segment(guided, x, b.t_prev, b.t_next, J, rng),
        "barrier-sde",
    )


def rejection_kernel(
    base: KernelSampler,
    c: SuperlevelConstraint,
    obs: LinearGaussianObservation,
    max_tries: int = 10_000,
) -> KernelSampler:
    return KernelSampler(
        lambda x, rng: rejection_constrained_batch(base, c, obs, x, rng, max_tries),
        "rejection-oracle",
    )


class PfStep(NamedTuple):
    """Result of one particle-filter recursion."""

    ensemble: ParticleEnsemble  # resampled, uniform weights
    weighted: ParticleEnsemble  # before resampling
    ess: float


def normalize_weights(e: ParticleEnsemble) -> ParticleEnsemble:
    total = logsumexp(e.log_weights)
    if not np.isfinite(total):
        raise DegeneracyError("all particle weights are zero")
    return ParticleEnsemble(e.particles, e.log_weights - total, normalized=True)


def ess(e: ParticleEnsemble) -> float:
    """Normalised effective sample size ``1 / (N sum w_i^2)``, in ``[1/N, 1]``."""
    if not e.normalized:
        raise ContractViolation("ESS needs normalised weights")
    n = e.size
    value = 1.0 / (n * np.sum(np.exp(2.0 * e.log_weights)))
    return float(np.clip(value, 1.0 / n, 1.0))


def multinomial_indices(weights: Array, n: int, rng: np.random.Generator) -> NDArray[np.intp]:
    """``n`` i.i.d. ancestor indices drawn with probabilities ``weights``."""
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return np.minimum(idx, len(weights) - 1)


def multinomial_resample(e: ParticleEnsemble, rng: np.random.Generator) -> ParticleEnsemble:
    if not e.normalized:
        raise ContractViolation("resampling needs normalised weights")
    idx = multinomial_indices(e.weights, e.size, rng)
    return ParticleEnsemble.uniform(e.particles[idx])


def bootstrap_pf_step(
    e: ParticleEnsemble,
    sampler: KernelSampler,
    obs: LinearGaussianObservation,
    rng: np.random.Generator,
) -> PfStep:
    """Propagate, weight by the likelihood, normalise, resample."""
    x = sampler(e.particles, rng)
    weighted = normalize_weights(
        ParticleEnsemble(x, e.log_weights + log_likelihood(obs, x))
    )
    return PfStep(multinomial_resample(weighted, rng), weighted, ess(weighted))


def apf_step(
    e: ParticleEnsemble,
    predictive_mean: Callable[[Array], Array],
    sampler: KernelSampler,
    obs: LinearGaussianObservation,
    rng: np.random.Generator,
) -> PfStep:
    """Two-stage auxiliary particle filter step.

    Parents are preselected with weights ``g(predictive_mean(x))``; the
    propagated children are then corrected by ``g(child) / g(mean of parent)``.
    """
    means = np.asarray(predictive_mean(e.particles), dtype=float)
    look_ahead = log_likelihood(obs, means)
    first = normalize_weights(ParticleEnsemble(e.particles, e.log_weights + look_ahead))
    idx = multinomial_indices(first.weights, e.size, rng)
    x = sampler(e.particles[idx], rng)
    second = log_likelihood(obs, x) - look_ahead[idx]
    weighted = normalize_weights(ParticleEnsemble(x, second))
    return PfStep(multinomial_resample(weighted, rng), weighted, ess(weighted))


def enkf_forecast(
    e: EnkfEnsemble, sampler: KernelSampler, rng: np.random.Generator
) -> EnkfEnsemble:
    return EnkfEnsemble(sampler(e.members, rng))


def enkf_analysis(
    e: EnkfEnsemble, obs: LinearGaussianObservation, rng: np.random.Generator
) -> EnkfEnsemble:
    """Stochastic (perturbed-observation) EnKF update.

    The gain uses the ensemble sample covariance. If the innovation
    covariance fails a Cholesky factorisation it is jittered by ``1e-10 I``
    and the result is flagged ``regularized``.
    """
    X = e.members
    n = e.size
    HX = X @ obs.H
    A = X - X.mean(axis=0)
    HA = HX - HX.mean(axis=0)
    cross = A.T @ HA / (n - 1)  # P H
    S = HA.T @ HA / (n - 1) + obs.sigma_y**2 * np.eye(obs.d_y)
    perturbed = obs.y + obs.sigma_y * rng.standard_normal((n, obs.d_y))
    innovations = perturbed - HX
    regularized = False
    try:
        factor = cho_factor(S)
    except np.linalg.LinAlgError:
        regularized = True
        factor = cho_factor(S + 1e-10 * np.eye(obs.d_y))
    W = cho_solve(factor, innovations.T)
    return EnkfEnsemble(X + (cross @ W).T, regularized=regularized)


def posterior_mean(e: ParticleEnsemble | EnkfEnsemble) -> Array:
    if isinstance(e, EnkfEnsemble):
        return e.members.mean(axis=0)
    if not e.normalized:
        raise ContractViolation("posterior mean needs normalised weights")
    return e.weights @ e.particles
