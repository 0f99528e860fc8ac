"""Ito SDE simulation: Lorenz 96 dynamics, Euler-Maruyama, barrier guidance.

The barrier-guided kernel replaces the base drift ``a(x, t)`` on an
observation interval by ``a(x, t) - mu * sigma^2 * grad log b(x, t)``, where
``log b`` is a soft-plus of the negative interpolated log-likelihood. Paths
that leave the high-likelihood tube get pushed back; paths inside it are
left (almost) untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit

from .exceptions import ContractViolation, IntegrationError

try:
    import numba
except ImportError:  # the numpy path gives identical results, only slower
    numba = None

Array = NDArray[np.float64]
DriftFn = Callable[[Array, float], Array]
ScaleFn = Callable[[Array, float], Union[float, Array]]
# (x, z, t, dt, noise_scale, extra_drift) -> next state, or None if the drift is not finite
StepFn = Callable[[Array, Array, float, float, float, Union[Array, None]], Union[Array, None]]


@dataclass(frozen=True)
class Lorenz96Params:
    d_x: int
    F: float = 8.0
    sigma_x: float = 0.0

    def __post_init__(self):
        if self.d_x < 4:
            raise ContractViolation("Lorenz 96 needs d_x >= 4")
        if self.sigma_x < 0:
            raise ContractViolation("sigma_x must be non-negative")

    def sde(self) -> ItoSde:
        fused = None
        if _l96_em_kernel is not None:
            fused = lambda x, z, t, dt, c, extra=None: _l96_fused_step(self, x, z, dt, c, extra)  # noqa: E731
        return ItoSde(
            drift=lambda x, t: lorenz96_drift(self, x),
            diffusion_scale=self.sigma_x,
            fused_step=fused,
        )


@dataclass(frozen=True)
class ItoSde:
    """``dX = drift(X, t) dt + diffusion_scale(X, t) dW`` with isotropic noise.

    ``diffusion_scale`` may be a callable or a constant; a constant is the
    common case and lets the integrator skip the noise draw when it is zero.
    """

    drift: DriftFn
    diffusion_scale: ScaleFn | float = 0.0
    # optional one-pass Euler-Maruyama update for a constant, positive scale;
    # must agree bit for bit with the generic path
    fused_step: StepFn | None = None

    def __post_init__(self):
        if not callable(self.diffusion_scale) and self.diffusion_scale < 0:
            raise ContractViolation("diffusion scale must be non-negative")

    def sigma(self, x: Array, t: float) -> float | Array:
        if callable(self.diffusion_scale):
            return self.diffusion_scale(x, t)
        return self.diffusion_scale


@dataclass(frozen=True)
class TimeGrid:
    """Integrator step ``delta`` nested inside the observation spacing."""

    delta: float = 1e-3
    delta_obs: float = 0.1

    def __post_init__(self):
        if not (self.delta > 0 and self.delta_obs > 0):
            raise ContractViolation("time steps must be positive")
        J = round(self.delta_obs / self.delta)
        if J < 1 or abs(J * self.delta - self.delta_obs) > 1e-9 * self.delta_obs:
            raise ContractViolation("delta_obs must be an integer multiple of delta")

    @property
    def substeps(self) -> int:
        return round(self.delta_obs / self.delta)


@dataclass(frozen=True)
class BarrierSpec:
    """Barrier parameters for one observation interval ``[t_prev, t_next]``."""

    rho: float
    kappa: float
    mu: float
    H: Array
    sigma_y: float
    y_prev: Array
    y_next: Array
    t_prev: float
    t_next: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ContractViolation("rho must be positive")
        if not self.kappa >= 1:
            raise ContractViolation("kappa must be >= 1")
        if self.mu < 0:
            raise ContractViolation("mu must be non-negative")
        if not self.sigma_y > 0:
            raise ContractViolation("sigma_y must be positive")
        if not self.t_prev < self.t_next:
            raise ContractViolation("need t_prev < t_next")
        H = np.asarray(self.H, dtype=float)
        y_prev = np.asarray(self.y_prev, dtype=float)
        y_next = np.asarray(self.y_next, dtype=float)
        if H.ndim != 2 or y_prev.shape != (H.shape[1],) or y_next.shape != y_prev.shape:
            raise ContractViolation("H, y_prev and y_next have inconsistent shapes")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "y_prev", y_prev)
        object.__setattr__(self, "y_next", y_next)


def lorenz96_drift(p: Lorenz96Params, x: ArrayLike) -> Array:
    """Cyclic Lorenz 96 vector field, batched over leading axes of ``x``."""
    x = np.asarray(x, dtype=float)
    d = p.d_x
    if x.shape[-1] != d:
        raise ContractViolation(f"state length {x.shape[-1]} != d_x={d}")
    # wrap-padded copy: column k of xp is x_{k-2}, so the stencil is three views
    xp = np.concatenate((x[..., -2:], x, x[..., :1]), axis=-1)
    out = xp[..., 3:] - xp[..., :d]
    out *= xp[..., 1 : d + 1]
    out -= x
    out += p.F
    return out


def _l96_kernel_py(x, z, dt, c, F, extra, has_extra, out):
    n_rows, d = x.shape
    nan_probe = 0.0
    for n in range(n_rows):
        for i in range(d):
            a = x[n, i - 1] * (x[n, (i + 1) % d] - x[n, i - 2]) - x[n, i] + F
            if has_extra:
                a = a - extra[n, i]
            nan_probe += a * 0.0
            out[n, i] = (dt * a + x[n, i]) + c * z[n, i]
    return nan_probe == 0.0


_l96_em_kernel = numba.njit(cache=True)(_l96_kernel_py) if numba is not None else None


def _l96_fused_step(
    p: Lorenz96Params, x: Array, z: Array, dt: float, c: float, extra: Array | None
) -> Array | None:
    # extra is subtracted from the drift, matching ``a - correction`` in barrier_drift
    if x.shape[-1] != p.d_x:
        raise ContractViolation(f"state length {x.shape[-1]} != d_x={p.d_x}")
    x2 = np.ascontiguousarray(x).reshape(-1, p.d_x)
    out = np.empty_like(x2)
    has_extra = extra is not None
    e = np.ascontiguousarray(extra).reshape(x2.shape) if has_extra else x2
    if not _l96_em_kernel(
        x2, np.ascontiguousarray(z).reshape(x2.shape), dt, c, float(p.F), e, has_extra, out
    ):
        return None
    return out.reshape(x.shape)


def _scale_for(sigma: float | Array, x: Array) -> float | Array:
    # per-particle scales broadcast against the state axis
    if np.ndim(sigma) == 0:
        return sigma
    return np.asarray(sigma)[..., None]


def _draw(rng: np.random.Generator, shape: tuple, buf: Array | None) -> Array:
    if buf is None or buf.shape != shape:
        return rng.standard_normal(shape)
    return rng.standard_normal(out=buf)


def euler_maruyama_step(
    sde: ItoSde,
    x: ArrayLike,
    t: float,
    dt: float,
    rng: np.random.Generator,
    noise: Array | None = None,
) -> Array:
    """One explicit step ``x + dt a(x, t) + sqrt(dt) sigma(x, t) Z``.

    ``noise``, if given, is a scratch buffer of the state's shape that ``Z`` is
    drawn into; it saves an allocation per step in long loops.
    """
    if not dt > 0:
        raise ContractViolation("dt must be positive")
    x = np.asarray(x, dtype=float)
    sigma = sde.diffusion_scale
    if sde.fused_step is not None and not callable(sigma) and sigma > 0:
        z = _draw(rng, x.shape, noise)
        out = sde.fused_step(x, z, t, dt, math.sqrt(dt) * sigma, None)
        if out is None:
            raise IntegrationError(t)
        return out
    a = sde.drift(x, t)
    # cheap screen first; the sum is non-finite whenever any entry is
    if not np.isfinite(a.sum()) and not np.all(np.isfinite(a)):
        raise IntegrationError(t)
    sigma = sde.sigma(x, t)
    if np.ndim(sigma) == 0 and sigma == 0:
        return x + dt * a
    z = _draw(rng, x.shape, noise)
    z *= math.sqrt(dt) * _scale_for(sigma, x)
    out = dt * a
    out += x
    out += z
    return out


def simulate_segment(
    sde: ItoSde,
    x0: ArrayLike,
    t0: float,
    t1: float,
    J: int,
    rng: np.random.Generator,
) -> Array:
    """Terminal state of ``J`` uniform Euler-Maruyama steps from ``t0`` to ``t1``."""
    if not t1 > t0:
        raise ContractViolation("need t1 > t0")
    if J < 1:
        raise ContractViolation("J must be at least 1")
    dt = (t1 - t0) / J
    x = np.asarray(x0, dtype=float)
    noise = np.empty(x.shape)
    for j in range(J):
        x = euler_maruyama_step(sde, x, t0 + j * dt, dt, rng, noise)
    return x


def interpolate_observation(b: BarrierSpec, t: float) -> Array:
    """Linear interpolation between ``y_prev`` and ``y_next``; exact at both ends."""
    span = b.t_next - b.t_prev
    slack = 1e-12 * max(span, abs(b.t_next))
    if t < b.t_prev - slack or t > b.t_next + slack:
        raise ContractViolation(f"t={t} outside [{b.t_prev}, {b.t_next}]")
    if t <= b.t_prev:
        return b.y_prev.copy()
    if t >= b.t_next:
        return b.y_next.copy()
    return b.y_prev + (t - b.t_prev) / span * (b.y_next - b.y_prev)


def softplus(rho: float, kappa: float, z: ArrayLike) -> Array | float:
    """Shifted soft-plus ``log(1 + exp(kappa (z - rho))) / kappa``, overflow-free."""
    if not kappa >= 1:
        raise ContractViolation("kappa must be >= 1")
    out = np.logaddexp(0.0, kappa * (np.asarray(z, dtype=float) - rho)) / kappa
    return float(out) if np.ndim(out) == 0 else out


def barrier_log(b: BarrierSpec, x: ArrayLike, t: float) -> Array | float:
    """``log b(x, t)``: soft-plus of the scaled squared residual to ``y(t)``."""
    r = np.asarray(x, dtype=float) @ b.H - interpolate_observation(b, t)
    q = np.einsum("...j,...j->...", r, r) / (2.0 * b.sigma_y**2)
    return softplus(b.rho, b.kappa, q)


def barrier_log_grad(b: BarrierSpec, x: ArrayLike, t: float) -> Array:
    """Closed-form gradient of :func:`barrier_log` with respect to ``x``."""
    x = np.asarray(x, dtype=float)
    sy2 = b.sigma_y**2
    r = x @ b.H - interpolate_observation(b, t)
    q = np.einsum("...j,...j->...", r, r) / (2.0 * sy2)
    s = expit(b.kappa * (q - b.rho)) / sy2
    return np.asarray(s)[..., None] * (r @ b.H.T)


def _barrier_correction(base: ItoSde, b: BarrierSpec, x: Array, t: float, like: Array) -> Array:
    sigma = _scale_for(base.sigma(x, t), like)
    return b.mu * sigma**2 * barrier_log_grad(b, x, t)


def barrier_drift(base: ItoSde, b: BarrierSpec, x: ArrayLike, t: float) -> Array:
    """Base drift minus ``mu * sigma^2 * grad log b``; exactly the base drift when ``mu == 0``."""
    a = base.drift(x, t)
    if b.mu == 0:
        return a
    return a - _barrier_correction(base, b, np.asarray(x, dtype=float), t, a)


def barrier_sde(base: ItoSde, b: BarrierSpec) -> ItoSde:
    """The guided SDE on ``[b.t_prev, b.t_next]`` as a standalone :class:`ItoSde`."""
    if b.mu == 0:
        return base
    fused = None
    if base.fused_step is not None and not callable(base.diffusion_scale):
        def fused(x, z, t, dt, c, extra=None):
            return base.fused_step(x, z, t, dt, c, _barrier_correction(base, b, x, t, x))

    return ItoSde(
        drift=lambda x, t: barrier_drift(base, b, x, t),
        diffusion_scale=base.diffusion_scale,
        fused_step=fused,
    )


def sample_barrier_kernel(
    base: ItoSde,
    b: BarrierSpec,
    x_prev: ArrayLike,
    grid: TimeGrid,
    rng: np.random.Generator,
) -> Array:
    """Simulate the guided SDE over the barrier interval and return the end state."""
    return simulate_segment(
        barrier_sde(base, b), x_prev, b.t_prev, b.t_next, grid.substeps, rng
    )
