"""Ground truth generation, filter drivers and the Lorenz 96 experiments.

Randomness is keyed per trial (see :mod:`barrierfilter.rng`):

* ``(trial, OBS_MATRIX)`` draws the observation matrix,
* ``(trial, TRUTH)`` drives the spin-up, the true path and observation noise,
* ``(trial, PRIOR)`` draws the initial ensemble (shared by every arm),
* ``(trial, FILTER, n)`` drives propagation and resampling at step ``n``.

Every arm of an experiment therefore sees the same truth and observations,
and twin filters that differ only in their prior also share transition
noise and resampling uniforms.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Sequence, TypeVar

import numpy as np
from numpy.typing import NDArray

from .. import rng as rngmod
from ..exceptions import ContractViolation, InsufficientDecayError
from ..filters import (
    EnkfEnsemble,
    KernelSampler,
    ParticleEnsemble,
    apf_step,
    barrier_kernel,
    bootstrap_pf_step,
    enkf_analysis,
    enkf_forecast,
    posterior_mean,
    sde_kernel,
)
from ..metrics import DecayFit, HypercubeGrid, TvCurve, fit_gamma, nmse_curve, tv_discretized
from ..sde import BarrierSpec, ItoSde, Lorenz96Params, TimeGrid, simulate_segment
from ..ssm import GaussianPrior, LinearGaussianObservation, sample_prior
from .config import ExperimentConfig, PriorSpec

Array = NDArray[np.float64]
T = TypeVar("T")


def generate_observation_matrix(
    d_x: int, d_y: int, sigma_v: float, rng: np.random.Generator
) -> Array:
    """Distinct random unit columns plus small Gaussian interference."""
    if not 1 <= d_y <= d_x:
        raise ContractViolation("need 1 <= d_y <= d_x")
    rows = rng.choice(d_x, size=d_y, replace=False)
    H = np.zeros((d_x, d_y))
    H[rows, np.arange(d_y)] = 1.0
    if sigma_v > 0:
        H += sigma_v * rng.standard_normal((d_x, d_y))
    return H


@dataclass(frozen=True)
class GroundTruth:
    H: Array  # (d_x, d_y)
    states: Array  # X_0 .. X_T
    observations: Array  # y_1 .. y_T

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.H, self.states, self.observations):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def lorenz_sde(cfg: ExperimentConfig) -> ItoSde:
    m = cfg.model
    return Lorenz96Params(m.d_x, m.F, m.sigma_x).sde()


def generate_ground_truth(
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    H: Array | None = None,
    x_init: Array | None = None,
) -> GroundTruth:
    """Spin up, then integrate ``T_obs`` observation intervals and observe.

    The spin-up starts from ``x_init`` (default: a draw from ``N(F 1, I)``)
    and runs ``model.spinup`` time units; its end point is ``X_0``.
    """
    m = cfg.model
    if H is None:
        H = generate_observation_matrix(m.d_x, m.d_y, m.sigma_v, rng)
    sde = lorenz_sde(cfg)
    if x_init is None:
        x_init = m.F + rng.standard_normal(m.d_x)
    x = np.asarray(x_init, dtype=float)
    n_spin = round(m.spinup / m.delta)
    if n_spin > 0:
        x = simulate_segment(sde, x, -m.spinup, 0.0, n_spin, rng)
    states = [x]
    obs = []
    for n in range(1, cfg.T_obs + 1):
        x = simulate_segment(sde, x, (n - 1) * m.delta_obs, n * m.delta_obs, cfg.J, rng)
        states.append(x)
        noise = rng.standard_normal(H.shape[1]) if m.sigma_y > 0 else 0.0
        obs.append(x @ H + m.sigma_y * noise)
    return GroundTruth(H, np.array(states), np.array(obs))


def trial_truth(cfg: ExperimentConfig, trial: int) -> GroundTruth:
    m = cfg.model
    H = generate_observation_matrix(
        m.d_x, m.d_y, m.sigma_v, rngmod.stream(cfg.seed, trial, rngmod.Purpose.OBS_MATRIX)
    )
    return generate_ground_truth(
        cfg, rngmod.stream(cfg.seed, trial, rngmod.Purpose.TRUTH), H=H
    )


@dataclass(frozen=True)
class FilterState:
    """Filter output at observation index ``n`` (``n = 0`` is the prior)."""

    n: int
    ensemble: ParticleEnsemble | EnkfEnsemble  # weighted, before resampling
    mean: Array
    ess: float


def _transition(cfg: ExperimentConfig, truth: GroundTruth, n: int) -> KernelSampler:
    m = cfg.model
    sde = lorenz_sde(cfg)
    t0, t1 = (n - 1) * m.delta_obs, n * m.delta_obs
    arm = cfg.filter
    if not arm.kind.startswith("barrier"):
        return sde_kernel(sde, t0, t1, cfg.J)
    # no observation precedes y_1, so the first tube is held at y_1
    y_prev = truth.observations[max(n - 2, 0)]
    spec = BarrierSpec(
        rho=arm.barrier.rho,
        kappa=arm.barrier.kappa,
        mu=arm.barrier.mu,
        H=truth.H,
        sigma_y=m.sigma_y,
        y_prev=y_prev,
        y_next=truth.observations[n - 1],
        t_prev=t0,
        t_next=t1,
    )
    return barrier_kernel(sde, spec, TimeGrid(m.delta, m.delta_obs))


def _drift_mean(cfg: ExperimentConfig, n: int) -> Callable[[Array], Array]:
    m = cfg.model
    deterministic = Lorenz96Params(m.d_x, m.F, 0.0).sde()
    t0, t1 = (n - 1) * m.delta_obs, n * m.delta_obs
    return lambda x: simulate_segment(deterministic, x, t0, t1, cfg.J, None)


def run_filter(
    cfg: ExperimentConfig, truth: GroundTruth, trial: int, prior: PriorSpec | None = None
) -> Iterator[FilterState]:
    """Run one arm over a trial, yielding the state at ``n = 0, ..., T_obs``."""
    m = cfg.model
    prior = prior or cfg.priors[0]
    gauss = GaussianPrior(truth.states[0] + prior.offset, prior.variance)
    x0 = sample_prior(
        gauss, rngmod.stream(cfg.seed, trial, rngmod.Purpose.PRIOR), size=cfg.filter.N
    )
    kind = cfg.filter.kind
    if kind.endswith("enkf"):
        ens = EnkfEnsemble(x0)
        yield FilterState(0, ens, posterior_mean(ens), 1.0)
        for n in range(1, cfg.T_obs + 1):
            step_rng = rngmod.stream(cfg.seed, trial, rngmod.Purpose.FILTER, n)
            obs = LinearGaussianObservation(truth.H, m.sigma_y, truth.observations[n - 1])
            ens = enkf_forecast(ens, _transition(cfg, truth, n), step_rng)
            ens = enkf_analysis(ens, obs, step_rng)
            yield FilterState(n, ens, posterior_mean(ens), 1.0)
        return

    pe = ParticleEnsemble.uniform(x0)
    yield FilterState(0, pe, posterior_mean(pe), 1.0)
    for n in range(1, cfg.T_obs + 1):
        step_rng = rngmod.stream(cfg.seed, trial, rngmod.Purpose.FILTER, n)
        obs = LinearGaussianObservation(truth.H, m.sigma_y, truth.observations[n - 1])
        sampler = _transition(cfg, truth, n)
        if kind == "apf":
            step = apf_step(pe, _drift_mean(cfg, n), sampler, obs, step_rng)
        else:
            step = bootstrap_pf_step(pe, sampler, obs, step_rng)
        pe = step.ensemble
        yield FilterState(n, step.weighted, posterior_mean(step.weighted), step.ess)


@dataclass(frozen=True)
class TrialResult:
    """Per-step outputs of one arm in one trial (steps ``1..T_obs``)."""

    means: Array
    ess: Array
    nmse: Array
    seed: int
    trial: int
    duration: float
    truth_digest: str
    tv: Array | None = None  # steps 0..T_obs when computed


def run_trial(cfg: ExperimentConfig, trial: int, truth: GroundTruth | None = None) -> TrialResult:
    start = time.perf_counter()
    truth = truth if truth is not None else trial_truth(cfg, trial)
    states = list(run_filter(cfg, truth, trial))[1:]
    means = np.array([s.mean for s in states])
    return TrialResult(
        means=means,
        ess=np.array([s.ess for s in states]),
        nmse=nmse_curve(truth.states[1:], means),
        seed=cfg.seed,
        trial=trial,
        duration=time.perf_counter() - start,
        truth_digest=truth.digest(),
    )


def _map_trials(fn: Callable[[int], T], n_trials: int, threads: int) -> list[T]:
    # results come back in trial order whatever the scheduling
    if threads <= 1:
        return [fn(i) for i in range(n_trials)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_trials)))


def _mean_and_stderr(rows: Sequence[Array]) -> tuple[Array, Array]:
    data = np.asarray(rows, dtype=float)
    mean = data.mean(axis=0)
    if data.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, data.std(axis=0, ddof=1) / math.sqrt(data.shape[0])


@dataclass(frozen=True)
class TvDecayResult:
    curve: TvCurve
    fit: DecayFit | None
    trials: list[TrialResult]


def tv_trial(cfg: ExperimentConfig, trial: int) -> tuple[TrialResult, TrialResult]:
    """Twin filters from the two priors on one shared truth; TV per step."""
    if len(cfg.priors) != 2:
        raise ContractViolation("the TV experiment needs exactly two priors")
    if cfg.tv_grid is None:
        raise ContractViolation("the TV experiment needs a tv_grid")
    start = time.perf_counter()
    truth = trial_truth(cfg, trial)
    r, r_sub = cfg.tv_grid
    tv, outs = [], ([], [])
    for sa, sb in zip(run_filter(cfg, truth, trial, cfg.priors[0]),
                      run_filter(cfg, truth, trial, cfg.priors[1])):
        grid = HypercubeGrid(truth.states[sa.n], r, r_sub)
        tv.append(tv_discretized(grid, sa.ensemble, sb.ensemble))
        if sa.n > 0:
            outs[0].append(sa)
            outs[1].append(sb)
    elapsed = time.perf_counter() - start
    results = []
    for states in outs:
        means = np.array([s.mean for s in states])
        results.append(TrialResult(
            means=means,
            ess=np.array([s.ess for s in states]),
            nmse=nmse_curve(truth.states[1:], means),
            seed=cfg.seed,
            trial=trial,
            duration=elapsed,
            truth_digest=truth.digest(),
            tv=np.array(tv),
        ))
    return results[0], results[1]


def run_tv_decay_experiment(
    cfg: ExperimentConfig, threads: int = 1, floor_quantile: float = 0.5
) -> TvDecayResult:
    """Average the twin-filter TV curve over trials and fit the decay rate.

    ``d0`` for the fit is the averaged TV between the two initial ensembles.
    Returns ``fit=None`` when the curve does not decay enough to be fitted.
    """
    pairs = _map_trials(lambda i: tv_trial(cfg, i), cfg.n_trials, threads)
    mean, stderr = _mean_and_stderr([a.tv for a, _ in pairs])
    curve = TvCurve(np.clip(mean, 0.0, 1.0), n_runs=cfg.n_trials, stderr=stderr)
    fit = None
    if mean[0] > 0:
        try:
            fit = fit_gamma(curve, d0=float(mean[0]), floor_quantile=floor_quantile)
        except InsufficientDecayError:
            fit = None
    return TvDecayResult(curve, fit, [a for a, _ in pairs])


@dataclass(frozen=True)
class NmseTable:
    labels: list[str]
    mean: dict[str, Array]  # label -> (T_obs,) averaged NMSE
    stderr: dict[str, Array]
    curves: dict[str, Array]  # label -> (n_trials, T_obs) per-trial NMSE
    truth_digests: dict[str, list[str]]  # label -> per-trial truth hashes

    def time_mean(self, label: str, start: int = 1, stop: int | None = None) -> float:
        """Average of the mean curve over steps ``start..stop`` (1-based, inclusive)."""
        curve = self.mean[label]
        stop = curve.size if stop is None else stop
        return float(np.mean(curve[start - 1 : stop]))


def _check_shared_truth(cfgs: Sequence[ExperimentConfig]) -> None:
    base = cfgs[0]
    for c in cfgs[1:]:
        if (c.model, c.T_obs, c.n_trials, c.seed, c.priors[0]) != (
            base.model, base.T_obs, base.n_trials, base.seed, base.priors[0]
        ):
            raise ContractViolation("all arms must share model, horizon, trials, seed and prior")


def run_nmse_experiment(cfgs: Sequence[ExperimentConfig], threads: int = 1) -> NmseTable:
    """Run every arm on the same per-trial truth and average NMSE curves."""
    if not cfgs:
        raise ContractViolation("need at least one filter arm")
    _check_shared_truth(cfgs)
    base = cfgs[0]

    def one(trial: int) -> list[TrialResult]:
        truth = trial_truth(base, trial)
        return [run_trial(c, trial, truth) for c in cfgs]

    per_trial = _map_trials(one, base.n_trials, threads)
    labels = [c.filter.name for c in cfgs]
    mean, stderr, curves, digests = {}, {}, {}, {}
    for k, label in enumerate(labels):
        curves[label] = np.array([row[k].nmse for row in per_trial])
        mean[label], stderr[label] = _mean_and_stderr(curves[label])
        digests[label] = [row[k].truth_digest for row in per_trial]
    return NmseTable(labels, mean, stderr, curves, digests)


@dataclass(frozen=True)
class SweepRow:
    d_x: int
    filter: str
    nmse_mean: float
    nmse_stderr: float
    N: int


def run_dimension_sweep(
    cfgs: Sequence[ExperimentConfig],
    dims: Sequence[int],
    scale_N: bool = False,
    threads: int = 1,
) -> list[SweepRow]:
    """Time-mean NMSE per (dimension, arm), with ``d_y = floor(0.6 d_x)``.

    With ``scale_N`` every arm uses ``N = d_x``.
    """
    if not dims:
        raise ContractViolation("dims must be non-empty")
    rows = []
    for d in dims:
        arms = []
        for c in cfgs:
            arm = replace(c.filter, N=d) if scale_N else c.filter
            arms.append(replace(c, model=c.model.with_dimension(d), filter=arm))
        table = run_nmse_experiment(arms, threads=threads)
        for c in arms:
            label = c.filter.name
            m, se = _mean_and_stderr(table.curves[label].mean(axis=1))
            rows.append(SweepRow(d, label, float(m), float(se), c.filter.N))
    return rows
