"""Experiment configuration and its TOML representation.

A config file describes one *run*: shared model and run settings, the prior
list, an optional TV grid, one or more filter arms and an optional
dimension sweep. :meth:`RunConfig.arms` flattens it into one
:class:`ExperimentConfig` per filter arm.

Schema (all tables optional except ``[[filters]]``)::

    seed = 7
    T_obs = 30
    n_trials = 32

    [model]
    d_x = 10
    d_y = 6
    F = 8.0
    sigma_x = 0.7071067811865476   # standard deviations, not variances
    sigma_y = 0.5
    sigma_v = 0.0005
    delta = 0.001
    delta_obs = 0.1
    spinup = 5.0

    [[priors]]              # N(X_0 + offset * 1, variance * I)
    offset = -1.0
    variance = 0.25

    [tv_grid]
    r = 6.0
    r_sub = 3.0

    [[filters]]
    label = "barrier-sir"
    kind = "barrier-sir"    # sir | apf | enkf | barrier-sir | barrier-enkf
    N = 2048
    barrier = { rho = 2.0, kappa = 1.0, mu = 10.0 }

    [sweep]
    dims = [20, 40, 60]
    scale_N = false
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from ..exceptions import ContractViolation

FILTER_KINDS = ("sir", "apf", "enkf", "barrier-sir", "barrier-enkf")


class ConfigError(Exception):
    """The config file is missing, unreadable or not valid TOML."""


@dataclass(frozen=True)
class BarrierParams:
    rho: float
    kappa: float = 1.0
    mu: float = 10.0

    def __post_init__(self):
        if not (self.rho > 0 and self.kappa >= 1 and self.mu >= 0):
            raise ContractViolation("barrier needs rho > 0, kappa >= 1, mu >= 0")


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior centred at the true initial state plus a constant offset."""

    offset: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ContractViolation("prior variance must be positive")


@dataclass(frozen=True)
class ModelConfig:
    d_x: int = 10
    d_y: int = 6
    F: float = 8.0
    sigma_x: float = math.sqrt(0.5)
    sigma_y: float = 0.5
    sigma_v: float = 5e-4
    delta: float = 1e-3
    delta_obs: float = 0.1
    spinup: float = 5.0

    def __post_init__(self):
        if self.d_x < 4:
            raise ContractViolation("d_x must be at least 4")
        if not 1 <= self.d_y <= self.d_x:
            raise ContractViolation("need 1 <= d_y <= d_x")
        if self.sigma_x < 0 or self.sigma_y < 0 or self.sigma_v < 0:
            raise ContractViolation("noise scales must be non-negative")
        if not (self.delta > 0 and self.delta_obs > 0) or self.spinup < 0:
            raise ContractViolation("time steps must be positive and spinup non-negative")
        J = round(self.delta_obs / self.delta)
        if J < 1 or abs(J * self.delta - self.delta_obs) > 1e-9 * self.delta_obs:
            raise ContractViolation("delta_obs must be an integer multiple of delta")

    def with_dimension(self, d_x: int) -> ModelConfig:
        return dataclasses.replace(self, d_x=d_x, d_y=max(1, math.floor(0.6 * d_x)))


@dataclass(frozen=True)
class FilterArm:
    kind: str = "sir"
    N: int = 500
    label: str | None = None
    barrier: BarrierParams | None = None

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ContractViolation(f"unknown filter kind {self.kind!r}")
        if self.N < 1 or (self.kind.endswith("enkf") and self.N < 2):
            raise ContractViolation("N too small for this filter")
        if self.kind.startswith("barrier") and self.barrier is None:
            raise ContractViolation(f"{self.kind} needs barrier parameters")

    @property
    def name(self) -> str:
        return self.label or self.kind


@dataclass(frozen=True)
class SweepConfig:
    dims: tuple[int, ...] = (20, 40, 60)
    scale_N: bool = False

    def __post_init__(self):
        if not self.dims:
            raise ContractViolation("sweep needs at least one dimension")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run one filter arm over ``n_trials`` trials."""

    model: ModelConfig = field(default_factory=ModelConfig)
    filter: FilterArm = field(default_factory=FilterArm)
    T_obs: int = 30
    n_trials: int = 1
    priors: tuple[PriorSpec, ...] = (PriorSpec(),)
    tv_grid: tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.T_obs < 1 or self.n_trials < 1:
            raise ContractViolation("T_obs and n_trials must be positive")
        if not self.priors:
            raise ContractViolation("at least one prior is required")
        if not 0 <= self.seed < 2**64:
            raise ContractViolation("seed must be a 64-bit unsigned integer")

    @property
    def J(self) -> int:
        return round(self.model.delta_obs / self.model.delta)


@dataclass(frozen=True)
class RunConfig:
    filters: tuple[FilterArm, ...] = (FilterArm(),)
    model: ModelConfig = field(default_factory=ModelConfig)
    T_obs: int = 30
    n_trials: int = 1
    priors: tuple[PriorSpec, ...] = (PriorSpec(),)
    tv_grid: tuple[float, float] | None = None
    sweep: SweepConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.filters:
            raise ContractViolation("at least one [[filters]] entry is required")
        names = [f.name for f in self.filters]
        if len(set(names)) != len(names):
            raise ContractViolation("filter labels must be unique")

    def arms(self) -> list[ExperimentConfig]:
        return [
            ExperimentConfig(
                model=self.model,
                filter=arm,
                T_obs=self.T_obs,
                n_trials=self.n_trials,
                priors=self.priors,
                tv_grid=self.tv_grid,
                seed=self.seed,
            )
            for arm in self.filters
        ]

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "seed": self.seed,
            "T_obs": self.T_obs,
            "n_trials": self.n_trials,
            "model": dataclasses.asdict(self.model),
            "priors": [dataclasses.asdict(p) for p in self.priors],
            "filters": [],
        }
        for arm in self.filters:
            entry: dict[str, Any] = {"kind": arm.kind, "N": arm.N}
            if arm.label is not None:
                entry["label"] = arm.label
            if arm.barrier is not None:
                entry["barrier"] = dataclasses.asdict(arm.barrier)
            out["filters"].append(entry)
        if self.tv_grid is not None:
            out["tv_grid"] = {"r": self.tv_grid[0], "r_sub": self.tv_grid[1]}
        if self.sweep is not None:
            out["sweep"] = {"dims": list(self.sweep.dims), "scale_N": self.sweep.scale_N}
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunConfig:
        known = {"seed", "T_obs", "n_trials", "model", "priors", "filters", "tv_grid", "sweep"}
        unknown = set(raw) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        try:
            filters = tuple(
                FilterArm(
                    kind=f.get("kind", "sir"),
                    N=int(f.get("N", 500)),
                    label=f.get("label"),
                    barrier=BarrierParams(**f["barrier"]) if "barrier" in f else None,
                )
                for f in raw.get("filters", [{}])
            )
            model = ModelConfig(**raw.get("model", {}))
            priors = tuple(PriorSpec(**p) for p in raw.get("priors", [{}]))
            grid = raw.get("tv_grid")
            sweep = raw.get("sweep")
            return cls(
                filters=filters,
                model=model,
                T_obs=int(raw.get("T_obs", 30)),
                n_trials=int(raw.get("n_trials", 1)),
                priors=priors,
                tv_grid=(float(grid["r"]), float(grid["r_sub"])) if grid else None,
                sweep=SweepConfig(tuple(int(d) for d in sweep.get("dims", ())),
                                  bool(sweep.get("scale_N", False))) if sweep else None,
                seed=int(raw.get("seed", 0)),
            )
        except (TypeError, KeyError) as exc:
            raise ContractViolation(f"malformed config: {exc}") from exc


def loads(text: str) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig.from_dict(raw)


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())
