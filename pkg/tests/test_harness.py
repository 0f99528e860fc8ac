import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barrierfilter.exceptions import ContractViolation
from barrierfilter.harness import config as configmod
from barrierfilter.harness.cli import main
from barrierfilter.harness.config import (
    BarrierParams,
    ExperimentConfig,
    FilterArm,
    ModelConfig,
    PriorSpec,
    RunConfig,
    SweepConfig,
)
from barrierfilter.harness.experiments import (
    generate_ground_truth,
    generate_observation_matrix,
    run_dimension_sweep,
    run_filter,
    run_nmse_experiment,
    run_tv_decay_experiment,
    run_trial,
    trial_truth,
)
from barrierfilter.rng import stream

SMALL = ModelConfig(d_x=6, d_y=3, spinup=0.5, delta=0.01, delta_obs=0.1)
BARRIER = BarrierParams(rho=2.0, kappa=1.0, mu=10.0)


def small_cfg(kind="sir", N=64, T=5, trials=2, **kw):
    barrier = BARRIER if kind.startswith("barrier") else None
    return ExperimentConfig(
        model=kw.pop("model", SMALL), filter=FilterArm(kind, N, barrier=barrier),
        T_obs=T, n_trials=trials, seed=kw.pop("seed", 11), **kw,
    )


class TestObservationMatrix:
    def test_noiseless_columns_are_basis_vectors(self):
        H = generate_observation_matrix(10, 6, 0.0, stream(1))
        assert set(np.unique(H)) <= {0.0, 1.0}
        np.testing.assert_array_equal(H.sum(axis=0), np.ones(6))
        np.testing.assert_array_equal(H.T @ H, np.eye(6))

    def test_small_interference(self):
        for k in range(1000):
            H = generate_observation_matrix(10, 6, 5e-4, stream(3, k))
            top = np.abs(H).argmax(axis=0)
            assert len(set(top)) == 6
            assert np.all((H.max(axis=0) > 0.99) & (H.max(axis=0) < 1.01))
            mask = np.ones_like(H, dtype=bool)
            mask[top, np.arange(6)] = False
            assert np.all(np.abs(H[mask]) < 0.005)

    def test_full_rank_is_permutation(self):
        H = generate_observation_matrix(8, 8, 0.0, stream(2))
        assert sorted(H.argmax(axis=0)) == list(range(8))
        np.testing.assert_array_equal(H.sum(axis=1), np.ones(8))

    def test_too_many_observations(self):
        with pytest.raises(ContractViolation):
            generate_observation_matrix(4, 5, 0.0, stream(0))


class TestGroundTruth:
    def test_fixed_point(self):
        model = ModelConfig(d_x=4, d_y=2, sigma_x=0.0, sigma_y=0.0, sigma_v=0.0, spinup=1.0)
        cfg = ExperimentConfig(model=model, T_obs=5)
        H = generate_observation_matrix(4, 2, 0.0, stream(0))
        truth = generate_ground_truth(cfg, stream(1), H=H, x_init=np.full(4, 8.0))
        np.testing.assert_array_equal(truth.states, np.full((6, 4), 8.0))
        np.testing.assert_array_equal(truth.observations, np.full((5, 2), 8.0))

    def test_shapes_and_determinism(self):
        cfg = small_cfg(T=7)
        a, b = trial_truth(cfg, 0), trial_truth(cfg, 0)
        assert a.states.shape == (8, 6) and a.observations.shape == (7, 3)
        assert a.digest() == b.digest()
        np.testing.assert_array_equal(a.states, b.states)
        assert trial_truth(cfg, 1).digest() != a.digest()

    def test_climatology_bracket(self):
        cfg = ExperimentConfig(model=ModelConfig(), T_obs=50)
        energy = [np.mean(np.sum(trial_truth(cfg, k).states[1:] ** 2, axis=1)) / 10 for k in range(4)]
        assert all(4.0 <= e <= 30.0 for e in energy)


class TestRunFilter:
    @pytest.mark.parametrize("kind", ["sir", "apf", "enkf", "barrier-sir", "barrier-enkf"])
    def test_outputs_in_range(self, kind):
        cfg = small_cfg(kind, T=4, trials=1)
        result = run_trial(cfg, 0)
        assert result.means.shape == (4, 6)
        assert result.nmse.shape == result.ess.shape == (4,)
        assert np.all(result.nmse >= 0)
        assert np.all((result.ess >= 1 / cfg.filter.N) & (result.ess <= 1))

    def test_first_state_is_prior(self):
        cfg = small_cfg(T=2, trials=1)
        truth = trial_truth(cfg, 0)
        first = next(run_filter(cfg, truth, 0))
        assert first.n == 0
        assert first.ensemble.particles.shape == (64, 6)

    def test_zero_barrier_strength_matches_plain_filter(self):
        cfg = small_cfg("sir", T=3, trials=1)
        zero = dataclasses.replace(
            cfg, filter=FilterArm("barrier-sir", 64, barrier=BarrierParams(2.0, 1.0, 0.0))
        )
        np.testing.assert_array_equal(run_trial(cfg, 0).means, run_trial(zero, 0).means)


class TestTvExperiment:
    def test_identical_priors_give_zero(self):
        cfg = small_cfg("barrier-sir", T=4, trials=2, priors=(PriorSpec(0, 1), PriorSpec(0, 1)),
                        tv_grid=(6.0, 3.0))
        res = run_tv_decay_experiment(cfg)
        np.testing.assert_array_equal(res.curve.values, np.zeros(5))
        assert res.fit is None

    def test_curve_in_range_and_deterministic(self):
        cfg = small_cfg("barrier-sir", T=4, trials=2, priors=(PriorSpec(-1, 0.25), PriorSpec(1, 4)),
                        tv_grid=(6.0, 3.0))
        a = run_tv_decay_experiment(cfg)
        b = run_tv_decay_experiment(cfg, threads=2)
        assert a.curve.values.shape == (5,)
        assert np.all((a.curve.values >= 0) & (a.curve.values <= 1))
        np.testing.assert_array_equal(a.curve.values, b.curve.values)

    def test_needs_two_priors_and_grid(self):
        with pytest.raises(ContractViolation):
            run_tv_decay_experiment(small_cfg(tv_grid=(6.0, 3.0)))
        with pytest.raises(ContractViolation):
            run_tv_decay_experiment(small_cfg(priors=(PriorSpec(), PriorSpec())))


class TestNmseExperiment:
    def arms(self, trials=2):
        return [small_cfg(k, trials=trials) for k in ("sir", "enkf", "barrier-sir")]

    def test_shared_truth(self):
        table = run_nmse_experiment(self.arms())
        digests = list(table.truth_digests.values())
        assert all(d == digests[0] for d in digests)
        assert len(set(digests[0])) == 2

    def test_self_comparison_identical(self):
        cfg = small_cfg()
        twin = dataclasses.replace(cfg, filter=dataclasses.replace(cfg.filter, label="twin"))
        table = run_nmse_experiment([cfg, twin])
        np.testing.assert_array_equal(table.mean["sir"], table.mean["twin"])

    def test_thread_count_does_not_matter(self):
        a = run_nmse_experiment(self.arms(3), threads=1)
        b = run_nmse_experiment(self.arms(3), threads=3)
        for label in a.labels:
            np.testing.assert_array_equal(a.curves[label], b.curves[label])

    def test_mismatched_arms_rejected(self):
        with pytest.raises(ContractViolation):
            run_nmse_experiment([small_cfg(), small_cfg(seed=12)])

    def test_single_dimension_sweep_is_time_mean(self):
        cfg = small_cfg("enkf", N=20, trials=2)
        rows = run_dimension_sweep([cfg], [6])
        table = run_nmse_experiment([dataclasses.replace(cfg, model=cfg.model.with_dimension(6))])
        assert len(rows) == 1
        assert rows[0].nmse_mean == pytest.approx(table.time_mean("enkf"), rel=1e-12)

    def test_sweep_scales_n_and_observation_count(self):
        cfg = small_cfg("sir", N=20, trials=1, T=2)
        rows = run_dimension_sweep([cfg], [8, 10], scale_N=True)
        assert [(r.d_x, r.N) for r in rows] == [(8, 8), (10, 10)]
        assert ModelConfig().with_dimension(60).d_y == 36


class TestConfig:
    def full(self):
        return RunConfig(
            filters=(FilterArm("sir", 500), FilterArm("barrier-enkf", 750, "benkf", BARRIER)),
            model=ModelConfig(d_x=20, d_y=12),
            T_obs=50, n_trials=5,
            priors=(PriorSpec(-1, 0.25), PriorSpec(1, 4)),
            tv_grid=(6.0, 3.0), sweep=SweepConfig((20, 40), True), seed=2**63 + 5,
        )

    def test_round_trip(self):
        cfg = self.full()
        assert configmod.loads(configmod.dumps(cfg)) == cfg
        assert configmod.loads(configmod.dumps(RunConfig())) == RunConfig()

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(0, 2**64 - 1), st.integers(1, 200), st.floats(0.01, 10),
        st.sampled_from(configmod.FILTER_KINDS), st.integers(2, 5000),
    )
    def test_round_trip_property(self, seed, T, var, kind, N):
        barrier = BARRIER if kind.startswith("barrier") else None
        cfg = RunConfig(filters=(FilterArm(kind, N, barrier=barrier),), T_obs=T,
                        priors=(PriorSpec(0.5, var),), seed=seed)
        assert configmod.loads(configmod.dumps(cfg)) == cfg

    def test_unknown_key(self):
        with pytest.raises(ContractViolation):
            configmod.loads("bogus = 1\n[[filters]]\nkind = 'sir'\n")

    def test_invalid_values(self):
        with pytest.raises(ContractViolation):
            configmod.loads("[[filters]]\nkind = 'nope'\n")
        with pytest.raises(ContractViolation):
            configmod.loads("[[filters]]\nkind = 'barrier-sir'\n")
        with pytest.raises(ContractViolation):
            ModelConfig(d_x=10, d_y=11)
        with pytest.raises(ContractViolation):
            ModelConfig(delta=0.03, delta_obs=0.1)

    def test_bad_toml(self):
        with pytest.raises(configmod.ConfigError):
            configmod.loads("seed = = 3")

    def test_arms_share_run_settings(self):
        arms = self.full().arms()
        assert [a.filter.name for a in arms] == ["sir", "benkf"]
        assert {(a.seed, a.T_obs, a.n_trials) for a in arms} == {(2**63 + 5, 50, 5)}


LORENZ_TOML = """
seed = 3
T_obs = 4
n_trials = 2

[model]
d_x = 6
d_y = 3
delta = 0.01
spinup = 0.5

[[priors]]
offset = -1.0
variance = 0.25

[[priors]]
offset = 1.0
variance = 4.0

[tv_grid]
r = 6.0
r_sub = 3.0

[[filters]]
kind = "barrier-sir"
N = 32
barrier = { rho = 2.0, kappa = 1.0, mu = 10.0 }

[[filters]]
kind = "enkf"
N = 16

[sweep]
dims = [6, 8]
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "lorenz.toml"
    path.write_text(LORENZ_TOML)
    return path


class TestCli:
    def test_simulate_is_reproducible(self, config_file, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert main(["simulate", "--config", str(config_file), "--seed", "7", "--out", str(out)]) == 0
        for name in ("states.csv", "observations.csv", "H.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        manifest = json.loads((outs[0] / "manifest.json").read_text())
        assert manifest["seed"] == 7
        assert {"config", "git_describe", "durations_s", "schema_version"} <= set(manifest)
        header = (outs[0] / "states.csv").read_text().splitlines()[0]
        assert header == "trial,n,x_0,x_1,x_2,x_3,x_4,x_5"

    def test_seed_changes_output(self, config_file, tmp_path):
        for s in ("1", "2"):
            main(["simulate", "--config", str(config_file), "--seed", s, "--out", str(tmp_path / s)])
        assert (tmp_path / "1" / "states.csv").read_bytes() != (tmp_path / "2" / "states.csv").read_bytes()

    def test_tv_decay_outputs(self, config_file, tmp_path):
        out = tmp_path / "tv"
        assert main(["tv-decay", "--config", str(config_file), "--out", str(out)]) == 0
        lines = (out / "tv_curve.csv").read_text().splitlines()
        assert lines[0] == "n,tv_mean,tv_stderr"
        assert len(lines) == 6
        assert all(0 <= float(l.split(",")[1]) <= 1 for l in lines[1:])
        assert "gamma_hat" in json.loads((out / "fit.json").read_text())

    def test_nmse_and_sweep_outputs(self, config_file, tmp_path):
        assert main(["nmse", "--config", str(config_file), "--out", str(tmp_path / "n"),
                     "--trials", "1", "--threads", "2"]) == 0
        lines = (tmp_path / "n" / "nmse.csv").read_text().splitlines()
        assert lines[0] == "n,nmse_barrier-sir,nmse_enkf"
        assert len(lines) == 5
        assert main(["dim-sweep", "--config", str(config_file), "--out", str(tmp_path / "d"),
                     "--trials", "1"]) == 0
        rows = (tmp_path / "d" / "dim_sweep.csv").read_text().splitlines()
        assert rows[0] == "d_x,filter,nmse_mean,nmse_stderr"
        assert len(rows) == 5

    def test_fit_gamma_on_synthetic_curve(self, tmp_path, capsys):
        n = np.arange(30)
        values = (1 - 0.25) ** n / 0.25
        path = tmp_path / "tv_curve.csv"
        path.write_text("n,tv_mean,tv_stderr\n" + "".join(f"{k},{v:.17g},0\n" for k, v in zip(n, values)))
        assert main(["fit-gamma", "--in", str(path)]) == 0
        assert capsys.readouterr().out.strip() == "0.500000"
        assert main(["fit-gamma", "--in", str(path), "--d0", "1", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.strip() == "0.500000"
        assert json.loads((tmp_path / "fit.json").read_text())["d0"] == 1.0

    def test_exit_codes_are_distinct(self, config_file, tmp_path):
        usage = main(["frobnicate"])
        missing = main(["simulate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)])
        bad = tmp_path / "bad.toml"
        bad.write_text("[[filters]]\nkind = 'sir'\nN = 0\n")
        invalid = main(["simulate", "--config", str(bad), "--out", str(tmp_path)])
        flat = tmp_path / "flat.csv"
        flat.write_text("n,tv_mean\n" + "".join(f"{k},0.3\n" for k in range(10)))
        numeric = main(["fit-gamma", "--in", str(flat)])
        codes = [usage, missing, invalid, numeric]
        assert 0 not in codes
        assert len(set(codes)) == 4

    def test_sweep_without_table(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[[filters]]\nkind = 'sir'\n")
        assert main(["dim-sweep", "--config", str(path), "--out", str(tmp_path)]) == 4
