import math

import numpy as np
import pytest
from scipy import stats

import hiermix as hm
from hiermix.simulate import SimulationError, simulate


class TestGaussianSimulation:
    def test_between_within_variance_ratio(self):
        # sd_b = sd_e = 1: the cluster-mean decomposition recovers both
        frame = simulate(
            "(y M1[id], family(gaussian))",
            {"_cons": 0.0, "ln_sd": 0.0, "ln_sd(M1)": 0.0},
            levels={"id": 200},
            outcomes=[{"times": [0, 1, 2, 3, 4]}],
            seed=42,
        )
        y = frame.col("y")
        ids = frame.col("id")
        means = np.array([y[ids == g].mean() for g in np.unique(ids)])
        within = np.array([y[ids == g].var(ddof=1) for g in np.unique(ids)]).mean()
        between = means.var(ddof=1) - within / 5  # correct the mean noise
        assert abs(between / within - 1.0) < 0.15

    def test_zero_variance_clusters_look_iid(self):
        frame = simulate(
            "(y M1[id], family(gaussian))",
            {"_cons": 0.0, "ln_sd": 0.0, "ln_sd(M1)": -12.0},
            levels={"id": 150},
            outcomes=[{"times": [0, 1, 2, 3]}],
            seed=7,
        )
        y = frame.col("y")
        ids = frame.col("id")
        groups = [y[ids == g] for g in np.unique(ids)]
        _, p = stats.f_oneway(*groups)
        assert p > 0.01

    def test_covariate_effect_propagates(self):
        frame = simulate(
            "(y x M1[id], family(gaussian))",
            {"x": 2.0, "_cons": 1.0, "ln_sd": math.log(0.1), "ln_sd(M1)": -12.0},
            levels={"id": 300},
            covariates={"x": {"dist": "normal"}},
            outcomes=[{"times": [0.0]}],
            seed=1,
        )
        slope = np.polyfit(frame.col("x"), frame.col("y"), 1)[0]
        assert abs(slope - 2.0) < 0.05


class TestSurvivalSimulation:
    def test_weibull_transformed_exponential(self):
        # with H = lam * y^gamma, the transform y^gamma is exponential(lam)
        lam, gam = 0.2, 1.3
        frame = simulate(
            "(y M1[id], family(weibull, failure(d)))",
            {"_cons": math.log(lam), "ln_gamma": math.log(gam), "ln_sd(M1)": -12.0},
            levels={"id": 5000},
            outcomes=[{}],
            seed=3,
        )
        y = frame.col("y")
        d = frame.col("d")
        assert np.all(d == 1.0)
        assert abs(np.mean(y**gam) - 1 / lam) / (1 / lam) < 0.05

    def test_censoring_applied(self):
        frame = simulate(
            "(y M1[id], family(exponential, failure(d)))",
            {"_cons": 0.0, "ln_sd(M1)": -12.0},
            levels={"id": 4000},
            outcomes=[{"censoring": 1.0}],
            seed=4,
        )
        y, d = frame.col("y"), frame.col("d")
        assert y.max() <= 1.0 + 1e-12
        # P(censored) = S(1) = exp(-1)
        assert abs((d == 0).mean() - math.exp(-1)) < 0.02

    def test_frailty_induces_correlation(self):
        frame = simulate(
            "(y M1[id], family(exponential, failure(d)))",
            {"_cons": 0.0, "ln_sd(M1)": math.log(1.0)},
            levels={"id": 800},
            outcomes=[{"records": 2}],
            seed=5,
        )
        y = np.log(frame.col("y"))
        first, second = y[0::2], y[1::2]
        r = np.corrcoef(first, second)[0, 1]
        assert r > 0.25

    def test_time_dependent_hazard_inversion(self):
        # gompertz-style log hazard via fp(1): check against the closed form
        frame = simulate(
            "(y fp(1)@g M1[id], family(exponential, failure(d)) timevar(y))",
            {"g": 0.8, "_cons": math.log(0.3), "ln_sd(M1)": -12.0},
            levels={"id": 4000},
            outcomes=[{"censoring": 8.0}],
            seed=6,
        )
        y, d = frame.col("y"), frame.col("d")
        # survival at t: exp(-0.3/0.8 * (e^{0.8 t} - 1)); compare at t = 1
        s1_hat = (y > 1.0).mean()
        s1 = math.exp(-0.3 / 0.8 * (math.exp(0.8) - 1))
        assert abs(s1_hat - s1) < 0.02

    def test_joint_layout_and_missing_pattern(self):
        frame = simulate(
            "(stime trt EV[logb]@a, family(weibull, failure(died)))"
            " (logb fp(1)@l M1[id], family(gaussian) timevar(time))",
            {
                "stime:trt": 0.1,
                "a": 0.4,
                "stime:_cons": -1.0,
                "stime:ln_gamma": 0.0,
                "l": 0.4,
                "logb:_cons": 0.5,
                "logb:ln_sd": math.log(0.3),
                "ln_sd(M1)": math.log(0.6),
            },
            levels={"id": 50},
            covariates={"trt": {"dist": "bernoulli", "p": 0.5}},
            outcomes=[{"censoring": 5.0}, {"times": [0.0, 0.5, 1.0, 2.0]}],
            seed=8,
        )
        ids = frame.col("id")
        stime = frame.columns["stime"]
        # one survival row per subject, on its first row
        assert np.isfinite(stime).sum() == 50
        first_rows = np.flatnonzero(np.diff(np.concatenate(([0.0], ids))) != 0)
        assert np.all(np.isfinite(stime[first_rows]))
        # fitting the generated data recovers a sane association sign
        res = hm.fit_model(
            "(stime trt EV[logb]@a, family(weibull, failure(died)))"
            " (logb fp(1)@l M1[id], family(gaussian) timevar(time))",
            {name: frame.col(name) for name in frame.names},
            points=5,
        )
        assert res.converged

    def test_rp_needs_explicit_knots(self):
        with pytest.raises(SimulationError, match="knots"):
            simulate(
                "(y M1[id], family(rp, failure(d) scale(h) df(2)))",
                [1.0, 0.1, 0.0, -1.0],
                levels={"id": 10},
                outcomes=[{"censoring": 2.0}],
            )

    def test_theta_length_checked(self):
        with pytest.raises(SimulationError, match="length"):
            simulate(
                "(y M1[id], family(exponential, failure(d)))",
                [0.0],
                levels={"id": 5},
                outcomes=[{}],
            )

    def test_determinism(self):
        args = dict(
            levels={"id": 40},
            outcomes=[{"censoring": 2.0}],
            seed=123,
        )
        a = simulate("(y M1[id], family(exponential, failure(d)))", {"ln_sd(M1)": -1.0}, **args)
        b = simulate("(y M1[id], family(exponential, failure(d)))", {"ln_sd(M1)": -1.0}, **args)
        np.testing.assert_array_equal(a.col("y"), b.col("y"))
