import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dopplerkb.constants import NH3_SAQ63, doppler_width
from dopplerkb.errors import ConfigurationError, DomainError
from dopplerkb.fitting import (
    PARAM_NAMES,
    FitConfig,
    SynthesisRecipe,
    bias_study,
    evaluate_model,
    fit_report_json,
    fit_spectrum,
    initial_guess,
    model_jacobian,
    mpc_absorbance_per_pa,
    monte_carlo_ensemble,
    regress_width,
    task_seeds,
    width_vs_absorbance,
)
from dopplerkb.lineshape import QuadratureConfig, SpeedDependenceLaw
from dopplerkb.spectrum import FrequencyGrid, SpectrumRecord, add_noise

D = doppler_width(273.15, NH3_SAQ63)
GRID = FrequencyGrid.centered(500.0, 0.5)
QUAD = SpeedDependenceLaw.quadratic(0.360, -3.8)


def _recipe(profile="voigt", law=SpeedDependenceLaw(), **kw):
    base = dict(grid=GRID, dnuD=D, law=law, profile=profile, p1=2e-5, omega0=0.7)
    base.update(kw)
    return SynthesisRecipe(**base)


def test_fixed_point_converges_immediately():
    for profile, law in (("voigt", SpeedDependenceLaw()), ("sdvp", QUAD)):
        rec, theta = _recipe(profile, law).synthesize(1.5)
        res = fit_spectrum(rec, FitConfig(theta, profile=profile, law=law))
        assert res.converged
        assert res.n_iter <= 2
        assert np.abs(res.residuals).max() < 1e-10


def test_sdvp_recovers_from_perturbed_start():
    rec, theta = _recipe("sdvp", QUAD).synthesize(1.5)
    start = np.array(theta) * np.array([1.05, 0.95, 1.05, 0.95, 1.05, 1.05, 1.0])
    start[2] = theta[2] + 0.05 * D
    res = fit_spectrum(rec, FitConfig(start, profile="sdvp", law=QUAD))
    assert res.converged
    for name in ("p0", "p1", "absorbance", "dnuD", "gamma"):
        np.testing.assert_allclose(res[name], theta[PARAM_NAMES.index(name)], rtol=1e-7)
    np.testing.assert_allclose(res["omega0"], theta[2], atol=1e-7 * D)


def test_fixed_parameters_bit_identical():
    rec, theta = _recipe().synthesize(1.2)
    start = np.array(theta) * 1.01
    cfg = FitConfig(start, law=SpeedDependenceLaw()).with_free(gamma=False, p1=False, delta=False)
    res = fit_spectrum(rec, cfg)
    for name in ("gamma", "p1", "delta"):
        i = PARAM_NAMES.index(name)
        assert res.params[i] == start[i]
    assert res.free_names == ("p0", "omega0", "absorbance", "dnuD")
    assert res.covariance.shape == (4, 4)


def test_objective_non_increasing_over_accepted_steps():
    rec, theta = _recipe().synthesize(1.8)
    rec = add_noise(rec, 1e3, seed=3)
    start = np.array(theta) * np.array([0.9, 1.0, 1.0, 1.3, 1.1, 2.0, 1.0])
    start[2] = 3.0
    res = fit_spectrum(rec, FitConfig(start))
    accepted = [e["chi2"] for e in res.log if e["accepted"]]
    assert len(accepted) > 2
    assert all(b <= a for a, b in zip(accepted, accepted[1:]))
    assert res.converged


def _scaled_pair(rec, cfg, theta, start, c):
    a = fit_spectrum(replace(rec, sigma=None), cfg.with_initial(start))
    scaled_start = np.array(start)
    scaled_start[:2] *= c
    b = fit_spectrum(replace(rec, signal=rec.signal * c, sigma=None), cfg.with_initial(scaled_start))
    return a, b


def test_signal_scaling_invariance():
    rec, theta = _recipe("sdvp", QUAD).synthesize(1.3)
    start = np.array(theta) * np.array([1.02, 0.9, 1.0, 0.97, 1.02, 1.1, 1.0])
    start[2] += 0.5
    c = 3.7
    a, b = _scaled_pair(rec, FitConfig(profile="sdvp", law=QUAD), theta, start, c)
    assert a.converged and b.converged
    for name in ("omega0", "absorbance", "dnuD", "gamma", "delta"):
        np.testing.assert_allclose(b[name], a[name], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(b["p0"], c * a["p0"], rtol=1e-10)
    np.testing.assert_allclose(b["p1"], c * a["p1"], rtol=1e-10)


def test_signal_scaling_invariance_noisy():
    rec, theta = _recipe("sdvp", QUAD).synthesize(1.3)
    rec = add_noise(rec, 1e3, seed=9)
    a, b = _scaled_pair(rec, FitConfig(profile="sdvp", law=QUAD), theta, theta, 3.7)
    for name in ("omega0", "absorbance", "dnuD", "delta"):
        np.testing.assert_allclose(b[name], a[name], rtol=1e-10, atol=1e-12)
    # chi2 is flat to rounding over ~3e-9 of gamma at this noise level
    np.testing.assert_allclose(b["gamma"], a["gamma"], rtol=1e-8)


def _richardson_jacobian(nu, theta, free, law, profile, quad):
    """Fourth-order central differences of the model in linear parameters."""
    cols = []
    for i in free:
        h = 1e-4 * (abs(theta[i]) if theta[i] != 0 else 1.0)
        if PARAM_NAMES[i] in ("omega0", "delta"):
            h = 1e-4 * theta[4]

        def f(s):
            th = np.array(theta, dtype=float)
            th[i] += s
            return evaluate_model(nu, th, law, profile, quad)

        cols.append((8 * (f(h) - f(-h)) - (f(2 * h) - f(-2 * h))) / (12 * h))
    return np.column_stack(cols)


def _check_jacobian(rec, theta, law, profile, quad):
    cfg = FitConfig(theta, free_mask=(True,) * 7, law=law, profile=profile, quad=quad)
    J = model_jacobian(rec, cfg)
    ref = _richardson_jacobian(rec.frequencies, theta, range(7), law, profile, quad)
    for k in range(7):
        scale = np.abs(ref[:, k]).max()
        assert np.abs(J[:, k] - ref[:, k]).max() <= 1e-6 * scale, PARAM_NAMES[k]


def test_jacobian_matches_finite_differences_voigt():
    rng = np.random.default_rng(42)
    grid = FrequencyGrid.centered(500.0, 2.0)
    rec = SpectrumRecord(grid, np.ones(grid.count))
    for _ in range(100):
        theta = (rng.uniform(0.5, 2), rng.uniform(-1e-3, 1e-3), rng.uniform(-5, 5), rng.uniform(20, 300),
                 rng.uniform(40, 60), rng.uniform(0.05, 3.0), rng.uniform(-0.05, 0.05))
        _check_jacobian(rec, theta, SpeedDependenceLaw(), "voigt", QuadratureConfig())


def test_jacobian_matches_finite_differences_sdvp():
    rng = np.random.default_rng(7)
    grid = FrequencyGrid.centered(500.0, 5.0)
    rec = SpectrumRecord(grid, np.ones(grid.count))
    quad = QuadratureConfig().fixed(64, levels=12)
    for _ in range(10):
        p = rng.uniform(0.5, 3.0)
        theta = (rng.uniform(0.5, 2), rng.uniform(-1e-3, 1e-3), rng.uniform(-5, 5), rng.uniform(20, 300),
                 rng.uniform(40, 60), 0.12 * p, 0.0012 * p)
        _check_jacobian(rec, theta, QUAD, "sdvp", quad)


def test_singular_and_max_iter_status():
    rec, theta = _recipe("gaussian").synthesize(1.0)
    # gamma has no effect on a Gaussian profile: singular normal equations
    res = fit_spectrum(rec, FitConfig(theta, profile="gaussian"))
    assert res.status == "singular"
    assert np.isnan(res.covariance).all()
    start = np.array(theta) * np.array([1.1, 1, 1, 1.3, 1.1, 1.5, 1])
    res = fit_spectrum(rec, FitConfig(start, max_iter=1))
    assert res.status == "max_iter" and res.n_iter == 1


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FitConfig((1.0,) * 7, free_mask=(False,) * 7)
    with pytest.raises(ConfigurationError):
        FitConfig((1.0,) * 6)
    with pytest.raises(ConfigurationError):
        FitConfig((1.0, 0, 0, math.nan, 50, 0.1, 0))
    with pytest.raises(ConfigurationError):
        FitConfig((1.0, 0, 0, 100, 50, 0.0, 0))
    with pytest.raises(ConfigurationError):
        FitConfig((1.0,) * 7, profile="galatry")
    tiny = SpectrumRecord(FrequencyGrid(0.0, 1.0, 4), np.ones(4))
    with pytest.raises(DomainError):
        fit_spectrum(tiny, FitConfig((1.0, 0, 0, 10, 50, 0.1, 0)))


def test_covariance_psd_and_report():
    rec, theta = _recipe().synthesize(1.5)
    rec = add_noise(rec, 1e3, seed=1)
    cfg = FitConfig(theta)
    res = fit_spectrum(rec, cfg)
    assert res.converged
    np.testing.assert_allclose(res.covariance, res.covariance.T, rtol=0, atol=0)
    assert np.linalg.eigvalsh(res.covariance).min() >= -1e-12 * np.abs(res.covariance).max()
    rep = json.loads(fit_report_json(res, cfg))
    assert rep["status"] == "converged"
    assert set(rep["params"]) == set(PARAM_NAMES)
    assert rep["config"]["free"] == list(res.free_names)
    assert len(rep["covariance"]) == len(res.free_names)
    assert rep["iterations"][0]["iter"] == 0
    # deterministic
    assert fit_report_json(fit_spectrum(rec, cfg), cfg) == fit_report_json(res, cfg)


def test_unweighted_covariance_scales_with_residuals():
    rec, theta = _recipe().synthesize(1.5)
    noisy = add_noise(rec, 1e3, seed=4)
    w = fit_spectrum(noisy, FitConfig(theta))
    u = fit_spectrum(replace(noisy, sigma=None), FitConfig(theta))
    np.testing.assert_allclose(u.params[:5], w.params[:5], rtol=1e-10, atol=1e-15)
    np.testing.assert_allclose(u["gamma"], w["gamma"], rtol=1e-7)
    np.testing.assert_allclose(u.stderr("dnuD"), w.stderr("dnuD") * math.sqrt(w.reduced_chi2), rtol=1e-6)


def test_initial_guess_lands_near_truth():
    rec, theta = _recipe("sdvp", QUAD).synthesize(1.5)
    guess = initial_guess(rec, 273.15, NH3_SAQ63)
    assert guess[6] == 0.0
    guess = guess[:6] + (theta[6],)
    assert abs(guess[2] - theta[2]) <= GRID.step
    np.testing.assert_allclose(guess[4], D, rtol=1e-12)
    np.testing.assert_allclose(guess[5], 0.120 * 1.5, rtol=1e-12)
    np.testing.assert_allclose(guess[3], theta[3], rtol=0.1)
    res = fit_spectrum(rec, FitConfig(guess, profile="sdvp", law=QUAD))
    assert res.converged
    np.testing.assert_allclose(res["dnuD"], D, rtol=1e-8)


# -- line-absorbance regression --------------------------------------------------------------

def test_regression_constant_and_exact_line():
    A = [50.0, 120.0, 200.0, 310.0]
    r = regress_width(A, [49.9] * 4)
    np.testing.assert_allclose((r.intercept, r.slope), (49.9, 0.0), atol=1e-12)
    w0, s = 49.88, -3e-7
    r = regress_width(A, [w0 + s * a for a in A], [1e-3, 2e-3, 1e-3, 5e-4])
    np.testing.assert_allclose(r.intercept, w0, rtol=1e-12)
    np.testing.assert_allclose(r.slope, s, rtol=1e-9, atol=1e-15)
    assert r.weighted


def test_regression_rank_error():
    with pytest.raises(DomainError):
        regress_width([100.0, 100.0, 100.0], [1.0, 2.0, 3.0])
    with pytest.raises(DomainError):
        regress_width([1.0, 2.0], [1.0, 2.0])


def test_regression_weighting_matches_closed_form():
    rng = np.random.default_rng(3)
    A = rng.uniform(100, 300, 8)
    se = rng.uniform(1e-4, 1e-3, 8)
    w = 49.9 + 1e-6 * A + rng.normal(0, se)
    r = regress_width(A, w, se)
    W = 1 / se ** 2
    Sw, Sx, Sy, Sxx, Sxy = W.sum(), (W * A).sum(), (W * w).sum(), (W * A * A).sum(), (W * A * w).sum()
    det = Sw * Sxx - Sx ** 2
    np.testing.assert_allclose(r.intercept, (Sxx * Sy - Sx * Sxy) / det, rtol=1e-12)
    np.testing.assert_allclose(r.intercept_se, math.sqrt(Sxx / det), rtol=1e-10)


def test_width_vs_absorbance_on_fits():
    fits = []
    for p in (1.0, 1.5, 2.0):
        rec, theta = _recipe().synthesize(p)
        fits.append(fit_spectrum(add_noise(rec, 1e4, seed=int(10 * p)), FitConfig(theta)))
    reg = width_vs_absorbance(fits)
    assert abs(reg.intercept / D - 1) < 5 * reg.intercept_se / D + 1e-9
    with pytest.raises(DomainError):
        width_vs_absorbance(fits[:2])


# -- studies -------------------------------------------------------------------------------------

def test_mpc_calibration():
    per_pa = mpc_absorbance_per_pa(D)
    peak = lambda p: math.exp(-per_pa * p / (D * math.sqrt(math.pi)))  # noqa: E731
    np.testing.assert_allclose(1 - peak(2.5), 0.98, rtol=1e-12)
    assert 0.10 < 1 - peak(0.1) < 0.20


def test_task_seeds_independent_of_count():
    a = task_seeds(123, 5)
    assert len(set(a)) == 5
    assert a == task_seeds(123, 5)
    assert a != task_seeds(124, 5)


def test_bias_matched_model_is_zero():
    res = bias_study(_recipe(), FitConfig(), 5)
    assert res.valid and res.failures == 0
    assert abs(res.bias_ppm) < 1e-6
    assert abs(res.intercept_bias_ppm) < 1e-6


def test_bias_noisy_matched_model_within_statistics_and_threads():
    truth = _recipe(snr=1e3)
    one = bias_study(truth, FitConfig(), 8, seed=5, threads=1)
    four = bias_study(truth, FitConfig(), 8, seed=5, threads=4)
    assert one.per_spectrum_ppm == four.per_spectrum_ppm
    assert abs(one.bias_ppm) < 4 * one.stderr_ppm


def test_bias_failures_counted():
    # a speed-dependent law is rejected for a profile with gamma -> 0 in the fit
    res = bias_study(_recipe(gamma_per_pa=0.0), FitConfig(profile="sdvp", law=QUAD), 4)
    assert res.failures == 4
    assert not res.valid


def test_small_monte_carlo_ensemble():
    truth = _recipe(snr=1e3)
    ens = monte_carlo_ensemble(truth, FitConfig(), 40, seed=1, threads=2)
    assert ens.failures == 0
    # antithetic pairs cancel the linear noise response
    assert abs(ens.bias_ppm) < 5.0
    assert 0.6 < ens.scatter / ens.mean_reported_se < 1.5
    rep = ens.to_report()
    assert rep["n_seeds"] == 40
    with pytest.raises(ConfigurationError):
        monte_carlo_ensemble(_recipe(), FitConfig(), 2)


@settings(max_examples=15, deadline=None)
@given(p=st.floats(0.3, 3.0), a=st.floats(0.5, 2.0), shift=st.floats(-10.0, 10.0))
def test_fit_recovers_noiseless_voigt(p, a, shift):
    rec, theta = _recipe(p0=a, omega0=shift).synthesize(p)
    start = np.array(theta) * np.array([1.02, 1.0, 1.0, 0.97, 1.02, 1.1, 1.0])
    start[2] += 0.5
    res = fit_spectrum(rec, FitConfig(start))
    assert res.converged
    np.testing.assert_allclose(res["dnuD"], D, rtol=1e-9)
