import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from commontrends import _accel, _kernels, ssm
from commontrends.errors import ContractError, DataError, DegeneracyError
from oracles import condition, diffuse_identifying_steps, random_model, reference_loglik

LOG2PI = math.log(2 * math.pi)


def pure_noise():
    return ssm.GaussianStateSpace([[1.0]], [1.0], [[0.0]], 1.0, [0.0], [[0.0]])


def local_level(q, h, diffuse=True):
    P1 = [[0.0]] if diffuse else [[1.0]]
    return ssm.GaussianStateSpace([[1.0]], [1.0], [[q]], h, [0.0], P1, [diffuse])


def masked(y, observed):
    return ssm.ObservationSeries(np.where(observed, y, np.nan))


# -- observation series -------------------------------------------------------

def test_mask_is_derived_from_nan():
    s = ssm.ObservationSeries([1.0, np.nan, 3.0])
    assert s.missing_mask.tolist() == [False, True, False]
    assert s.n_observed == 2
    assert len(s) == 3


def test_explicit_mask_blanks_values():
    s = ssm.ObservationSeries([1.0, 2.0, 3.0], [False, True, False])
    assert np.isnan(s.values[1])


def test_series_arrays_are_read_only():
    s = ssm.ObservationSeries([1.0, 2.0])
    with pytest.raises(ValueError):
        s.values[0] = 5.0


@pytest.mark.parametrize("values", [[1.0], [1.0, np.inf], []])
def test_series_rejects_bad_values(values):
    with pytest.raises(DataError):
        ssm.ObservationSeries(values)


def test_mask_length_mismatch():
    with pytest.raises(ContractError):
        ssm.ObservationSeries([1.0, 2.0], [False])


def test_calendar_wraps_years():
    s = ssm.ObservationSeries(np.zeros(14), time_origin=(1958, 11))
    years, months = s.calendar()
    assert (years[0], months[0]) == (1958, 11)
    assert (years[2], months[2]) == (1959, 1)
    assert (years[-1], months[-1]) == (1959, 12)


# -- model validation ---------------------------------------------------------

def test_model_rejects_asymmetric_state_cov():
    with pytest.raises(ContractError, match="symmetric"):
        ssm.GaussianStateSpace(np.eye(2), [1, 0], [[1, 0.5], [0, 1]], 1.0, [0, 0], np.eye(2))


def test_model_rejects_indefinite_cov():
    with pytest.raises(ContractError, match="semidefinite"):
        ssm.GaussianStateSpace(np.eye(2), [1, 0], [[1, 2], [2, 1]], 1.0, [0, 0], np.eye(2))


def test_model_rejects_prior_on_diffuse_state():
    with pytest.raises(ContractError, match="diffuse"):
        ssm.GaussianStateSpace([[1.0]], [1.0], [[1.0]], 1.0, [0.0], [[1.0]], [True])


def test_model_rejects_negative_obs_var():
    with pytest.raises(ContractError):
        ssm.GaussianStateSpace([[1.0]], [1.0], [[1.0]], -1.0, [0.0], [[1.0]])


def test_model_rejects_dimension_mismatch():
    with pytest.raises(ContractError, match="dimensions"):
        ssm.GaussianStateSpace(np.eye(2), [1.0], np.eye(2), 1.0, [0, 0], np.eye(2))


# -- filter -------------------------------------------------------------------

def test_pure_noise_loglik():
    y = ssm.ObservationSeries([0.0, 0.0, 0.0])
    assert ssm.loglik(pure_noise(), y) == pytest.approx(-1.5 * LOG2PI, abs=1e-12)
    assert ssm.loglik(pure_noise(), y) == pytest.approx(-2.7568, abs=1e-4)


def test_missing_step_skips_update():
    rng = np.random.default_rng(3)
    model = random_model(rng, 2)
    y = np.array([0.3, np.nan, -0.2, 1.0])
    f = ssm.filter(model, ssm.ObservationSeries(y))
    assert np.isnan(f.innovation[1])
    assert f.loglik_contrib[1] == 0.0
    T = model.transition
    np.testing.assert_allclose(f.pred_mean[2], T @ T @ f.filt_mean[0], atol=1e-14)


def test_all_missing_propagates_prior():
    rng = np.random.default_rng(4)
    model = random_model(rng, 2)
    f = ssm.filter(model, ssm.ObservationSeries([np.nan] * 5))
    mean, cov = model.init_mean, model.init_cov
    for t in range(5):
        np.testing.assert_allclose(f.pred_mean[t], mean, atol=1e-12)
        np.testing.assert_allclose(f.pred_cov[t], cov, atol=1e-12)
        mean = model.transition @ mean
        cov = model.transition @ cov @ model.transition.T + model.state_cov
    assert f.loglik == 0.0


def test_local_level_first_steps():
    # the first observation pins the diffuse level exactly
    q, h = 0.3, 0.7
    f = ssm.filter(local_level(q, h), ssm.ObservationSeries([2.0, 1.0, 0.5]))
    assert f.n_diffuse == 1
    assert f.pred_mean[1, 0] == pytest.approx(2.0)
    assert f.pred_cov[1, 0, 0] == pytest.approx(q + h)
    assert f.loglik_contrib[0] == 0.0
    F = q + h
    assert f.loglik_contrib[1] == pytest.approx(-0.5 * (LOG2PI + math.log(F + h) + 1.0 / (F + h)))


@pytest.mark.parametrize("n_diffuse", [0, 1, 2])
def test_filter_matches_dense_conditioning(n_diffuse):
    rng = np.random.default_rng(10 + n_diffuse)
    worst = 0.0
    for _ in range(20):
        m = int(rng.integers(max(1, n_diffuse), 4))
        n = int(rng.integers(6, 13))
        model = random_model(rng, m, n_diffuse)
        y = rng.normal(size=n)
        observed = rng.random(n) > 0.2
        observed[:2 * m] = True
        f = ssm.filter(model, masked(y, observed))
        ident = diffuse_identifying_steps(model, observed, n)
        start = ident[-1] + 1 if ident else 0
        for t in range(start, n):
            upto = observed.copy()
            upto[t + 1:] = False
            mean, cov = condition(model, y, upto)
            worst = max(worst, np.abs(f.filt_mean[t] - mean[t]).max(),
                        np.abs(f.filt_cov[t] - cov[t]).max())
    assert worst < 1e-8


@pytest.mark.parametrize("n_diffuse", [0, 1, 2])
def test_smoother_and_loglik_match_dense_oracle(n_diffuse):
    rng = np.random.default_rng(20 + n_diffuse)
    for _ in range(20):
        m = int(rng.integers(max(1, n_diffuse), 4))
        n = int(rng.integers(6, 13))
        model = random_model(rng, m, n_diffuse)
        y = rng.normal(size=n)
        observed = rng.random(n) > 0.2
        observed[:2 * m] = True
        obs = masked(y, observed)
        f = ssm.filter(model, obs)
        sm = ssm.smooth(model, f)
        mean, cov = condition(model, y, observed)
        np.testing.assert_allclose(sm.mean, mean, atol=1e-8, rtol=0)
        np.testing.assert_allclose(sm.cov, cov, atol=1e-8, rtol=0)
        assert ssm.loglik(model, obs) == pytest.approx(reference_loglik(model, y, observed),
                                                       abs=1e-8)


def test_loglik_equals_filter_total():
    rng = np.random.default_rng(5)
    model = random_model(rng, 3, 1)
    obs = ssm.ObservationSeries(rng.normal(size=30))
    assert ssm.loglik(model, obs) == pytest.approx(ssm.filter(model, obs).loglik, abs=1e-12)


def test_appending_adds_predictive_density():
    rng = np.random.default_rng(6)
    model = random_model(rng, 2)
    y = rng.normal(size=11)
    f = ssm.filter(model, ssm.ObservationSeries(y))
    Z = model.obs_row
    mu = Z @ f.pred_mean[-1]
    var = Z @ f.pred_cov[-1] @ Z + model.obs_var
    step = -0.5 * (LOG2PI + math.log(var) + (y[-1] - mu) ** 2 / var)
    short = ssm.loglik(model, ssm.ObservationSeries(y[:-1]))
    assert ssm.loglik(model, ssm.ObservationSeries(y)) - short == pytest.approx(step, abs=1e-12)


def test_loglik_is_bitwise_deterministic():
    rng = np.random.default_rng(7)
    model = random_model(rng, 3, 1)
    obs = ssm.ObservationSeries(rng.normal(size=50))
    assert ssm.loglik(model, obs) == ssm.loglik(model, obs)


def test_negative_innovation_variance_is_reported():
    # drive the kernel directly: a negative observation variance cannot pass validation
    y = np.zeros(3)
    missing = np.zeros(3, dtype=bool)
    one = np.ones(1)
    eye = np.eye(1)
    out = [np.empty((3, 1)), np.empty((3, 1, 1)), np.empty((3, 1, 1)), np.empty((3, 1)),
           np.empty((3, 1, 1)), np.empty(3), np.empty(3), np.empty(3),
           np.empty(3, dtype=np.int64), np.empty(3)]
    status, _ = _kernels.filter_kernel(
        y, missing, np.array([0, 1]), np.array([0]), one, one, eye * 0.0, -5.0,
        np.zeros(1), eye, eye * 0.0, True, *out)
    assert status == 0
    with pytest.raises(DegeneracyError) as info:
        ssm._raise_degenerate(status)
    assert info.value.step == 0


# -- smoother -----------------------------------------------------------------

def test_constant_level_smooths_to_sample_mean():
    y = np.array([1.0, 4.0, np.nan, 2.0, 7.0, 3.0])
    model = local_level(0.0, 2.0)
    sm = ssm.smooth(model, ssm.filter(model, ssm.ObservationSeries(y)))
    np.testing.assert_allclose(sm.mean[:, 0], np.nanmean(y), atol=1e-10)


def test_smoothed_end_equals_filtered_end():
    rng = np.random.default_rng(8)
    model = random_model(rng, 3, 1)
    f = ssm.filter(model, ssm.ObservationSeries(rng.normal(size=20)))
    sm = ssm.smooth(model, f)
    assert np.array_equal(sm.mean[-1], f.filt_mean[-1])
    assert np.array_equal(sm.cov[-1], f.filt_cov[-1])


def test_smooth_rejects_foreign_filter_output():
    rng = np.random.default_rng(9)
    f = ssm.filter(random_model(rng, 2), ssm.ObservationSeries(rng.normal(size=5)))
    with pytest.raises(ContractError):
        ssm.smooth(random_model(rng, 3), f)


@given(seed=st.integers(0, 10_000), m=st.integers(1, 3), n=st.integers(5, 25),
       n_diffuse=st.integers(0, 1))
def test_smoothed_variance_never_exceeds_filtered(seed, m, n, n_diffuse):
    rng = np.random.default_rng(seed)
    model = random_model(rng, m, n_diffuse)
    y = rng.normal(size=n)
    y[rng.random(n) < 0.2] = np.nan
    y[:m + 1] = rng.normal(size=m + 1)
    f = ssm.filter(model, ssm.ObservationSeries(y))
    sm = ssm.smooth(model, f)
    start = f.n_diffuse
    filt_var = np.diagonal(f.filt_cov, axis1=1, axis2=2)[start:]
    assert np.all(sm.var[start:] <= filt_var + 1e-10)
    assert np.all(np.linalg.eigvalsh(sm.cov) >= -1e-9)


@given(seed=st.integers(0, 10_000), c=st.floats(0.01, 100.0), n_diffuse=st.integers(0, 1))
def test_scale_equivariance(seed, c, n_diffuse):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 2, n_diffuse)
    n = 15
    y = rng.normal(size=n)
    y[5] = np.nan
    scaled = ssm.GaussianStateSpace(model.transition, model.obs_row, model.state_cov * c * c,
                                    model.obs_var * c * c, model.init_mean * c,
                                    model.init_cov * c * c, model.diffuse_mask)
    f = ssm.filter(model, ssm.ObservationSeries(y))
    g = ssm.filter(scaled, ssm.ObservationSeries(y * c))
    tau_eff = int(np.sum((f.step_kind != _kernels.DIFFUSE_INFORMATIVE) & ~f.missing_mask))
    assert g.loglik == pytest.approx(f.loglik - tau_eff * math.log(c), abs=1e-8 * (1 + n))
    sf = ssm.smooth(model, f).mean
    sg = ssm.smooth(scaled, g).mean
    np.testing.assert_allclose(sg, c * sf, rtol=1e-7, atol=1e-9 * c)


# -- simulation ---------------------------------------------------------------

def test_simulate_is_reproducible():
    rng = np.random.default_rng(11)
    model = random_model(rng, 2)
    a = ssm.simulate(model, 30, seed=5)
    b = ssm.simulate(model, 30, seed=5)
    assert np.array_equal(a[0].values, b[0].values)
    assert np.array_equal(a[1], b[1])


def test_simulate_deterministic_trajectory():
    T = np.array([[0.5, 1.0], [0.0, 0.9]])
    model = ssm.GaussianStateSpace(T, [1.0, 1.0], np.zeros((2, 2)), 0.0, [1.0, 2.0],
                                   np.zeros((2, 2)))
    obs, states = ssm.simulate(model, 6, seed=0)
    x = np.array([1.0, 2.0])
    for t in range(6):
        np.testing.assert_allclose(states[t], x, atol=1e-14)
        assert obs.values[t] == pytest.approx(x.sum(), abs=1e-14)
        x = T @ x


def test_simulate_needs_initial_state_for_diffuse():
    with pytest.raises(ContractError):
        ssm.simulate(local_level(1.0, 1.0), 10, seed=0)


def test_local_level_difference_variance():
    q, h = 0.5, 1.0
    obs, _ = ssm.simulate(local_level(q, h), 10_000, seed=2, initial_state=[0.0])
    var = np.var(np.diff(obs.values))
    assert var == pytest.approx(q + 2 * h, rel=0.05)


# -- backends -----------------------------------------------------------------

@pytest.mark.skipif(not _accel.USE_NUMBA, reason="numba backend not active")
def test_numba_and_python_kernels_agree():
    rng = np.random.default_rng(12)
    model = random_model(rng, 3, 1)
    y = rng.normal(size=40)
    y[[4, 17]] = np.nan
    obs = ssm.ObservationSeries(y)
    compiled = ssm.filter(model, obs)
    yy, missing, _ = ssm._prepare(model, obs)
    n, m = y.size, model.m
    bufs = [np.empty((n, m)), np.empty((n, m, m)), np.empty((n, m, m)), np.empty((n, m)),
            np.empty((n, m, m)), np.empty(n), np.empty(n), np.empty(n),
            np.empty(n, dtype=np.int64), np.empty(n)]
    _kernels.filter_kernel.py_func(
        yy, missing, *model._csr(), model.obs_row, model.state_cov, model.obs_var,
        model.init_mean, model.init_cov, model.diffuse_cov(), True, *bufs)
    np.testing.assert_allclose(bufs[3], compiled.filt_mean, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(bufs[9].sum(), compiled.loglik, rtol=1e-12)


def _run_backend(backend, code):
    env = dict(os.environ, COMMONTRENDS_BACKEND=backend)
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)


def test_numpy_backend_selected_by_env():
    code = ("import numpy as np; from commontrends import ssm, BACKEND;"
            "m = ssm.GaussianStateSpace([[1.0]], [1.0], [[0.5]], 1.0, [0.0], [[0.0]], [True]);"
            "print(BACKEND, repr(ssm.loglik(m, ssm.ObservationSeries(np.sin(np.arange(50.0))))))")
    res = _run_backend("numpy", code)
    assert res.returncode == 0, res.stderr
    backend, value = res.stdout.split()
    assert backend == "numpy"
    model = local_level(0.5, 1.0)
    expected = ssm.loglik(model, ssm.ObservationSeries(np.sin(np.arange(50.0))))
    assert float(value) == pytest.approx(expected, abs=1e-10)


def test_unknown_backend_is_rejected():
    res = _run_backend("fortran", "import commontrends")
    assert res.returncode != 0
    assert "COMMONTRENDS_BACKEND" in res.stderr
