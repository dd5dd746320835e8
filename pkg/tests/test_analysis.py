import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from commontrends import analysis as an, synthetic
from commontrends.errors import ContractError, DataError
from commontrends.ssm import ObservationSeries


def v_shape(n=480, brk=240):
    t = np.arange(n, dtype=float)
    return -np.minimum(t, brk) + np.maximum(t - brk, 0.0)


def smooth_walk(seed, n=400):
    rng = np.random.default_rng(seed)
    w = np.cumsum(rng.normal(size=n))
    return np.convolve(w, np.ones(25) / 25, mode="same")[20:-20]


# -- local slopes -------------------------------------------------------------

def test_local_slopes_of_a_line():
    s = an.local_slopes(3.0 * np.arange(50) + 1.0, 12)
    ok = ~np.isnan(s)
    assert ok.sum() == 50 - 11
    np.testing.assert_allclose(s[ok], 3.0, atol=1e-12)
    assert np.isnan(s[:6]).all() and np.isnan(s[-5:]).all()


def test_local_slopes_match_least_squares():
    x = np.random.default_rng(0).normal(size=40)
    s = an.local_slopes(x, 7)
    for t in range(3, 37):
        seg = x[t - 3:t + 4]
        assert s[t] == pytest.approx(np.polyfit(np.arange(7), seg, 1)[0], abs=1e-12)


# -- change points ------------------------------------------------------------

def test_v_shape_gives_one_sign_change():
    cps = an.detect_change_points(v_shape(), min_persist=24)
    assert len(cps) == 1
    cp = cps[0]
    assert cp.kind == an.SIGN_CHANGE and abs(cp.index - 240) <= 2
    # windows next to the break straddle it, so the means are slightly shrunk
    assert -1.0 <= cp.slope_before < -0.75 and 0.75 < cp.slope_after <= 1.0
    assert cp.persistence == 480 - cp.index


def test_peak_is_reported_at_the_maximum():
    cps = an.detect_change_points(-v_shape(360, 200))
    assert [c.index for c in cps] == [200]


@pytest.mark.parametrize("x", [0.3 * np.arange(300.0), -2.0 * np.arange(300.0) + 7,
                               np.full(300, 4.0)])
def test_monotone_or_flat_trends_have_no_points(x):
    assert an.detect_change_points(x) == []


def test_inflection_is_detected():
    t = np.arange(400, dtype=float)
    x = 0.1 * np.minimum(t, 200) + 1.0 * np.maximum(t - 200, 0)
    cps = an.detect_change_points(x)
    assert len(cps) == 1
    # the slope ratio peaks within half a slope window of the kink
    assert cps[0].kind == an.INFLECTION and abs(cps[0].index - 200) <= 6


def test_weak_inflection_is_ignored():
    t = np.arange(400, dtype=float)
    x = 0.5 * np.minimum(t, 200) + 1.0 * np.maximum(t - 200, 0) + 0.5 * np.maximum(t - 200, 0)
    assert an.detect_change_points(x, inflection_factor=3) == []


def test_calendar_and_persistence_for_several_points():
    t = np.arange(600, dtype=float)
    x = np.where(t < 200, -t, np.where(t < 400, t - 400, 400 - t))
    obs = ObservationSeries(x, time_origin=(1958, 1))
    cps = an.detect_change_points(obs)
    assert [c.kind for c in cps] == [an.SIGN_CHANGE, an.SIGN_CHANGE]
    assert [c.index for c in cps] == [200, 400]
    assert (cps[0].year, cps[0].month) == (1974, 9)
    assert [c.persistence for c in cps] == [200, 200]
    assert all(c.persistence >= 24 for c in cps)


def test_change_point_errors():
    with pytest.raises(DataError, match="shorter"):
        an.detect_change_points(np.arange(59.0), min_persist=24, slope_window=12)
    x = v_shape()
    x[10] = np.nan
    with pytest.raises(DataError, match="missing"):
        an.detect_change_points(x)
    with pytest.raises(ContractError):
        an.detect_change_points(v_shape(), inflection_factor=1.0)


@given(seed=st.integers(0, 10_000), scale=st.sampled_from([-4.0, -0.5, 0.25, 2.0, 8.0]),
       shift=st.sampled_from([-3.0, 0.0, 1.5, 10.0]))
def test_change_points_are_affine_invariant(seed, scale, shift):
    x = smooth_walk(seed)
    a = an.detect_change_points(x)
    b = an.detect_change_points(scale * x + shift)
    assert [(c.index, c.kind) for c in a] == [(c.index, c.kind) for c in b]
    for p, q in zip(a, b):
        assert q.slope_before == pytest.approx(scale * p.slope_before, rel=1e-6, abs=1e-9)


@given(seed=st.integers(0, 10_000))
def test_change_point_indices_increase(seed):
    cps = an.detect_change_points(smooth_walk(seed))
    idx = [c.index for c in cps]
    assert idx == sorted(set(idx))


def test_planted_reversal_is_found_in_a_noiseless_trend():
    cps = an.detect_change_points(synthetic.reversal_trend())
    assert [c.index for c in cps] == [336]


# -- scalings -----------------------------------------------------------------

@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.floats(-100, 100))
def test_relative_scale(xs, c):
    x = np.array(xs)
    r = an.relative_scale(x)
    assert r.min() == 0.0
    np.testing.assert_allclose(an.relative_scale(x + c), r, atol=1e-9)
    np.testing.assert_array_equal(an.relative_scale(r), r)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50))
def test_standardize(xs):
    z = an.standardize(np.array(xs))
    assert abs(z.mean()) <= 1e-12 * max(1.0, np.abs(xs).max())
    np.testing.assert_allclose(an.standardize(z), z, atol=1e-12)


def test_scalings_of_constants_and_missing():
    assert np.all(an.relative_scale(np.full(5, 3.0)) == 0)
    assert np.all(an.standardize(np.full(5, 3.0)) == 0)
    obs = ObservationSeries([1.0, np.nan, 3.0], time_origin=(1990, 5))
    out = an.standardize(obs)
    assert isinstance(out, ObservationSeries) and out.time_origin == (1990, 5)
    assert out.values[0] == -1.0 and out.missing_mask.tolist() == [False, True, False]


# -- stratification -----------------------------------------------------------

def test_stratification_examples():
    a = np.random.default_rng(1).normal(size=30)
    assert np.all(an.stratification(a, a) == 0)
    np.testing.assert_allclose(an.stratification(a, a - 2), 2.0, atol=1e-12)
    u = np.linspace(0, 1, 30)
    b = np.cos(u)
    np.testing.assert_allclose(an.stratification(a + u, b + u), an.stratification(a, b), atol=1e-12)
    np.testing.assert_array_equal(an.stratification(b, a), -an.stratification(a, b))


def test_stratification_contracts():
    with pytest.raises(ContractError):
        an.stratification(np.zeros(3), np.zeros(4))
    with pytest.raises(ContractError):
        an.stratification(ObservationSeries(np.zeros(3), time_origin=(1958, 1)),
                          ObservationSeries(np.zeros(3), time_origin=(1958, 2)))
    out = an.stratification(ObservationSeries(np.ones(3), time_origin=(1958, 1)),
                            ObservationSeries(np.zeros(3), time_origin=(1958, 1)))
    assert out.time_origin == (1958, 1)


# -- report -------------------------------------------------------------------

def test_change_point_csv(tmp_path):
    cps = an.detect_change_points(ObservationSeries(v_shape(), time_origin=(1958, 1)))
    an.write_change_points(tmp_path / "cp.csv", [("20N_110E", 10.0, cps[0])])
    rows = list(csv.reader(open(tmp_path / "cp.csv")))
    assert rows[0] == list(an.CHANGE_POINT_HEADER)
    assert rows[1][:6] == ["20N_110E", "10.0", str(cps[0].index), "1978", "1", "sign-change"]
    assert float(rows[1][6]) == cps[0].slope_before
