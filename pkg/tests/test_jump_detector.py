import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumplab import data_model, hawkes_sim
from jumplab.data_model import SESSION_MINUTES, ReturnSeries
from jumplab.errors import ConfigError
from jumplab.jump_detector import (DetectorConfig, JumpScoreSeries, bipower_volatility,
                                   compute_scores, detect_jumps, gumbel_threshold, jump_mask,
                                   periodicity_factors)


def _returns(r, start="2024-01-02"):
    r = np.atleast_2d(np.asarray(r, dtype=float))
    dates = hawkes_sim.business_dates(start, r.shape[0])
    return ReturnSeries("X", dates, r, np.zeros(r.shape, dtype=bool))


def _scores(J, start="2024-01-02"):
    J = np.atleast_2d(np.asarray(J, dtype=float))
    dates = hawkes_sim.business_dates(start, J.shape[0])
    one = np.ones(J.shape)
    return JumpScoreSeries("X", dates, J, one, np.ones(SESSION_MINUTES), J)


def _oracle_gumbel(K, alpha):
    # written out independently of the implementation
    a = math.sqrt(2 * math.log(K))
    c = a - (math.log(math.pi) + math.log(math.log(K))) / (2 * a)
    return c - (1 / a) * math.log(-math.log(1 - alpha))


# --- bipower volatility ------------------------------------------------------------

def test_constant_returns_bipower():
    r = np.full((2, SESSION_MINUTES), 0.003)
    r[:, 0] = np.nan
    sigma = bipower_volatility(_returns(r), K=20)
    ok = np.isfinite(sigma)
    assert ok.sum() > 0
    np.testing.assert_allclose(sigma[ok], 0.003 * math.sqrt(math.pi / 2), rtol=1e-12)
    # the first 20 valid pairs end at minute 21 of day 1
    assert np.all(np.isnan(sigma[0, :21])) and np.isfinite(sigma[0, 21])


def test_bipower_worked_example():
    r = np.array([0.01, -0.02, 0.01])
    sigma = bipower_volatility(r[None, :], K=2)
    assert sigma[0, 2] ** 2 == pytest.approx(math.pi * 1e-4, rel=1e-12)
    assert np.isnan(sigma[0, 1])


def test_bipower_skips_missing_pairs_and_extends_window():
    r = np.array([0.01, 0.02, 0.03, np.nan, 0.04, 0.05])
    sigma = bipower_volatility(r[None, :], K=2)
    # pairs ending at 5: (4,5) valid, (3,4) touches MISSING -> reach back to (1,2)
    expected = math.pi / 4 * (0.04 * 0.05 + 0.02 * 0.03)
    assert sigma[0, 5] ** 2 == pytest.approx(expected, rel=1e-12)


def test_bipower_lookback_cap():
    r = np.array([0.01, 0.02, np.nan, np.nan, np.nan, 0.04, 0.05])
    # K=2 needs the pair (0,1), which lies beyond a 3-pair lookback
    assert np.isnan(bipower_volatility(r[None, :], K=2, max_lookback=3)[0, 6])
    assert np.isfinite(bipower_volatility(r[None, :], K=2, max_lookback=6)[0, 6])


def test_bipower_never_bridges_overnight():
    r = np.full((2, SESSION_MINUTES), 0.001)
    r[1, 0] = np.nan  # opening return never exists
    r[0, -1] = 0.5  # a huge last return of day 1
    sigma = bipower_volatility(_returns(r), K=2)
    # at day 2 minute 2: pair (1, 2) of day 2, then the last pair of day 1;
    # no pair joins day 1's close to day 2's open
    assert sigma[1, 2] ** 2 == pytest.approx(math.pi / 4 * (1e-6 + 0.5 * 0.001), rel=1e-12)


# --- periodicity ------------------------------------------------------------------

def test_periodicity_iid_close_to_one():
    z = np.random.default_rng(7).standard_normal((250, SESSION_MINUTES))
    f = periodicity_factors(z).f
    dev = np.abs(f - 1.0)
    # plain per-slot RMS on the same draws, normalized the same way
    w = np.sqrt((z**2).mean(axis=0))
    w /= np.sqrt(np.mean(w**2))
    assert dev.mean() < 0.05
    assert dev.max() < 1.5 * np.abs(w - 1.0).max()
    assert dev.max() < 0.25


def test_periodicity_doubled_slot():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((250, SESSION_MINUTES))
    z[:, 200] *= 2.0
    f = periodicity_factors(z).f
    other = np.median(np.delete(f, 200))
    assert f[200] / other == pytest.approx(2.0, rel=0.10)


def test_periodicity_identical_magnitudes():
    z = np.where(np.arange(SESSION_MINUTES) % 2, 1.3, -1.3) * np.ones((40, 1))
    f = periodicity_factors(z).f
    np.testing.assert_allclose(f, 1.0, atol=1e-12)


def test_periodicity_fallback_slot():
    z = np.random.default_rng(0).standard_normal((50, SESSION_MINUTES))
    z[:, 10] = np.nan
    m = periodicity_factors(z)
    assert m.f[10] == 1.0 and 10 in m.fallback_slots


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 2.0))
def test_periodicity_mean_square_is_one(seed, amp):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((40, SESSION_MINUTES)) * (1 + amp * np.linspace(-1, 1, SESSION_MINUTES) ** 2)
    m = periodicity_factors(z)
    ok = np.setdiff1d(np.arange(SESSION_MINUTES), m.fallback_slots)
    assert np.mean(m.f[ok] ** 2) == pytest.approx(1.0, abs=1e-9)
    assert np.all(m.f > 0)


# --- threshold ---------------------------------------------------------------------

def test_gumbel_390():
    assert gumbel_threshold(390, 0.01) == pytest.approx(4.36, abs=0.01)


def test_gumbel_matches_oracle():
    for K in (2, 10, 100, 390, 10_000):
        for a in (1e-4, 0.01, 0.5, 0.99):
            assert gumbel_threshold(K, a) == pytest.approx(_oracle_gumbel(K, a), rel=1e-13)


def test_gumbel_100_frozen():
    assert gumbel_threshold(100, 0.01) == pytest.approx(4.1104, abs=1e-4)


def test_gumbel_alpha_to_one_diverges():
    vals = [gumbel_threshold(390, 1 - 10.0**-k) for k in (1, 3, 6, 12)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < gumbel_threshold(390, 0.5)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 2.0])
def test_gumbel_domain(alpha):
    with pytest.raises(ConfigError):
        gumbel_threshold(390, alpha)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 100_000), st.floats(1e-6, 0.999), st.floats(1e-6, 0.999))
def test_gumbel_decreasing_in_alpha(K, a1, a2):
    lo, hi = sorted((a1, a2))
    if hi - lo > 1e-9:
        assert gumbel_threshold(K, hi) < gumbel_threshold(K, lo)


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 100_000), st.floats(0.01, 0.999))
def test_gumbel_increasing_in_K(K, alpha):
    # holds for alpha >= 0.01 once K >= 10; smaller alpha needs larger K
    assert gumbel_threshold(K + 1, alpha) > gumbel_threshold(K, alpha)


def test_config_validation():
    with pytest.raises(ConfigError):
        DetectorConfig(K=1)
    with pytest.raises(ConfigError):
        DetectorConfig(edge_exclusion=-1)


# --- detection ---------------------------------------------------------------------

def test_detect_event_midday():
    J = np.zeros((1, SESSION_MINUTES))
    J[0, 90] = 5.0  # 11:00
    ev = detect_jumps(_scores(J))
    assert len(ev) == 1
    assert ev[0].timestamp == np.datetime64("2024-01-02T11:00")
    assert ev[0].score == 5.0 and ev[0].threshold == pytest.approx(4.3618, abs=1e-4)


def test_detect_edge_exclusion():
    J = np.zeros((1, SESSION_MINUTES))
    J[0, 5] = 6.0  # 09:35
    J[0, SESSION_MINUTES - 3] = -7.0
    assert detect_jumps(_scores(J)) == []
    ev = detect_jumps(_scores(J), DetectorConfig(edge_exclusion=0))
    assert [e.score for e in ev] == [6.0, -7.0]


def test_flag_rate_iid_normal():
    J = np.random.default_rng(11).standard_normal((2600, SESSION_MINUTES))  # ~1e6 minutes
    cfg = DetectorConfig(edge_exclusion=0)
    flags = jump_mask(_scores(J), cfg).sum()
    per_window = flags / (J.size / 390)
    assert 0.005 <= per_window <= 0.02


def test_missing_components_give_missing_score():
    rng = np.random.default_rng(1)
    r = rng.standard_normal((3, SESSION_MINUTES)) * 1e-3
    r[:, 0] = np.nan
    r[1, 100] = np.nan
    sc = compute_scores(_returns(r), DetectorConfig(K=30))
    assert np.isnan(sc.J[1, 100]) and np.isnan(sc.J[0, 5])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_scores_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((3, SESSION_MINUTES)) * 1e-3
    r[:, 0] = np.nan
    cfg = DetectorConfig(K=30)
    a = compute_scores(_returns(r), cfg).J
    b = compute_scores(_returns(r * c), cfg).J
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_seasonality_autocorrelation_removed():
    rng = np.random.default_rng(5)
    n = 60
    season = hawkes_sim.u_shape(3.0)
    r = rng.standard_normal((n, SESSION_MINUTES)) * season[None, :] * 1e-3
    r[:, 0] = np.nan
    sc = compute_scores(_returns(r))

    def daily_acf(x):
        x = np.abs(x[5:]).ravel()  # skip the warm-up sessions
        ok = np.isfinite(x)
        x = np.where(ok, x - np.nanmean(x), 0.0)
        lag = SESSION_MINUTES
        return np.sum(x[lag:] * x[:-lag]) / np.sum(x * x)

    assert daily_acf(sc.J) < daily_acf(r)
    assert daily_acf(sc.J) < 0.05 < daily_acf(r)
