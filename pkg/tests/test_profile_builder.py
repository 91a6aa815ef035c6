import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumplab import data_model, pipeline as pl, profile_builder as pb
from jumplab import hawkes_sim as hs
from jumplab.cluster_engine import ENDO, EXO, ClusterConfig, JumpCluster
from jumplab.data_model import SESSION_MINUTES, LobSnapshots
from jumplab.errors import ConfigError
from jumplab.jump_detector import DetectorConfig, JumpScoreSeries

DATES = np.array(["2024-01-02", "2024-01-03"], dtype="datetime64[D]")


def scores_of(J, dates=DATES):
    J = np.asarray(J, dtype=float)
    return JumpScoreSeries("X", dates, J, np.ones_like(J), np.ones(SESSION_MINUTES), J)


def obs_of(values, dates=DATES[:1]):
    v = np.asarray(values, dtype=float)
    return pb.ObservableSeries("X", dates, v, v, v, v, v, v)


# --- EMA and sparsity -----------------------------------------------------------------

def test_ema_fixed_point():
    assert np.allclose(pb.ema(np.ones(50), 0.12, init=1.0), 1.0)


def test_ema_recursion_example():
    assert np.allclose(pb.ema([1.0, 1.0], 0.12), [0.12, 0.2256], atol=1e-15)


def test_ema_carry_and_reset():
    e = pb.ema([1.0, 5.0, np.nan, 1.0], 0.5, update=[1, 0, 1, 1], reset=[0, 0, 0, 1])
    assert np.allclose(e, [0.5, 0.5, 0.5, 0.5])


def test_observables_skip_jumps_and_restart_each_session():
    J = np.ones((2, SESSION_MINUTES))
    J[0, 40] = 9.0
    mask = np.zeros_like(J, dtype=bool)
    mask[0, 40] = True
    obs = pb.build_observables(scores_of(J), mask, burn_in=30)
    assert np.all(np.isnan(obs.Sigma[:, :30]))
    assert obs.Sigma[0, 40] == obs.Sigma[0, 39]
    assert obs.B[0, 40] > obs.B[0, 39]  # B uses every minute
    assert np.array_equal(obs.Sigma[0, 30:40], obs.Sigma[1, 30:40])
    assert obs.abs_J[0, 40] == 9.0


def test_sign_zero_contributes_nothing():
    J = np.zeros((1, SESSION_MINUTES))
    obs = pb.build_observables(scores_of(J, DATES[:1]), np.zeros_like(J, bool), burn_in=0)
    assert np.all(obs.B == 0)


def test_kappa_validation():
    J = np.ones((1, SESSION_MINUTES))
    with pytest.raises(ConfigError):
        pb.build_observables(scores_of(J, DATES[:1]), np.zeros_like(J, bool), kappa=0.0)


def test_sparsity_example():
    # prices 10.02 / 9.99 and 10.03 / 10.00, tick 0.01, unit volumes
    ts = data_model.session_timestamps(DATES[:1]).ravel()
    one = np.ones(ts.size)
    book = LobSnapshots("X", ts, 1000 * one, one, 999 * one, one, 1002 * one, one, 1003 * one, one, 0.01)
    s = pb.raw_sparsity(data_model.to_grid(book))
    assert np.allclose(s, 3.0)


def test_sparsity_missing_level_or_zero_volume():
    ts = data_model.session_timestamps(DATES[:1]).ravel()
    one = np.ones(ts.size)
    bid2 = 999 * one
    bid2[5] = np.nan
    va = one.copy()
    va[7] = 0.0
    book = LobSnapshots("X", ts, 1000 * one, one, bid2, one, 1002 * one, va, 1003 * one, one, 0.01)
    s = pb.raw_sparsity(data_model.to_grid(book))
    assert np.isnan(s[0, 5]) and np.isnan(s[0, 7]) and np.isfinite(s[0, 6])


def test_sparsity_zscore_centred(rng):
    s = rng.lognormal(1.0, 0.3, (20, SESSION_MINUTES))
    m = pb.sparsity_zscore(s)
    assert m.f.shape == (SESSION_MINUTES,)
    assert abs(np.nanmean(m.S)) < 0.05
    s[3, 10] = np.nan
    assert np.isnan(pb.sparsity_zscore(s).S[3, 10])


# --- windows --------------------------------------------------------------------------

def test_window_at_noon_maps_offsets():
    vals = np.arange(SESSION_MINUTES, dtype=float)[None, :]
    t = np.datetime64("2024-01-02T12:00")
    w = pb.extract_window(obs_of(vals), t)["abs_J"]
    slot = 150  # 12:00 is minute 150 of the session
    assert w[80] == slot
    assert w[0] == slot - 80 and w[-1] == slot + 79  # 10:40 and 13:19


def test_window_near_open_is_missing_before_session():
    vals = np.arange(SESSION_MINUTES, dtype=float)[None, :]
    w = pb.extract_window(obs_of(vals), np.datetime64("2024-01-02T10:00"))["abs_J"]
    assert np.all(np.isnan(w[:50])) and w[50] == 0.0 and np.all(np.isfinite(w[50:]))


def test_trend_window_absolute():
    up = np.linspace(0.1, 1.0, SESSION_MINUTES)[None, :]
    w = pb.extract_window(obs_of(up), np.datetime64("2024-01-02T12:00"))
    np.testing.assert_array_equal(w["T"], w["abs_J"])
    w = pb.extract_window(obs_of(-up), np.datetime64("2024-01-02T12:00"))
    np.testing.assert_array_equal(w["T"], -w["abs_J"])


def test_panel_skips_discarded():
    vals = np.ones((1, SESSION_MINUTES))
    t = np.array([np.datetime64("2024-01-02T12:00")])
    kept = JumpCluster("X", t, np.array([5.0]), label=EXO, cluster_id=3)
    gone = JumpCluster("X", t, np.array([5.0]), label="DISCARDED", reason="market_wide", cluster_id=4)
    P = pb.build_panel({"X": obs_of(vals)}, [kept, gone])
    assert len(P) == 1 and P.cluster_ids.tolist() == [3]
    assert P.data["abs_J"].shape == (1, 160)


# --- aggregate profiles -----------------------------------------------------------------

def test_aggregate_constant_windows():
    agg = pb.aggregate(np.full((10, 160), 2.0), n_boot=200, rng=np.random.default_rng(0))
    assert np.all(agg.lo == 2.0) and np.all(agg.hi == 2.0)
    assert not agg.significant.any()


def test_aggregate_shifted_offset_significant(rng):
    x = rng.standard_normal((1000, 160))
    x[:, 100] += 1.0
    agg = pb.aggregate(x, n_boot=200, rng=rng)
    assert agg.significant[100]
    assert agg.significant.sum() <= 3


def test_aggregate_untested_and_errors():
    x = np.full((3, 40), np.nan)
    x[:, :20] = 1.0 + np.arange(3)[:, None]
    x[0, 30] = 5.0
    agg = pb.aggregate(x, n_boot=50, rng=np.random.default_rng(0))
    assert not agg.tested[30] and np.isnan(agg.p[30]) and not agg.significant[30]
    with pytest.raises(ValueError):
        pb.aggregate(np.ones((1, 10)))


def test_bootstrap_band_coverage():
    rng = np.random.default_rng(7)
    hits = total = 0
    for _ in range(10):
        x = rng.standard_normal((200, 160))
        lo, hi = pb.bootstrap_mean_bands(x, 1000, 0.01, rng)
        hits += np.sum((lo <= 0) & (0 <= hi))
        total += lo.size
    assert abs(hits / total - 0.99) <= 0.01


def test_fdr_null_panel():
    rng = np.random.default_rng(8)
    flagged = total = 0
    for _ in range(10):
        agg = pb.aggregate(rng.standard_normal((100, 160)), n_boot=20, rng=rng)
        flagged += agg.significant.sum()
        total += agg.significant.size
    assert flagged / total <= 0.01 + 3 * np.sqrt(0.01 * 0.99 / total)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**31))
def test_ema_linearity(c, seed):
    rng = np.random.default_rng(seed)
    J = rng.standard_normal((2, SESSION_MINUTES))
    mask = np.abs(J) > 2
    a = pb.build_observables(scores_of(J), mask)
    b = pb.build_observables(scores_of(c * J), mask)
    np.testing.assert_allclose(b.Sigma, c * a.Sigma, rtol=1e-12)
    np.testing.assert_allclose(b.T, c * a.T, rtol=1e-12, atol=1e-14 * c)
    np.testing.assert_array_equal(b.B, a.B)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, SESSION_MINUTES - 1), st.sampled_from([40, 120, 160, 161]))
def test_first_jump_at_offset_zero(slot, W):
    vals = np.arange(SESSION_MINUTES, dtype=float)[None, :]
    t = np.datetime64("2024-01-02T09:30") + np.timedelta64(slot, "m")
    w = pb.extract_window(obs_of(vals), t, W)["abs_J"]
    offs = pb.window_offsets(W)
    assert w.size == W and w[offs == 0][0] == slot


def test_endogenous_panel_pre_jump_elevation():
    hp = hs.HawkesParams(lambda0=0.05, tau0=1.0, seed=11)
    pc = hs.PanelConfig(n_stocks=60, n_sessions=40, shocks_per_session=0.2, nu=0.5,
                        shock_size=100, vol_exponent=0.7)
    panel = hs.simulate_panel(hp, pc)
    st_ = pl.ingest(panel.books)
    det = pl.detect(st_, DetectorConfig())
    news = data_model.filter_news(panel.news)
    cl = pl.cluster({s: (d.times, d.J) for s, d in det.items()},
                    {s: st_[s].mids.dates for s in st_}, news, ClusterConfig(),
                    np.random.default_rng(0))
    P = pb.build_panel(pl.observables(st_, det), cl)
    endo = P.select(ENDO)
    agg = pb.aggregate(endo.data["abs_J"], P.offsets, n_boot=200, rng=np.random.default_rng(1))
    assert agg.significant[P.offsets == -1][0]
    # elevation must reach back tens of minutes, i.e. at least to offset -10
    assert agg.significant[(P.offsets >= -60) & (P.offsets <= -10)].any()
