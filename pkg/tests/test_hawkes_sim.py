import numpy as np
import pytest
from scipy import integrate, stats

from jumplab import hawkes_sim as hs
from jumplab.cluster_engine import DISCARDED, EXO
from jumplab.errors import ConfigError

from conftest import run_panel


def tree_sizes(n, count, rng, theta=0.3):
    p = hs.HawkesParams(theta=theta, n=n, lambda0=0.0, horizon=1e15)
    return np.array([1 + hs.cascade(np.zeros(1), p, rng).size for _ in range(count)])


# --- kernel and parameters ------------------------------------------------------------

@pytest.mark.parametrize("theta,tau0", [(0.3, 1.0), (0.5, 0.2), (0.8, 3.0)])
def test_kernel_normalisation(theta, tau0):
    n = 0.98
    f = lambda x: float(hs.kernel(x, n, theta, tau0))
    full = integrate.quad(f, 0, np.inf, limit=500)[0]
    assert full == pytest.approx(n, abs=1e-3)
    upto = sum(integrate.quad(f, a, b, limit=200)[0]
               for a, b in zip(np.r_[0, np.logspace(-3, 6, 10)][:-1] * tau0,
                               np.r_[0, np.logspace(-3, 6, 10)][1:] * tau0))
    # exact truncated mass; for theta = 0.3 the tail beyond 1e6 tau0 is ~1.6% of n
    assert upto == pytest.approx(n * (1 - (1 + 1e6) ** -theta), rel=1e-6)


def test_offspring_lags_follow_kernel(rng):
    lags = hs.offspring_lags(rng, 200_000, 0.3, 1.0)
    cdf = lambda x: 1 - (1 + x) ** -0.3
    assert stats.kstest(lags, cdf).pvalue > 0.001


def test_params_validation():
    for kw in (dict(theta=1.0), dict(n=1.0), dict(lambda0=-1), dict(tau0=0), dict(horizon=0)):
        with pytest.raises(ConfigError):
            hs.HawkesParams(**kw)
    assert hs.HawkesParams(lambda0=0.05, n=0.9).mean_rate == pytest.approx(0.5)


# --- simulation -----------------------------------------------------------------------

@pytest.mark.parametrize("method", ["branching", "thinning"])
def test_poisson_count_when_kernel_off(method):
    p = hs.HawkesParams(n=0.0, lambda0=0.5, horizon=20_000.0, seed=3)
    tr = hs.simulate(p, method)
    mu = p.lambda0 * p.horizon
    assert abs(tr.times.size - mu) < 4 * np.sqrt(mu)
    assert np.all(np.diff(tr.times) >= 0) and tr.times.min() >= 0 and tr.times.max() < p.horizon


def test_thinning_exactness_ks():
    passed = 0
    for seed in range(100):
        p = hs.HawkesParams(n=0.0, lambda0=0.05, horizon=20_000.0, seed=seed)
        dt = np.diff(hs.simulate(p, "thinning").times)
        passed += stats.kstest(dt, "expon", args=(0, 1 / p.lambda0)).pvalue >= 0.01
    assert passed >= 98


def test_mean_rate_identity():
    p = hs.HawkesParams(theta=0.3, n=0.9, lambda0=0.05, horizon=1e6, burn_in=1e8, seed=1)
    rate = hs.simulate(p).times.size / p.horizon
    assert rate == pytest.approx(0.5, rel=0.05)


def test_mean_rate_approaches_limit_with_burn_in():
    rates = [hs.simulate(hs.HawkesParams(n=0.9, horizon=1e6, burn_in=b, seed=1)).times.size / 1e6
             for b in (0.0, 1e5, 1e7)]
    assert rates[0] < rates[1] < rates[2] < 0.5 * 1.05


def test_thinning_agrees_with_branching():
    p = hs.HawkesParams(n=0.5, lambda0=0.5, horizon=2000.0)
    ss = np.random.SeedSequence(8).spawn(80)
    a = [hs.simulate(p, "branching", rng=np.random.default_rng(c)).times for c in ss[:40]]
    b = [hs.simulate(p, "thinning", rng=np.random.default_rng(c)).times for c in ss[40:]]
    ca, cb = np.array([x.size for x in a]), np.array([x.size for x in b])
    se = np.sqrt(ca.var(ddof=1) / ca.size + cb.var(ddof=1) / cb.size)
    assert abs(ca.mean() - cb.mean()) < 4 * se
    da = np.concatenate([np.diff(x) for x in a])
    db = np.concatenate([np.diff(x) for x in b])
    assert stats.ks_2samp(da, db).pvalue > 0.001


def test_simulate_reproducible_and_method_checked():
    p = hs.HawkesParams(horizon=5000.0, seed=4)
    assert np.array_equal(hs.simulate(p).times, hs.simulate(p).times)
    with pytest.raises(ConfigError):
        hs.simulate(p, "exact")
    with pytest.raises(ConfigError):
        hs.simulate(p, shocks=[(6000.0, 10.0)])


def test_bursty_intertimes():
    tr = hs.simulate(hs.HawkesParams(horizon=100_000.0, burn_in=1e5, seed=5))
    dt = np.diff(tr.times)
    assert dt.std() / dt.mean() > 1
    assert np.mean(dt < 0.1 * dt.mean()) > 1 - np.exp(-0.1)
    assert stats.kstest(dt, "expon", args=(0, dt.mean())).pvalue < 1e-6


def test_cluster_size_tail_grows_with_n():
    rng = np.random.default_rng(9)
    mx = [tree_sizes(n, 400, rng).max() for n in (0.3, 0.7, 0.95)]
    assert mx[0] < mx[1] < mx[2]


# --- shocks -----------------------------------------------------------------------------

def test_inject_shock_noop_and_bounds():
    p = hs.HawkesParams(horizon=1000.0, seed=1)
    tr = hs.simulate(p)
    assert hs.inject_exogenous_shock(tr, p, 10.0, 0.0) is tr
    with pytest.raises(ConfigError):
        hs.inject_exogenous_shock(tr, p, 1000.0, 5.0)
    out = hs.inject_exogenous_shock(tr, p, 500.0, 50.0, np.random.default_rng(2))
    assert out.times.size >= tr.times.size and out.shock_times.tolist() == [500.0]


def test_post_shock_slope(shock_trains):
    prof = hs.shock_response_profile(shock_trains)
    assert prof.n_windows == 500
    assert hs.profile_slopes(prof)[1] == pytest.approx(-0.7, abs=0.1)


def test_pre_shock_rate_flat(shock_trains):
    prof = hs.shock_response_profile(shock_trains)
    pre = (prof.offsets < 0) & (prof.offsets >= -60)
    slope = np.polyfit(np.log(-prof.offsets[pre]), np.log(prof.mean[pre]), 1)[0]
    assert abs(slope) < 0.05


def test_pre_shock_rate_at_stationary_level(shock_trains):
    p = hs.HawkesParams()
    prof = hs.shock_response_profile(shock_trains)
    assert prof.baseline == pytest.approx(p.mean_rate, rel=0.1)


def test_far_tail_steepens():
    p = hs.HawkesParams(theta=0.3, n=0.5, lambda0=0.0, horizon=2e4)
    ev = np.concatenate([hs.simulate(p, shocks=[(0.0, 2000.0)], rng=np.random.default_rng(c)).times
                         for c in np.random.SeedSequence(3).spawn(200)])
    edges = np.logspace(np.log10(2), np.log10(2e4), 40)
    h, _ = np.histogram(ev, edges)
    mid = np.sqrt(edges[1:] * edges[:-1])
    rate = h / np.diff(edges)

    def slope(lo, hi):
        s = (mid >= lo) & (mid <= hi) & (rate > 0)
        return np.polyfit(np.log(mid[s]), np.log(rate[s]), 1)[0]
    near, far = slope(2, 20), slope(2000, 2e4)
    assert far < near
    assert far == pytest.approx(-1.3, abs=0.1)


# --- endogenous bursts -------------------------------------------------------------------

def test_conditional_endogenous_slopes(endo_trains):
    prof = hs.conditional_endogenous_profiles(endo_trains)
    pre, post = hs.profile_slopes(prof)
    assert pre == pytest.approx(-0.4, abs=0.1) and post == pytest.approx(-0.4, abs=0.1)
    assert abs(pre - post) < 0.1


def test_conditional_profile_flat_without_kernel():
    p = hs.HawkesParams(n=0.0, lambda0=0.05, horizon=390_000.0)
    trains = [hs.simulate(p, rng=np.random.default_rng(c)) for c in np.random.SeedSequence(7).spawn(20)]
    prof = hs.conditional_endogenous_profiles(trains)
    off = prof.offsets != 0
    assert prof.n_windows > 100
    se = np.sqrt(p.lambda0 / prof.n_windows)
    assert np.all(np.abs(prof.mean[off] - p.lambda0) < 5 * se)
    assert prof.mean[~off][0] >= 2


def test_no_bursts_gives_empty_profile():
    tr = hs.EventTrain(np.zeros(0), 1000.0)
    prof = hs.conditional_endogenous_profiles([tr])
    assert prof.n_windows == 0 and np.all(np.isnan(prof.mean))


# --- synthetic panels ---------------------------------------------------------------------

def test_zero_events_pure_noise_floor():
    dates = hs.business_dates("2024-01-02", 3)
    cfg = hs.PanelConfig(nu=2.5, vol_exponent=1.0)
    train = hs.EventTrain(np.zeros(0), 3 * 390.0)
    panel = hs.to_volatility_panel({"S0": train}, dates, cfg, np.random.default_rng(0), 0.5)
    r = panel.returns["S0"]
    expect = cfg.sigma0 * (2.5 / 3.0)
    assert r.std() == pytest.approx(expect, rel=0.05)
    assert panel.news == [] and panel.shocks["S0"].size == 0


def test_shocks_give_news_rows():
    p = hs.HawkesParams(seed=3)
    cfg = hs.PanelConfig(n_stocks=4, n_sessions=10, shocks_per_session=0.5, burn_in=1000.0)
    panel = hs.simulate_panel(p, cfg)
    n_shocks = sum(v.size for v in panel.shocks.values())
    assert n_shocks > 0 and len(panel.news) == n_shocks
    got = sorted((it.timestamp, tuple(it.tickers)) for it in panel.news)
    want = sorted((t, (s,)) for s, v in panel.shocks.items() for t in v)
    assert got == want


@pytest.fixture(scope="module")
def shock_clusters():
    """Labels of the clusters starting in the EXO window of an injected shock."""
    run = run_panel(21, n_stocks=300)
    lo, hi = np.timedelta64(-1, "m"), np.timedelta64(4, "m")
    labels = []
    for c in run["clusters"]:
        sh = run["panel"].shocks.get(c.stock)
        if sh is None or sh.size == 0:
            continue
        d = np.asarray(c.t_first, dtype="datetime64[m]") - sh
        if np.any((d >= lo) & (d <= hi)):
            labels.append(c.label)
    return np.array(labels)


def test_panel_labels_shock_clusters_exo(shock_clusters):
    assert shock_clusters.size > 100
    assert np.mean(shock_clusters == EXO) >= 0.9


def test_panel_surviving_shock_clusters_exo(shock_clusters):
    kept = shock_clusters[shock_clusters != DISCARDED]
    assert kept.size > 100
    assert np.mean(kept == EXO) >= 0.9
