import numpy as np
import pandas as pd
import pytest

from auction_bandit import (
    AdvertiserProfile,
    KeywordMarket,
    SimulationConfig,
    TSPolicy,
    UCBPolicy,
    UnusableLogError,
    simulate_keyword,
)
from auction_bandit.estimators import (
    estimate_cvr_ips,
    estimate_cvr_sample,
    estimate_primitives,
    estimate_valuations,
    win_counts,
)
from auction_bandit.io import trajectory_log_frame


def two_ad_log(T=400, seed=0, policy=TSPolicy()):
    ads = (AdvertiserProfile("a", 2.0, 0.2, initial_impressions=30, initial_conversions=6),
           AdvertiserProfile("b", 3.0, 0.1, initial_impressions=30, initial_conversions=3))
    m = KeywordMarket("k", ads, T, 0.05, np.ones((T, 2), bool), T)
    tr = simulate_keyword(m, SimulationConfig(policy, master_seed=seed, record_level="per-auction"))
    return trajectory_log_frame([tr]), tr


def test_valuations_are_mean_bids():
    log = pd.DataFrame({"keyword_id": ["k"] * 3, "ad_id": ["a", "a", "b"], "bid": [1.0, 3.0, 5.0],
                        "impressions": [0, 1000, 0], "conversions": [0, 10, 0]})
    assert estimate_valuations(log) == {("k", "a"): 2.0, ("k", "b"): 5.0}
    # only rows with a tight posterior survive the filter
    assert estimate_valuations(log, variance_threshold=1e-4) == {("k", "a"): 3.0}


def test_sample_estimator_counts_wins():
    log, tr = two_ad_log()
    c = win_counts(log)
    assert c["participations"].tolist() == [400, 400]
    assert c["wins"].sum() == (tr.auctions.winner >= 0).sum()
    est = estimate_cvr_sample(log)
    for j, ad in enumerate(tr.ad_ids):
        wins = (tr.auctions.winner == j).sum()
        conv = ((tr.auctions.winner == j) & tr.auctions.converted).sum()
        assert est[("k", ad)] == conv / wins


def test_ips_is_row_order_invariant():
    log, _ = two_ad_log(T=200)
    a = estimate_cvr_ips(log, TSPolicy(), mc_samples=500, seed=3)
    b = estimate_cvr_ips(log.sample(frac=1.0, random_state=1), TSPolicy(), mc_samples=500, seed=3)
    assert a.estimates == b.estimates
    assert (a.diagnostics["propensities"] == a.diagnostics["conversions"]).all()


def test_ips_with_certain_allocation_is_a_conversion_rate():
    # one ad, no reserve: it wins every auction with probability one
    ad = AdvertiserProfile("a", 1.0, 0.3, initial_impressions=10, initial_conversions=3)
    m = KeywordMarket("k", (ad,), 300, 0.0, np.ones((300, 1), bool), 300)
    tr = simulate_keyword(m, SimulationConfig(master_seed=1, record_level="per-auction"))
    log = trajectory_log_frame([tr])
    ips = estimate_cvr_ips(log, TSPolicy(), mc_samples=200)
    assert ips.estimates[("k", "a")] == pytest.approx(estimate_cvr_sample(log)[("k", "a")])
    assert ips.clipped_rows == 0


def test_ips_under_ucb_uses_point_masses():
    log, tr = two_ad_log(T=300, policy=UCBPolicy(0.04))
    ips = estimate_cvr_ips(log, UCBPolicy(0.04), mc_samples=1)
    for j, ad in enumerate(tr.ad_ids):
        conv = ((tr.auctions.winner == j) & tr.auctions.converted).sum()
        assert ips.estimates[("k", ad)] == conv / 300


def test_ips_floor_clips_small_propensities():
    log, _ = two_ad_log(T=300)
    ips = estimate_cvr_ips(log, TSPolicy(), mc_samples=200, floor=0.9)
    assert ips.clipped_rows > 0
    d = ips.diagnostics
    assert (d["min_propensity"].dropna() < 0.9).any()


def test_ips_needs_logged_beliefs():
    log, _ = two_ad_log(T=50)
    with pytest.raises(UnusableLogError):
        estimate_cvr_ips(log.drop(columns=["impressions"]), TSPolicy())
    bad = log.copy()
    bad.loc[0, "conversions"] = np.nan
    with pytest.raises(UnusableLogError):
        estimate_cvr_ips(bad, TSPolicy())


def test_estimate_primitives_frame():
    log, _ = two_ad_log(T=100)
    df = estimate_primitives(log, mc_samples=100).to_frame()
    assert {"keyword_id", "ad_id", "valuation_hat", "cvr_hat", "cvr_hat_ips", "participations", "wins"} <= set(df.columns)
    assert df["valuation_hat"].tolist() == [2.0, 3.0]
