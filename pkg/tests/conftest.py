import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from auction_bandit import AdvertiserProfile, KeywordMarket

settings.register_profile("default", max_examples=60, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_market(rng, keyword_id="kw", max_ads=5, max_t=100, caps=False, history=True):
    """Small random keyword: mixed incumbents/entrants, random participation."""
    n = int(rng.integers(1, max_ads + 1))
    T = int(rng.integers(1, max_t + 1))
    ads = []
    for j in range(n):
        entry = int(rng.integers(1, T)) if rng.random() < 0.4 and T > 1 else 0
        imp = int(rng.integers(0, 300)) if history and entry == 0 else 0
        ads.append(AdvertiserProfile(
            ad_id=f"ad{j:02d}",
            valuation=float(rng.choice([1.0, 2.0, float(rng.lognormal(1, 0.7))])),
            true_cvr=float(rng.uniform(0, 0.6)),
            entry_auction_index=entry,
            daily_cap=float(rng.uniform(0.05, 3.0)) if caps and rng.random() < 0.7 else None,
            initial_impressions=imp,
            initial_conversions=int(rng.integers(0, imp + 1)) if imp else 0,
        ))
    entry = np.array([a.entry_auction_index for a in ads])
    part = (rng.random((T, n)) < rng.uniform(0.3, 1.0)) & (np.arange(T)[:, None] >= entry[None, :])
    reserve = float(rng.choice([0.0, rng.uniform(0, 0.2)]))
    return KeywordMarket(keyword_id, tuple(ads), T, reserve, part, int(rng.integers(1, T + 1)))


@pytest.fixture
def small_market():
    return random_market(np.random.default_rng(3), "kw-small", max_ads=4, max_t=60)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
