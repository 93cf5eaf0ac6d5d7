import io
import math

import numpy as np
import pytest

from auction_bandit import (
    AdvertiserProfile,
    ConfigurationError,
    DistributionSpec,
    GeneratorConfig,
    KeywordMarket,
    LogParseError,
    ReferentialIntegrityError,
    generate_market,
    load_market,
    write_market_log,
)
from auction_bandit.market import DEFAULT_GENERATOR, market_fingerprint


def small_config(**kw):
    base = dict(
        keyword_count=6,
        seed=5,
        impressions_per_keyword={"family": "lognormal", "median": 200, "sigma": 0.5, "low": 20, "high": 600},
        bidders_per_keyword={"family": "lognormal", "median": 6, "sigma": 0.3, "low": 2, "high": 12},
    )
    base.update(kw)
    return GeneratorConfig.from_dict(base)


def test_generator_is_deterministic_and_order_free():
    a = generate_market(small_config())
    b = generate_market(small_config())
    assert market_fingerprint(a) == market_fingerprint(b)
    more = generate_market(small_config(keyword_count=9))
    # a keyword's draw depends only on its own child stream
    assert market_fingerprint(more[:6]) == market_fingerprint(a)
    assert market_fingerprint(generate_market(small_config(seed=6))) != market_fingerprint(a)


def test_generated_markets_are_consistent():
    for m in generate_market(small_config(keyword_count=10)):
        assert m.participation.shape == (m.horizon, m.n_ads)
        assert m.participation.any(axis=1).all()
        assert list(m.ad_ids) == sorted(m.ad_ids)
        assert (~m.entrant_mask).any()
        for j, a in enumerate(m.advertisers):
            first = np.flatnonzero(m.participation[:, j])
            if a.is_entrant:
                assert a.initial_impressions == 0
                assert first[0] == a.entry_auction_index
            assert 0 <= a.initial_conversions <= a.initial_impressions
            assert 0 <= a.true_cvr <= 1 and a.valuation > 0
        vm = m.valuations * m.true_cvrs
        assert vm.min() <= m.reserve_score <= vm.max()


def test_default_calibration_matches_keyword_summaries():
    ms = generate_market(GeneratorConfig(keyword_count=300, seed=1))
    horizons = np.array([m.horizon for m in ms])
    bidders = np.array([m.n_ads for m in ms])
    assert 1100 < np.median(horizons) < 1800
    assert 34 < bidders.mean() < 42
    ent = np.array([m.entrant_mask.sum() for m in ms])
    assert 18 < ent.mean() < 25


def test_market_log_round_trip(tmp_path):
    ms = generate_market(small_config())
    path = tmp_path / "m.csv"
    write_market_log(ms, path)
    back = load_market(path)
    assert market_fingerprint(back) == market_fingerprint(ms)
    for a, b in zip(ms, back):
        assert a.keyword_id == b.keyword_id
        assert np.array_equal(a.participation, b.participation)
        assert np.array_equal(a.valuations, b.valuations)
        assert a.auctions_per_day == b.auctions_per_day


def test_load_market_from_rows_and_external_cvr():
    rows = [
        {"keyword_id": "k", "auction_index": 0, "ad_id": "b", "bid": 2.0, "true_cvr": 0.1},
        {"keyword_id": "k", "auction_index": 0, "ad_id": "a", "bid": 1.0},
        {"keyword_id": "k", "auction_index": 1, "ad_id": "a", "bid": 3.0},
    ]
    (m,) = load_market(rows, ads={("k", "a"): {"true_cvr": 0.2}})
    assert m.ad_ids == ("a", "b")
    assert m.valuations.tolist() == [2.0, 2.0]
    assert m.true_cvrs.tolist() == [0.2, 0.1]
    assert m.participation.tolist() == [[True, True], [True, False]]


def test_load_market_errors():
    with pytest.raises(ReferentialIntegrityError):
        load_market([{"keyword_id": "k", "auction_index": 0, "ad_id": "a", "bid": 1.0}])
    with pytest.raises(LogParseError) as e:
        load_market(io.StringIO("keyword_id,auction_index,ad_id,bid,true_cvr\nk,0,a,x,0.1\n"))
    assert e.value.row == 2
    with pytest.raises(LogParseError):
        load_market(io.StringIO("keyword_id,ad_id\nk,a\n"))
    dup = "keyword_id,auction_index,ad_id,bid,true_cvr\nk,0,a,1,0.1\nk,0,a,1,0.1\n"
    with pytest.raises(LogParseError):
        load_market(io.StringIO(dup))
    with pytest.raises(LogParseError):
        load_market(io.StringIO("keyword_id,auction_index,ad_id,bid,true_cvr\nk,0,a,-1,0.1\n"))


@pytest.mark.parametrize(
    "field,value",
    [
        ("keyword_count", 0),
        ("entrant_fraction", 1.5),
        ("reserve_quantile", -0.1),
        ("cvr_distribution", {"family": "uniform", "low": 0.0, "high": 2.0}),
        ("valuation_distribution", {"family": "nope"}),
        ("participation_rate", {"family": "beta", "a": 0, "b": 1}),
        ("days", 0),
    ],
)
def test_generator_config_validation_names_field(field, value):
    with pytest.raises(ConfigurationError) as e:
        generate_market(GeneratorConfig.from_dict({field: value}))
    assert e.value.field == field


def test_unknown_generator_field():
    with pytest.raises(ConfigurationError) as e:
        GeneratorConfig.from_dict({"bogus": 1})
    assert e.value.field == "bogus"


def test_distribution_specs():
    rng = np.random.default_rng(0)
    mix = DistributionSpec.parse({"family": "mixture", "weights": [1, 3],
                                  "components": [1.0, {"family": "uniform", "low": 2, "high": 3}]})
    x = mix.sample(rng, 4000)
    assert abs((x == 1.0).mean() - 0.25) < 0.03
    assert mix.support() == (1.0, 3)
    ln = DistributionSpec.parse({"family": "lognormal", "median": 5.0, "sigma": 1.0, "low": 1.0, "high": 10.0})
    y = ln.sample(rng, 4000)
    assert y.min() >= 1.0 and y.max() <= 10.0
    assert abs(np.median(y) - 5.0) < 0.3
    assert DistributionSpec.parse(3).sample(rng) == 3.0
    assert DEFAULT_GENERATOR["cvr_distribution"].to_dict()["family"] == "lognormal"


def test_keyword_market_validation():
    ad = AdvertiserProfile("a", 1.0, 0.1, entry_auction_index=2)
    assert ad.is_entrant
    with pytest.raises(ValueError):
        KeywordMarket("k", (ad,), 3, 0.0, np.ones((3, 1), bool))
    with pytest.raises(ValueError):
        AdvertiserProfile("a", 0.0, 0.1)
    with pytest.raises(ValueError):
        AdvertiserProfile("a", 1.0, 1.1)
    with pytest.raises(ValueError):
        AdvertiserProfile("a", 1.0, 0.1, initial_impressions=1, initial_conversions=2)


def test_columns_follow_ad_id_order():
    ads = (AdvertiserProfile("b", 2.0, 0.1), AdvertiserProfile("a", 1.0, 0.2))
    part = np.array([[True, False], [False, True]])
    m = KeywordMarket("k", ads, 2, 0.0, part, 1)
    assert m.ad_ids == ("a", "b")
    assert m.participation.tolist() == [[False, True], [True, False]]
    assert m.participants(0) == ("b",)
    assert math.isclose(m.days, 2)
    capped = m.with_caps({"a": 5.0})
    assert capped.advertisers[0].daily_cap == 5.0 and m.advertisers[0].daily_cap is None
