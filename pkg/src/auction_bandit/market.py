"""Ground-truth market model: advertisers, keywords, synthetic generation and log I/O.

A :class:`KeywordMarket` is immutable once built. Ads inside a market are kept
sorted by ``ad_id`` so that positional order doubles as the tie-breaking order
used by the auction.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, LogParseError, ReferentialIntegrityError


@dataclass(frozen=True)
class AdvertiserProfile:
    """Ground truth for one (ad, keyword) pair."""

    ad_id: str
    valuation: float
    true_cvr: float
    entry_auction_index: int = 0
    daily_cap: float | None = None
    is_entrant: bool | None = None
    initial_impressions: int = 0
    initial_conversions: int = 0

    def __post_init__(self):
        if not self.valuation > 0 or not math.isfinite(self.valuation):
            raise ValueError(f"{self.ad_id}: valuation must be > 0, got {self.valuation}")
        if not 0.0 <= self.true_cvr <= 1.0:
            raise ValueError(f"{self.ad_id}: true_cvr must lie in [0, 1], got {self.true_cvr}")
        if self.entry_auction_index < 0:
            raise ValueError(f"{self.ad_id}: entry_auction_index must be >= 0")
        if self.daily_cap is not None and not self.daily_cap > 0:
            raise ValueError(f"{self.ad_id}: daily_cap must be > 0 when present")
        if not 0 <= self.initial_conversions <= self.initial_impressions:
            raise ValueError(f"{self.ad_id}: need 0 <= initial_conversions <= initial_impressions")
        if self.is_entrant is None:
            object.__setattr__(self, "is_entrant", self.entry_auction_index > 0)


@dataclass(frozen=True, eq=False)
class KeywordMarket:
    """One keyword's auction sequence.

    ``participation`` is a read-only boolean matrix of shape ``(horizon, n_ads)``
    with columns in the order of ``advertisers``.
    """

    keyword_id: str
    advertisers: tuple[AdvertiserProfile, ...]
    horizon: int
    reserve_score: float
    participation: np.ndarray
    auctions_per_day: int = 0

    def __post_init__(self):
        ads = tuple(sorted(self.advertisers, key=lambda a: a.ad_id))
        ids = [a.ad_id for a in ads]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.keyword_id}: duplicate ad_id")
        if self.horizon < 1:
            raise ValueError(f"{self.keyword_id}: horizon must be >= 1")
        if not self.reserve_score >= 0:
            raise ValueError(f"{self.keyword_id}: reserve_score must be >= 0")
        part = np.array(self.participation, dtype=bool)
        if part.shape != (self.horizon, len(ads)):
            raise ValueError(
                f"{self.keyword_id}: participation shape {part.shape} != {(self.horizon, len(ads))}"
            )
        if ads is not self.advertisers:
            order = np.argsort([a.ad_id for a in self.advertisers], kind="stable")
            part = part[:, order]
        entry = np.array([a.entry_auction_index for a in ads], dtype=np.int64)
        early = part & (np.arange(self.horizon)[:, None] < entry[None, :])
        if early.any():
            t, j = np.argwhere(early)[0]
            raise ValueError(
                f"{self.keyword_id}: ad {ids[j]} participates at auction {t} before its entry"
            )
        part.setflags(write=False)
        apd = self.auctions_per_day or max(1, math.ceil(self.horizon / 7))
        object.__setattr__(self, "advertisers", ads)
        object.__setattr__(self, "participation", part)
        object.__setattr__(self, "auctions_per_day", int(apd))

    @property
    def n_ads(self) -> int:
        return len(self.advertisers)

    @property
    def ad_ids(self) -> tuple[str, ...]:
        return tuple(a.ad_id for a in self.advertisers)

    @property
    def days(self) -> int:
        return math.ceil(self.horizon / self.auctions_per_day)

    def participants(self, t: int) -> tuple[str, ...]:
        return tuple(self.ad_ids[j] for j in np.flatnonzero(self.participation[t]))

    @cached_property
    def valuations(self) -> np.ndarray:
        return _frozen([a.valuation for a in self.advertisers], float)

    @cached_property
    def true_cvrs(self) -> np.ndarray:
        return _frozen([a.true_cvr for a in self.advertisers], float)

    @cached_property
    def entrant_mask(self) -> np.ndarray:
        return _frozen([bool(a.is_entrant) for a in self.advertisers], bool)

    @cached_property
    def initial_impressions(self) -> np.ndarray:
        return _frozen([a.initial_impressions for a in self.advertisers], np.int64)

    @cached_property
    def initial_conversions(self) -> np.ndarray:
        return _frozen([a.initial_conversions for a in self.advertisers], np.int64)

    @cached_property
    def participant_index(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(row) for row in self.participation)

    def with_caps(self, caps: Mapping[str, float | None]) -> "KeywordMarket":
        """Copy of this market with daily caps replaced for the listed ads."""
        ads = []
        for a in self.advertisers:
            if a.ad_id in caps:
                cap = caps[a.ad_id]
                a = _replace_profile(a, daily_cap=None if cap is None or math.isinf(cap) else cap)
            ads.append(a)
        return KeywordMarket(
            self.keyword_id, tuple(ads), self.horizon, self.reserve_score,
            self.participation, self.auctions_per_day,
        )

    def summary(self) -> dict[str, float]:
        return {
            "horizon": self.horizon,
            "bidders": self.n_ads,
            "entrants": int(self.entrant_mask.sum()),
            "bidders_per_auction": float(self.participation.sum(1).mean()),
            "mean_cvr": float(self.true_cvrs.mean()),
            "reserve_score": self.reserve_score,
        }


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _replace_profile(profile: AdvertiserProfile, **changes) -> AdvertiserProfile:
    kwargs = {f.name: getattr(profile, f.name) for f in fields(profile)}
    kwargs.update(changes)
    return AdvertiserProfile(**kwargs)


# --------------------------------------------------------------------------
# Distribution specs
# --------------------------------------------------------------------------

_FAMILY_PARAMS = {
    "constant": ({"value"}, set()),
    "uniform": ({"low", "high"}, set()),
    "lognormal": ({"median", "sigma"}, {"low", "high"}),
    "beta": ({"a", "b"}, {"scale"}),
    "poisson": ({"lam"}, {"low"}),
    "mixture": ({"weights", "components"}, set()),
}


@dataclass(frozen=True)
class DistributionSpec:
    """A named distribution family with parameters.

    Families: ``constant(value)``, ``uniform(low, high)``,
    ``lognormal(median, sigma[, low, high])`` (clipped to ``[low, high]``),
    ``beta(a, b[, scale])``, ``poisson(lam[, low])`` and
    ``mixture(weights, components)`` where components are specs themselves
    (a point mass is ``constant``).
    """

    family: str
    params: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def parse(cls, obj: Any, name: str = "distribution") -> "DistributionSpec":
        if isinstance(obj, DistributionSpec):
            return obj
        if isinstance(obj, (int, float)) and not isinstance(obj, bool):
            return cls("constant", {"value": float(obj)})
        if not isinstance(obj, Mapping) or "family" not in obj:
            raise ConfigurationError(name, f"expected a mapping with a 'family' key, got {obj!r}")
        params = {k: v for k, v in obj.items() if k != "family"}
        if obj["family"] == "mixture" and "components" in params:
            params["components"] = tuple(
                cls.parse(c, f"{name}.components[{i}]") for i, c in enumerate(params["components"])
            )
            params["weights"] = tuple(params.get("weights", ()))
        return cls(obj["family"], params)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"family": self.family}
        for k, v in self.params.items():
            if k == "components":
                v = [c.to_dict() for c in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[k] = v
        return out

    def validate(self, name: str) -> None:
        if self.family not in _FAMILY_PARAMS:
            raise ConfigurationError(name, f"unknown distribution family {self.family!r}")
        required, optional = _FAMILY_PARAMS[self.family]
        keys = set(self.params)
        if not required <= keys:
            raise ConfigurationError(name, f"{self.family} needs parameters {sorted(required)}")
        if keys - required - optional:
            raise ConfigurationError(name, f"unexpected parameters {sorted(keys - required - optional)}")
        p = self.params
        bad = None
        if self.family == "constant" and not _finite(p["value"]):
            bad = "value must be finite"
        elif self.family == "uniform" and not (_finite(p["low"]) and _finite(p["high"]) and p["low"] <= p["high"]):
            bad = "need finite low <= high"
        elif self.family == "lognormal":
            if not (_finite(p["median"]) and p["median"] > 0 and _finite(p["sigma"]) and p["sigma"] >= 0):
                bad = "need median > 0 and sigma >= 0"
            elif p.get("low", 0.0) > p.get("high", math.inf):
                bad = "need low <= high"
        elif self.family == "beta" and not (p["a"] > 0 and p["b"] > 0 and p.get("scale", 1.0) > 0):
            bad = "need a > 0, b > 0, scale > 0"
        elif self.family == "poisson" and not (_finite(p["lam"]) and p["lam"] >= 0):
            bad = "need lam >= 0"
        elif self.family == "mixture":
            w = np.asarray(p["weights"], dtype=float)
            if len(w) != len(p["components"]) or len(w) == 0 or (w < 0).any() or not w.sum() > 0:
                bad = "weights must be nonnegative, nonzero, one per component"
            for i, c in enumerate(p["components"]):
                c.validate(f"{name}.components[{i}]")
        if bad:
            raise ConfigurationError(name, bad)

    def support(self) -> tuple[float, float]:
        p = self.params
        if self.family == "constant":
            return (p["value"], p["value"])
        if self.family == "uniform":
            return (p["low"], p["high"])
        if self.family == "lognormal":
            return (max(0.0, p.get("low", 0.0)), p.get("high", math.inf))
        if self.family == "beta":
            return (0.0, p.get("scale", 1.0))
        if self.family == "poisson":
            return (p.get("low", 0.0), math.inf)
        lows, highs = zip(*(c.support() for c in p["components"]))
        return (min(lows), max(highs))

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        p = self.params
        if self.family == "constant":
            return np.full(size if size is not None else (), float(p["value"]))
        if self.family == "uniform":
            return rng.uniform(p["low"], p["high"], size)
        if self.family == "lognormal":
            x = p["median"] * np.exp(p["sigma"] * rng.standard_normal(size))
            return np.clip(x, p.get("low", 0.0), p.get("high", math.inf))
        if self.family == "beta":
            return p.get("scale", 1.0) * rng.beta(p["a"], p["b"], size)
        if self.family == "poisson":
            return np.maximum(rng.poisson(p["lam"], size).astype(float), p.get("low", 0.0))
        w = np.asarray(p["weights"], dtype=float)
        n = int(np.prod(size)) if size is not None else 1
        which = rng.choice(len(w), size=n, p=w / w.sum())
        out = np.empty(n)
        for i, comp in enumerate(p["components"]):
            sel = which == i
            out[sel] = comp.sample(rng, int(sel.sum()))
        return out.reshape(size) if size is not None else out[0]


def _finite(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _D(family: str, **params) -> DistributionSpec:
    return DistributionSpec(family, params)


# Defaults calibrated to the keyword-level summary statistics of the source
# data: 2880 mean / 1434 median impressions, 38.2 bidders, 21.6 entrants,
# 11.6 bidders per impression, keyword CVR median 0.0058 and mean 0.022,
# entrant CVR median 0.0013 and mean 0.0035.
DEFAULT_GENERATOR = {
    "keyword_count": 1800,
    "impressions_per_keyword": _D("lognormal", median=1434.0, sigma=1.2, low=35.0, high=99303.0),
    "bidders_per_keyword": _D("lognormal", median=37.5, sigma=0.2, low=2.0, high=74.0),
    "entrant_fraction": 0.565,
    "cvr_distribution": _D("lognormal", median=0.0058, sigma=1.6, low=0.0002, high=0.49),
    "valuation_distribution": _D("lognormal", median=10.0, sigma=0.6),
    "reserve_quantile": 0.1,
    "participation_rate": _D("beta", a=1.2, b=1.0),
    "cvr_within_keyword_sigma": 0.7,
    "entrant_cvr_ratio": 0.25,
    "entrant_participation_ratio": 0.05,
    "incumbent_history": _D("lognormal", median=10000.0, sigma=1.0, low=100.0),
    "days": 7,
}


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic market generator.

    Per keyword ``k`` the generator draws a base conversion rate ``c_k`` from
    ``cvr_distribution``; incumbent CVRs are ``c_k * exp(s Z)`` and entrant CVRs
    additionally get multiplied by ``entrant_cvr_ratio`` (``s`` is
    ``cvr_within_keyword_sigma``). Each eligible ad joins an auction with the
    keyword's ``participation_rate``, scaled by ``entrant_participation_ratio``
    for entrants. Incumbents carry a warm history whose
    impression count is drawn from ``incumbent_history``.
    """

    keyword_count: int = DEFAULT_GENERATOR["keyword_count"]
    impressions_per_keyword: DistributionSpec = DEFAULT_GENERATOR["impressions_per_keyword"]
    bidders_per_keyword: DistributionSpec = DEFAULT_GENERATOR["bidders_per_keyword"]
    entrant_fraction: float = DEFAULT_GENERATOR["entrant_fraction"]
    cvr_distribution: DistributionSpec = DEFAULT_GENERATOR["cvr_distribution"]
    valuation_distribution: DistributionSpec = DEFAULT_GENERATOR["valuation_distribution"]
    reserve_quantile: float = DEFAULT_GENERATOR["reserve_quantile"]
    seed: int = 0
    participation_rate: DistributionSpec = DEFAULT_GENERATOR["participation_rate"]
    cvr_within_keyword_sigma: float = DEFAULT_GENERATOR["cvr_within_keyword_sigma"]
    entrant_cvr_ratio: float = DEFAULT_GENERATOR["entrant_cvr_ratio"]
    entrant_participation_ratio: float = DEFAULT_GENERATOR["entrant_participation_ratio"]
    incumbent_history: DistributionSpec = DEFAULT_GENERATOR["incumbent_history"]
    days: int = DEFAULT_GENERATOR["days"]

    _DIST_FIELDS = (
        "impressions_per_keyword", "bidders_per_keyword", "cvr_distribution",
        "valuation_distribution", "participation_rate", "incumbent_history",
    )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(sorted(unknown)[0], "unknown generator field")
        kwargs = dict(data)
        for name in cls._DIST_FIELDS:
            if name in kwargs:
                kwargs[name] = DistributionSpec.parse(kwargs[name], name)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if isinstance(v, DistributionSpec) else v
        return out

    def validate(self) -> None:
        if not isinstance(self.keyword_count, int) or self.keyword_count < 1:
            raise ConfigurationError("keyword_count", "must be a positive integer")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed", "must be a 64-bit unsigned integer")
        for name, lo, hi in (
            ("entrant_fraction", 0.0, 1.0),
            ("reserve_quantile", 0.0, 1.0),
            ("entrant_cvr_ratio", 0.0, math.inf),
            ("entrant_participation_ratio", 0.0, math.inf),
            ("cvr_within_keyword_sigma", 0.0, math.inf),
        ):
            v = getattr(self, name)
            if not _finite(v) or not lo <= v <= hi:
                raise ConfigurationError(name, f"must lie in [{lo}, {hi}], got {v!r}")
        if not isinstance(self.days, int) or self.days < 1:
            raise ConfigurationError("days", "must be a positive integer")
        # required support per distribution field
        supports = {
            "impressions_per_keyword": (1.0, math.inf),
            "bidders_per_keyword": (1.0, math.inf),
            "cvr_distribution": (0.0, 1.0),
            "valuation_distribution": (0.0, math.inf),
            "participation_rate": (0.0, 1.0),
            "incumbent_history": (0.0, math.inf),
        }
        for name, (lo, hi) in supports.items():
            spec = getattr(self, name)
            if not isinstance(spec, DistributionSpec):
                raise ConfigurationError(name, "must be a distribution spec")
            spec.validate(name)
            s_lo, s_hi = spec.support()
            strict_low = name == "valuation_distribution"
            if s_lo < lo or s_hi > hi or (strict_low and s_lo <= 0 and spec.family in ("constant", "uniform", "mixture")):
                raise ConfigurationError(
                    name, f"support [{s_lo}, {s_hi}] falls outside required [{lo}, {hi}]"
                )


def generate_market(config: GeneratorConfig) -> list[KeywordMarket]:
    """Draw ``config.keyword_count`` synthetic keyword markets.

    Pure function of ``config``: every keyword uses its own child stream of
    ``config.seed``, so the output does not depend on evaluation order.
    """
    config.validate()
    width = max(4, len(str(config.keyword_count - 1)))
    root = np.random.SeedSequence(config.seed)
    return [
        _generate_keyword(config, f"kw{k:0{width}d}", np.random.default_rng(child))
        for k, child in enumerate(root.spawn(config.keyword_count))
    ]


def _generate_keyword(config: GeneratorConfig, keyword_id: str, rng: np.random.Generator) -> KeywordMarket:
    horizon = max(1, int(round(float(config.impressions_per_keyword.sample(rng)))))
    n_ads = max(1, int(round(float(config.bidders_per_keyword.sample(rng)))))
    # keep at least one incumbent so that early auctions have participants
    n_entrants = min(int(rng.binomial(n_ads, config.entrant_fraction)), n_ads - 1)
    rate = float(config.participation_rate.sample(rng))
    base_cvr = float(config.cvr_distribution.sample(rng))

    entrant = np.zeros(n_ads, dtype=bool)
    entrant[rng.permutation(n_ads)[:n_entrants]] = True
    values = config.valuation_distribution.sample(rng, n_ads)
    spread = np.exp(config.cvr_within_keyword_sigma * rng.standard_normal(n_ads))
    cvr = np.clip(base_cvr * spread * np.where(entrant, config.entrant_cvr_ratio, 1.0), 0.0, 1.0)
    half = max(1, horizon // 2)
    entry = np.where(entrant, rng.integers(1, half + 1, n_ads), 0) if horizon > 1 else np.zeros(n_ads, int)
    entry = np.minimum(entry, horizon - 1)
    hist_i = np.where(entrant, 0, np.round(config.incumbent_history.sample(rng, n_ads))).astype(np.int64)
    hist_c = rng.binomial(hist_i, cvr)

    ad_rate = np.where(entrant, min(1.0, rate * config.entrant_participation_ratio), rate)
    part = rng.random((horizon, n_ads)) < ad_rate[None, :]
    t_idx = np.arange(horizon)[:, None]
    part &= t_idx >= entry[None, :]
    part[entry, np.arange(n_ads)] = True
    empty = np.flatnonzero(~part.any(axis=1))
    if empty.size:
        incumbents = np.flatnonzero(~entrant)
        part[empty, rng.choice(incumbents, empty.size)] = True

    reserve = float(np.quantile(values * cvr, config.reserve_quantile))
    ads = tuple(
        AdvertiserProfile(
            ad_id=f"ad{j:03d}",
            valuation=float(values[j]),
            true_cvr=float(cvr[j]),
            entry_auction_index=int(entry[j]),
            is_entrant=bool(entrant[j]),
            initial_impressions=int(hist_i[j]),
            initial_conversions=int(hist_c[j]),
        )
        for j in range(n_ads)
    )
    apd = max(1, math.ceil(horizon / config.days))
    return KeywordMarket(keyword_id, ads, horizon, reserve, part, apd)


# --------------------------------------------------------------------------
# Auction-log I/O
# --------------------------------------------------------------------------

LOG_COLUMNS = (
    "keyword_id", "auction_index", "ad_id", "bid", "true_cvr", "entrant", "reserve_score",
)
OPTIONAL_LOG_COLUMNS = (
    "daily_cap", "auctions_per_day", "impressions", "conversions",
)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_market_log(markets: Iterable[KeywordMarket], path: str | os.PathLike | io.TextIOBase) -> None:
    """Serialize markets as one row per (keyword, auction, bidder).

    Bids are the truthful valuations. ``impressions``/``conversions`` carry the
    ad's warm history, which is the belief state at its first auction.
    """
    header = LOG_COLUMNS + OPTIONAL_LOG_COLUMNS

    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for m in markets:
            for t in range(m.horizon):
                for j in np.flatnonzero(m.participation[t]):
                    a = m.advertisers[j]
                    w.writerow([
                        m.keyword_id, t, a.ad_id, _fmt(a.valuation), _fmt(a.true_cvr),
                        int(bool(a.is_entrant)), _fmt(m.reserve_score),
                        "" if a.daily_cap is None else _fmt(a.daily_cap),
                        m.auctions_per_day, a.initial_impressions, a.initial_conversions,
                    ])

    if isinstance(path, (str, os.PathLike)):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            _write(fh)
    else:
        _write(path)


def load_market(
    log_source: str | os.PathLike | io.TextIOBase | Iterable[Mapping[str, Any]],
    ads: Mapping[tuple[str, str], Mapping[str, Any]] | None = None,
) -> list[KeywordMarket]:
    """Build keyword markets from an auction log.

    ``log_source`` is a CSV path, an open text stream, or an iterable of row
    mappings. Valuations are the mean logged bid; ``true_cvr`` comes from the
    row field or from ``ads[(keyword_id, ad_id)]["true_cvr"]``. A row whose ad
    has no CVR from either source raises :class:`ReferentialIntegrityError`.
    Entrants (``entrant`` = 1) enter at their first logged auction.
    """
    rows = _read_rows(log_source)
    by_kw: dict[str, list[tuple[int, dict]]] = {}
    for lineno, row in rows:
        by_kw.setdefault(row["keyword_id"], []).append((lineno, row))
    markets = []
    for kw in sorted(by_kw):
        markets.append(_build_keyword(kw, by_kw[kw], ads or {}))
    return markets


def _read_rows(source) -> list[tuple[int, dict]]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8", newline="") as fh:
            return _read_rows(fh)
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        reader = csv.DictReader(source)
        missing = [c for c in ("keyword_id", "auction_index", "ad_id", "bid") if c not in (reader.fieldnames or ())]
        if reader.fieldnames is not None and missing:
            raise LogParseError(1, f"missing required columns {missing}")
        raw = [(i + 2, r) for i, r in enumerate(reader)]
    else:
        raw = [(i + 1, dict(r)) for i, r in enumerate(source)]
    out = []
    for lineno, r in raw:
        out.append((lineno, _parse_row(lineno, r)))
    return out


def _parse_row(lineno: int, r: Mapping[str, Any]) -> dict:
    def num(name, cast=float, required=True, default=None):
        v = r.get(name)
        if v is None or v == "":
            if required:
                raise LogParseError(lineno, f"missing value for {name!r}")
            return default
        try:
            x = cast(v)
        except (TypeError, ValueError):
            raise LogParseError(lineno, f"cannot parse {name}={v!r}") from None
        if cast is float and not math.isfinite(x):
            raise LogParseError(lineno, f"non-finite {name}={v!r}")
        return x

    kw, ad = r.get("keyword_id"), r.get("ad_id")
    if not kw or not ad:
        raise LogParseError(lineno, "keyword_id and ad_id are required")
    row = {
        "keyword_id": str(kw),
        "ad_id": str(ad),
        "auction_index": num("auction_index", int),
        "bid": num("bid"),
        "true_cvr": num("true_cvr", required=False),
        "entrant": num("entrant", int, required=False, default=0),
        "reserve_score": num("reserve_score", required=False, default=0.0),
        "daily_cap": num("daily_cap", required=False),
        "auctions_per_day": num("auctions_per_day", int, required=False),
        "impressions": num("impressions", int, required=False, default=0),
        "conversions": num("conversions", int, required=False, default=0),
    }
    if row["auction_index"] < 0:
        raise LogParseError(lineno, "auction_index must be >= 0")
    if row["bid"] <= 0:
        raise LogParseError(lineno, "bid must be > 0")
    if row["true_cvr"] is not None and not 0 <= row["true_cvr"] <= 1:
        raise LogParseError(lineno, "true_cvr must lie in [0, 1]")
    if not 0 <= row["conversions"] <= row["impressions"]:
        raise LogParseError(lineno, "need 0 <= conversions <= impressions")
    return row


def _build_keyword(kw: str, rows: list[tuple[int, dict]], ads: Mapping) -> KeywordMarket:
    horizon = max(r["auction_index"] for _, r in rows) + 1
    reserve = rows[0][1]["reserve_score"]
    apd = next((r["auctions_per_day"] for _, r in rows if r["auctions_per_day"]), None)
    per_ad: dict[str, list[tuple[int, dict]]] = {}
    seen = set()
    for lineno, r in rows:
        key = (r["auction_index"], r["ad_id"])
        if key in seen:
            raise LogParseError(lineno, f"duplicate row for ad {r['ad_id']} in auction {r['auction_index']}")
        seen.add(key)
        if r["reserve_score"] != reserve:
            raise LogParseError(lineno, f"reserve_score differs within keyword {kw}")
        per_ad.setdefault(r["ad_id"], []).append((lineno, r))

    profiles = []
    for ad_id, ad_rows in per_ad.items():
        ad_rows.sort(key=lambda x: x[1]["auction_index"])
        first_line, first = ad_rows[0]
        extra = ads.get((kw, ad_id), {})
        cvr = first["true_cvr"] if first["true_cvr"] is not None else extra.get("true_cvr")
        if cvr is None:
            raise ReferentialIntegrityError(
                f"line {first_line}: ad {ad_id!r} in keyword {kw!r} has no true_cvr and no definition"
            )
        bids = [r["bid"] for _, r in ad_rows]
        entrant = bool(first["entrant"])
        profiles.append(AdvertiserProfile(
            ad_id=ad_id,
            valuation=bids[0] if min(bids) == max(bids) else math.fsum(bids) / len(bids),
            true_cvr=float(cvr),
            entry_auction_index=first["auction_index"] if entrant else 0,
            daily_cap=first["daily_cap"] if first["daily_cap"] is not None else extra.get("daily_cap"),
            is_entrant=entrant,
            initial_impressions=first["impressions"],
            initial_conversions=first["conversions"],
        ))
    profiles.sort(key=lambda a: a.ad_id)
    col = {a.ad_id: j for j, a in enumerate(profiles)}
    part = np.zeros((horizon, len(profiles)), dtype=bool)
    for _, r in rows:
        part[r["auction_index"], col[r["ad_id"]]] = True
    return KeywordMarket(kw, tuple(profiles), horizon, reserve, part, apd or 0)


def market_fingerprint(markets: Sequence[KeywordMarket]) -> str:
    """SHA-256 of the serialized market set."""
    import hashlib

    buf = io.StringIO()
    write_market_log(markets, buf)
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()
