"""Counterfactual trajectory simulation over keyword markets.

Seeding scheme
--------------
Every (keyword, replication) pair owns two random streams::

    scores      = SeedSequence(master_seed, spawn_key=(key(keyword_id), replication, 0))
    conversions = SeedSequence(master_seed, spawn_key=(key(keyword_id), replication, 1))

where ``key`` is the first four bytes (big endian) of SHA-256 of the UTF-8
keyword id. The score stream draws the quality scores of each auction's
participants in ad_id order, one ``Generator.beta`` call per auction. The
conversion stream supplies one uniform per auction index, consumed whether
or not the auction is allocated. Results therefore depend only on
(market, policy, master_seed, keyword, replication), never on batching or
worker scheduling.

A batch runs many such "lanes" of one keyword. Lanes may differ in policy
(a prior grid) while sharing replication seeds, which gives common random
numbers across grid points.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernel
from .errors import ValidityRegionError
from .market import KeywordMarket
from .mechanisms import (
    DATA_PRIOR_MEAN,
    AuctionResult,
    ExplorationPolicy,
    TSPolicy,
    UCBPolicy,
    policy_prior_arrays,
)

# Entrant impression share observed under the logged policy.
DATA_ENTRANT_SHARE = 0.18

ENTRANT_WIN, ENTRANT_SECOND, ENTRANT_NONE = 0, 1, 2
DECOMPOSITION_LABELS = ("entrant_win", "entrant_second", "entrant_none")

# price_setter codes in per-auction columns
RESERVE_SET = -1
UNALLOCATED = -2


@dataclass(frozen=True)
class WarmStart:
    """Initial belief counts.

    ``cold`` starts every ad at zero history. ``history`` uses the market's
    per-ad history, overridden by ``history`` entries keyed by
    ``(keyword_id, ad_id)`` mapping to ``(impressions, conversions)``.
    """

    mode: str = "history"
    history: Mapping[tuple[str, str], tuple[int, int]] | None = None

    def __post_init__(self):
        if self.mode not in ("cold", "history"):
            raise ValueError(f"warm start mode must be 'cold' or 'history', got {self.mode!r}")
        for key, (i, c) in (self.history or {}).items():
            if not 0 <= c <= i:
                raise ValueError(f"warm start {key}: need 0 <= conversions <= impressions")

    def initial_counts(self, market: KeywordMarket) -> tuple[np.ndarray, np.ndarray]:
        if self.mode == "cold":
            z = np.zeros(market.n_ads, dtype=np.int64)
            return z, z.copy()
        imp = market.initial_impressions.copy()
        conv = market.initial_conversions.copy()
        for j, ad in enumerate(market.ad_ids):
            if self.history and (market.keyword_id, ad) in self.history:
                imp[j], conv[j] = self.history[(market.keyword_id, ad)]
        return imp, conv


@dataclass(frozen=True)
class SimulationConfig:
    policy: ExplorationPolicy = field(default_factory=TSPolicy)
    replications: int = 1
    master_seed: int = 0
    budget_caps_enabled: bool = False
    warm_start: WarmStart = field(default_factory=WarmStart)
    record_level: str = "aggregate"
    allow_exploratory: bool = False
    # (keyword_id, ad_id) -> daily cap; overrides AdvertiserProfile.daily_cap
    daily_caps: Mapping[tuple[str, str], float] | None = None
    # (keyword_id, ad_id) -> max impressions won during the run; opt-in
    impression_caps: Mapping[tuple[str, str], int] | None = None

    def __post_init__(self):
        if not isinstance(self.replications, int) or self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.record_level not in ("aggregate", "per-auction"):
            raise ValueError("record_level must be 'aggregate' or 'per-auction'")


@dataclass(eq=False)
class AuctionColumns:
    """Per-auction outcomes of one trajectory, stored column-wise.

    Ad references are column indices into ``Trajectory.ad_ids``; ``winner`` is
    -1 when unallocated; ``price_setter`` is -1 when the reserve sets the price
    and -2 when unallocated; ``quality`` is NaN for non-participants;
    ``category`` indexes ``DECOMPOSITION_LABELS`` (-1 when unallocated);
    ``entrant_rank`` is 0 when no entrant took part. ``spend`` holds each ad's
    same-day spend after the auction and is only kept when caps are active.
    """

    winner: np.ndarray
    price_setter: np.ndarray
    price: np.ndarray
    converted: np.ndarray
    revenue: np.ndarray
    efficiency: np.ndarray
    top_score: np.ndarray
    second_score: np.ndarray
    category: np.ndarray
    entrant_rank: np.ndarray
    quality: np.ndarray
    eligible: np.ndarray
    spend: np.ndarray | None = None


@dataclass(frozen=True)
class AuctionRecord:
    t: int
    day: int
    result: AuctionResult
    quality_scores: Mapping[str, float]
    spend: Mapping[str, float] | None = None


@dataclass(eq=False)
class Trajectory:
    keyword_id: str
    replication: int
    policy_label: str
    ad_ids: tuple[str, ...]
    horizon: int
    auctions_per_day: int
    decomposition: np.ndarray
    efficiency: float
    allocated: int
    efficient_auctions: int
    entrant_impressions: int
    thickness_sum: float
    thickness_count: int
    initial_impressions: np.ndarray
    initial_conversions: np.ndarray
    impressions: np.ndarray
    conversions: np.ndarray
    daily_spend: np.ndarray
    valuations: np.ndarray
    true_cvrs: np.ndarray
    entrant_mask: np.ndarray
    reserve_score: float = 0.0
    outside_validity: bool = False
    auctions: AuctionColumns | None = None

    @property
    def revenue(self) -> float:
        return math.fsum(self.decomposition)

    @property
    def efficient_allocation_rate(self) -> float:
        return self.efficient_auctions / self.horizon

    @property
    def wins(self) -> np.ndarray:
        return self.impressions - self.initial_impressions

    @property
    def days(self) -> int:
        return self.daily_spend.shape[0]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.keyword_id}|{self.replication}|{self.policy_label}".encode())
        for arr in (self.decomposition, np.array([self.efficiency]), self.impressions,
                    self.conversions, self.daily_spend):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.auctions is not None:
            for name in ("winner", "price", "converted", "revenue", "quality"):
                h.update(np.ascontiguousarray(getattr(self.auctions, name)).tobytes())
        return h.hexdigest()

    @property
    def records(self) -> list[AuctionRecord]:
        if self.auctions is None:
            from .errors import InsufficientDetailError

            raise InsufficientDetailError("trajectory was run with record_level='aggregate'")
        a = self.auctions
        ids = self.ad_ids
        ent = {ids[j] for j in np.flatnonzero(self.entrant_mask)}
        out = []
        for t in range(self.horizon):
            part = np.flatnonzero(a.eligible[t])
            q = {ids[j]: float(a.quality[t, j]) for j in part}
            order = sorted(part, key=lambda j: (-(self.valuations[j] * a.quality[t, j]), ids[j]))
            w = int(a.winner[t])
            ps = int(a.price_setter[t])
            res = AuctionResult(
                winner=ids[w] if w >= 0 else None,
                price_per_conversion=float(a.price[t]),
                converted=bool(a.converted[t]),
                revenue=float(a.revenue[t]),
                efficiency=float(a.efficiency[t]),
                ranking=tuple(ids[j] for j in order),
                entrant_rank=next((i + 1 for i, j in enumerate(order) if ids[j] in ent), None),
                price_setter=ids[ps] if ps >= 0 else None,
            )
            spend = None if a.spend is None else {ids[j]: float(a.spend[t, j]) for j in range(len(ids))}
            out.append(AuctionRecord(t, t // self.auctions_per_day, res, q, spend))
        return out

    def beliefs_before(self) -> tuple[np.ndarray, np.ndarray]:
        """Impressions and conversions of every ad at the start of each auction."""
        if self.auctions is None:
            from .errors import InsufficientDetailError

            raise InsufficientDetailError("trajectory was run with record_level='aggregate'")
        a = self.auctions
        n = len(self.ad_ids)
        won = np.zeros((self.horizon, n), dtype=np.int64)
        hit = a.winner >= 0
        won[np.flatnonzero(hit), a.winner[hit]] = 1
        conv = won * a.converted[:, None]
        imp = self.initial_impressions + np.vstack([np.zeros((1, n), np.int64), np.cumsum(won, 0)[:-1]])
        cnv = self.initial_conversions + np.vstack([np.zeros((1, n), np.int64), np.cumsum(conv, 0)[:-1]])
        return imp, cnv


# --------------------------------------------------------------------------
# Seeding
# --------------------------------------------------------------------------

def keyword_key(keyword_id: str) -> int:
    return int.from_bytes(hashlib.sha256(keyword_id.encode("utf-8")).digest()[:4], "big")


def replication_seed(master_seed: int, keyword_id: str, replication: int) -> np.random.SeedSequence:
    """Root seed of one (keyword, replication) trajectory."""
    return np.random.SeedSequence(master_seed, spawn_key=(keyword_key(keyword_id), replication))


def _streams(seed: np.random.SeedSequence | int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    base = tuple(seed.spawn_key)
    return (
        np.random.SeedSequence(seed.entropy, spawn_key=base + (0,)),
        np.random.SeedSequence(seed.entropy, spawn_key=base + (1,)),
    )


@dataclass(frozen=True)
class Lane:
    policy: ExplorationPolicy
    replication: int
    seed: np.random.SeedSequence


# --------------------------------------------------------------------------
# Validity region
# --------------------------------------------------------------------------

def ts_outside_validity(policy: TSPolicy, market: KeywordMarket) -> bool:
    a0, b0 = policy_prior_arrays(policy, market.ad_ids, market.keyword_id)
    return bool(np.any(a0 / (a0 + b0) > DATA_PRIOR_MEAN * (1 + 1e-12)))


def _check_ts_validity(policy: ExplorationPolicy, market: KeywordMarket, allow: bool) -> bool:
    if not isinstance(policy, TSPolicy):
        return False
    outside = ts_outside_validity(policy, market)
    if outside and not allow:
        raise ValidityRegionError(
            f"{policy.label()} has a prior mean above {DATA_PRIOR_MEAN} on keyword "
            f"{market.keyword_id}; pass allow_exploratory to override"
        )
    return outside


def entrant_impression_share(trajectories: Iterable[Trajectory]) -> float:
    ent = alloc = 0
    for tr in trajectories:
        ent += tr.entrant_impressions
        alloc += tr.allocated
    return ent / alloc if alloc else 0.0


def check_ucb_validity(trajectories: Sequence[Trajectory], config: SimulationConfig) -> None:
    """Raise (or tag, under override) UCB runs that over-explore entrants."""
    if not isinstance(config.policy, UCBPolicy):
        return
    share = entrant_impression_share(trajectories)
    if share > DATA_ENTRANT_SHARE:
        if not config.allow_exploratory:
            raise ValidityRegionError(
                f"{config.policy.label()} gives entrants {share:.3f} of impressions "
                f"(> {DATA_ENTRANT_SHARE}); pass allow_exploratory to override"
            )
        for tr in trajectories:
            tr.outside_validity = True


# --------------------------------------------------------------------------
# Batch kernel
# --------------------------------------------------------------------------

def _cap_vector(market: KeywordMarket, config: SimulationConfig, caps: Mapping[str, float] | None) -> np.ndarray:
    out = np.full(market.n_ads, np.inf)
    for j, a in enumerate(market.advertisers):
        if caps is not None and a.ad_id in caps:
            out[j] = caps[a.ad_id]
        elif config.daily_caps is not None and (market.keyword_id, a.ad_id) in config.daily_caps:
            out[j] = config.daily_caps[(market.keyword_id, a.ad_id)]
        elif a.daily_cap is not None:
            out[j] = a.daily_cap
    return out


def _impression_cap_vector(market: KeywordMarket, config: SimulationConfig) -> np.ndarray | None:
    if not config.impression_caps:
        return None
    out = np.full(market.n_ads, np.iinfo(np.int64).max, dtype=np.int64)
    for j, ad in enumerate(market.ad_ids):
        cap = config.impression_caps.get((market.keyword_id, ad))
        if cap is not None:
            out[j] = cap
    return out


def run_lanes(
    market: KeywordMarket,
    lanes: Sequence[Lane],
    config: SimulationConfig,
    caps: Mapping[str, float] | None = None,
) -> list[Trajectory]:
    """Simulate several lanes (policy, replication, seed) of one keyword.

    Budget caps apply when ``config.budget_caps_enabled``.
    """
    if not lanes:
        return []
    outside = [_check_ts_validity(l.policy, market, config.allow_exploratory) for l in lanes]
    record = config.record_level == "per-auction"

    n, T = market.n_ads, market.horizon
    ptr, flat = _participation_csr(market)
    i0, c0 = config.warm_start.initial_counts(market)
    cap_vec = _cap_vector(market, config, caps) if config.budget_caps_enabled else None
    imp_cap = _impression_cap_vector(market, config)
    capped = cap_vec is not None
    cap_arr = cap_vec if capped else np.full(n, np.inf)
    imp_arr = imp_cap if imp_cap is not None else np.zeros(n, dtype=np.int64)
    empty1 = np.zeros(0)
    empty2 = np.zeros((0, 0))

    out = []
    for lane, outside_l in zip(lanes, outside):
        if lane.policy.kind == "ts":
            a0, b0 = policy_prior_arrays(lane.policy, market.ad_ids, market.keyword_id)
            rho = 0.0
        else:
            a0 = b0 = np.zeros(n)
            rho = float(lane.policy.rho)
        score_ss, conv_ss = _streams(lane.seed)
        gen = np.random.Generator(np.random.PCG64(score_ss))
        conv_u = np.random.Generator(np.random.PCG64(conv_ss)).random(T)
        I = i0.copy()
        C = c0.copy()
        facc = np.zeros(_kernel.N_FACC)
        iacc = np.zeros(_kernel.N_IACC, dtype=np.int64)
        daily = np.zeros((market.days, n))
        if record:
            cols = AuctionColumns(
                winner=np.full(T, -1, dtype=np.int64),
                price_setter=np.full(T, UNALLOCATED, dtype=np.int64),
                price=np.zeros(T),
                converted=np.zeros(T, dtype=bool),
                revenue=np.zeros(T),
                efficiency=np.zeros(T),
                top_score=np.full(T, np.nan),
                second_score=np.full(T, np.nan),
                category=np.full(T, -1, dtype=np.int8),
                entrant_rank=np.zeros(T, dtype=np.int64),
                quality=np.full((T, n), np.nan),
                eligible=np.zeros((T, n), dtype=bool),
                spend=np.zeros((T, n)) if capped else None,
            )
            rec = (cols.winner, cols.price_setter, cols.price, cols.converted, cols.revenue,
                   cols.efficiency, cols.top_score, cols.second_score, cols.category,
                   cols.entrant_rank, cols.quality, cols.eligible,
                   cols.spend if capped else empty2)
        else:
            cols = None
            i64 = np.zeros(0, dtype=np.int64)
            rec = (i64, i64, empty1, np.zeros(0, dtype=bool), empty1, empty1, empty1, empty1,
                   np.zeros(0, dtype=np.int8), i64, empty2, np.zeros((0, 0), dtype=bool), empty2)
        _kernel.simulate_lane(
            gen, conv_u, ptr, flat, market.valuations, market.true_cvrs, market.entrant_mask,
            float(market.reserve_score), market.auctions_per_day,
            lane.policy.kind == "ts", a0, b0, rho,
            I, C, cap_arr, capped, imp_arr, imp_cap is not None,
            facc, iacc, daily, record, *rec,
        )
        out.append(Trajectory(
            keyword_id=market.keyword_id,
            replication=lane.replication,
            policy_label=lane.policy.label(),
            ad_ids=market.ad_ids,
            horizon=T,
            auctions_per_day=market.auctions_per_day,
            decomposition=facc[:3].copy(),
            efficiency=float(facc[_kernel.A_EFF]),
            allocated=int(iacc[_kernel.A_NALLOC]),
            efficient_auctions=int(iacc[_kernel.A_NEFF]),
            entrant_impressions=int(iacc[_kernel.A_NENT]),
            thickness_sum=float(facc[_kernel.A_TH]),
            thickness_count=int(iacc[_kernel.A_NTH]),
            initial_impressions=i0.copy(),
            initial_conversions=c0.copy(),
            impressions=I,
            conversions=C,
            daily_spend=daily,
            valuations=market.valuations,
            true_cvrs=market.true_cvrs,
            entrant_mask=market.entrant_mask,
            reserve_score=float(market.reserve_score),
            outside_validity=outside_l,
            auctions=cols,
        ))
    return out


def _participation_csr(market: KeywordMarket) -> tuple[np.ndarray, np.ndarray]:
    idx = market.participant_index
    ptr = np.zeros(len(idx) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(p) for p in idx])
    flat = np.concatenate(idx).astype(np.int64) if idx else np.zeros(0, dtype=np.int64)
    return ptr, flat


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------

def simulate_keyword(
    market: KeywordMarket,
    config: SimulationConfig,
    replication_seed: np.random.SeedSequence | int | None = None,
    replication: int = 0,
) -> Trajectory:
    """One trajectory of ``market`` under ``config.policy``.

    Without ``replication_seed`` the seed is derived from
    ``config.master_seed``, the keyword id and ``replication``. Budget caps are
    honoured only when ``config.budget_caps_enabled``.
    """
    seed = replication_seed if replication_seed is not None else replication_seed_for(config, market, replication)
    return run_lanes(market, [Lane(config.policy, replication, seed)], config)[0]


def replication_seed_for(config: SimulationConfig, market: KeywordMarket, replication: int) -> np.random.SeedSequence:
    return replication_seed(config.master_seed, market.keyword_id, replication)


def simulate_with_caps(
    market: KeywordMarket,
    config: SimulationConfig,
    caps: Mapping[str, float] | None = None,
    replication_seed: np.random.SeedSequence | int | None = None,
    replication: int = 0,
) -> Trajectory:
    """Like :func:`simulate_keyword` with daily budget caps enforced.

    ``caps`` maps ad_id to cap and overrides ``config.daily_caps`` and the
    profiles' ``daily_cap``. An ad stays eligible while a conversion payment
    fits in its remaining daily budget. A payment that would overshoot is
    billed only the remaining budget and removes the ad from the keyword
    until the next day; beliefs carry over unchanged.
    """
    config = replace(config, budget_caps_enabled=True)
    seed = replication_seed if replication_seed is not None else replication_seed_for(config, market, replication)
    return run_lanes(market, [Lane(config.policy, replication, seed)], config, caps)[0]


def _simulate_market(args) -> list[Trajectory]:
    market, config = args
    lanes = [
        Lane(config.policy, r, replication_seed(config.master_seed, market.keyword_id, r))
        for r in range(config.replications)
    ]
    return run_lanes(market, lanes, config)


def map_markets(fn, items: Sequence, jobs: int = 1) -> list:
    """Order-preserving map, optionally over a process pool."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def simulate_all(markets: Sequence[KeywordMarket], config: SimulationConfig, jobs: int = 1) -> list[Trajectory]:
    """All keywords times ``config.replications``, keyword-major order."""
    results = map_markets(_simulate_market, [(m, config) for m in markets], jobs)
    trajectories = [tr for group in results for tr in group]
    check_ucb_validity(trajectories, config)
    return trajectories


def derive_caps(reference: Iterable[Trajectory]) -> dict[tuple[str, str], float]:
    """Per (keyword_id, ad_id): the largest single-day spend in ``reference``.

    With several replications the maximum runs over all of them, so the caps
    never bind on any reference replication. Ads that never paid get cap 0,
    which removes them for the day at their first paid conversion; they are
    listed in a warning.
    """
    caps: dict[tuple[str, str], float] = {}
    for tr in reference:
        day_max = tr.daily_spend.max(axis=0) if tr.daily_spend.size else np.zeros(len(tr.ad_ids))
        for ad, x in zip(tr.ad_ids, day_max):
            key = (tr.keyword_id, ad)
            caps[key] = max(caps.get(key, 0.0), float(x))
    zero = sorted(k for k, v in caps.items() if v == 0.0)
    if zero:
        shown = ", ".join(f"{k}/{a}" for k, a in zero[:20])
        more = f" (+{len(zero) - 20} more)" if len(zero) > 20 else ""
        warnings.warn(f"{len(zero)} ads never paid and get a zero cap: {shown}{more}", stacklevel=2)
    return caps
