"""Quality scores, the single-slot second-price rule, and belief updating.

Everything here is scalar and pure given an explicit random generator; the
batched simulator in :mod:`auction_bandit.engine` re-implements the same rules
over arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Mapping, NamedTuple, Sequence, Union

import numpy as np

from .errors import ContractViolation, UndefinedPaymentError

# Key used for the unallocated outcome in allocation-probability maps.
UNALLOCATED = None

# Prior mean of the logged policy, Beta(1, 9).
DATA_PRIOR_MEAN = 0.1


@dataclass(frozen=True)
class BeliefState:
    impressions: int = 0
    conversions: int = 0

    def __post_init__(self):
        if not 0 <= self.conversions <= self.impressions:
            raise ContractViolation(
                f"belief needs 0 <= conversions <= impressions, got C={self.conversions}, I={self.impressions}"
            )

    def beta_parameters(self, prior_alpha: float, prior_beta: float) -> tuple[float, float]:
        return (prior_alpha + self.conversions, prior_beta + self.impressions - self.conversions)


PriorFn = Union[float, Callable[[str, str], float]]


@dataclass(frozen=True)
class KeywordPrior:
    """Prior parameter looked up per keyword, with a fallback value."""

    values: Mapping[str, float]
    default: float

    def __call__(self, ad_id: str, keyword_id: str) -> float:
        return self.values.get(keyword_id, self.default)


@dataclass(frozen=True)
class TSPolicy:
    """Thompson-sampling exploration: Beta(alpha0(a, k), beta0(a, k)) priors.

    Either prior may be a constant or a callable ``f(ad_id, keyword_id)``.
    """

    prior_alpha: PriorFn = 1.0
    prior_beta: PriorFn = 9.0

    kind = "ts"

    @classmethod
    def from_prior_mean(cls, mean: float, alpha: float = 1.0) -> "TSPolicy":
        if not 0 < mean < 1:
            raise ValueError(f"prior mean must lie in (0, 1), got {mean}")
        return cls(alpha, alpha / mean - alpha)

    @classmethod
    def per_keyword(cls, beta_by_keyword: Mapping[str, float], default_beta: float = 9.0, alpha: float = 1.0) -> "TSPolicy":
        return cls(alpha, KeywordPrior(dict(beta_by_keyword), default_beta))

    def priors(self, ad_id: str, keyword_id: str) -> tuple[float, float]:
        a = self.prior_alpha(ad_id, keyword_id) if callable(self.prior_alpha) else self.prior_alpha
        b = self.prior_beta(ad_id, keyword_id) if callable(self.prior_beta) else self.prior_beta
        if not (a > 0 and b > 0):
            raise ContractViolation(f"priors must be positive, got ({a}, {b}) for ({ad_id}, {keyword_id})")
        return float(a), float(b)

    @property
    def prior_mean(self) -> float | None:
        """Mean of a uniform prior; None when priors vary by ad or keyword."""
        if callable(self.prior_alpha) or callable(self.prior_beta):
            return None
        return self.prior_alpha / (self.prior_alpha + self.prior_beta)

    def label(self) -> str:
        m = self.prior_mean
        return f"ts(mean={m!r})" if m is not None else "ts(custom)"

    def describe(self) -> dict:
        def _d(p):
            if isinstance(p, KeywordPrior):
                return {"per_keyword": dict(p.values), "default": p.default}
            return p if not callable(p) else repr(p)
        return {"kind": "ts", "prior_alpha": _d(self.prior_alpha), "prior_beta": _d(self.prior_beta)}


@dataclass(frozen=True)
class UCBPolicy:
    rho: float = 0.0

    kind = "ucb"

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")

    def label(self) -> str:
        return f"ucb(rho={self.rho!r})"

    def describe(self) -> dict:
        return {"kind": "ucb", "rho": self.rho}


ExplorationPolicy = Union[TSPolicy, UCBPolicy]


@dataclass(frozen=True)
class ScoredBid:
    ad_id: str
    bid: float
    quality_score: float

    @property
    def combined_score(self) -> float:
        return self.bid * self.quality_score


class Allocation(NamedTuple):
    winner: str
    runner_up_score: float
    # ad whose score sets the price; None when the reserve does
    price_setter: str | None


@dataclass(frozen=True)
class AuctionResult:
    winner: str | None
    price_per_conversion: float
    converted: bool
    revenue: float
    efficiency: float
    ranking: tuple[str, ...]
    entrant_rank: int | None = None
    price_setter: str | None = None


def ts_quality_score(belief: BeliefState, prior_alpha: float, prior_beta: float, rng: np.random.Generator) -> float:
    """One Thompson draw from Beta(prior_alpha + C, prior_beta + I - C)."""
    if not (prior_alpha > 0 and prior_beta > 0):
        raise ContractViolation(f"priors must be positive, got ({prior_alpha}, {prior_beta})")
    a, b = belief.beta_parameters(prior_alpha, prior_beta)
    return float(rng.beta(a, b))


def ucb_quality_score(belief: BeliefState, rho: float, t: float) -> float:
    """Empirical rate C/(I+1) plus the bonus rho*sqrt(log(t+1)/(I+1))."""
    if t < 0:
        raise ContractViolation(f"auction index must be >= 0, got {t}")
    n = belief.impressions + 1
    return belief.conversions / n + rho * math.sqrt(math.log(t + 1) / n)


def ranking(scored: Sequence[ScoredBid]) -> list[ScoredBid]:
    """Bids by combined score, descending; ties go to the smaller ad_id."""
    return sorted(scored, key=lambda s: (-s.combined_score, s.ad_id))


def allocate(scored: Sequence[ScoredBid], reserve_score: float) -> Allocation | None:
    """Single-slot allocation against a reserve pseudo-bidder.

    The pseudo-bidder scores ``reserve_score`` and loses ties to real bidders.
    A winner needs a strictly positive combined score, since a zero quality
    score leaves the per-conversion price undefined. Returns None when the
    slot stays unallocated.
    """
    if not scored:
        raise ContractViolation("allocate needs at least one scored bid")
    order = ranking(scored)
    top = order[0]
    if not (top.combined_score >= reserve_score and top.combined_score > 0):
        return None
    if len(order) > 1 and order[1].combined_score >= reserve_score:
        return Allocation(top.ad_id, order[1].combined_score, order[1].ad_id)
    return Allocation(top.ad_id, float(reserve_score), None)


def payment(runner_up_score: float, winner_quality: float, tie_wins: bool = True) -> float:
    """Per-conversion price: the smallest bid that keeps the winner on top.

    This is ``runner_up_score / winner_quality`` moved by at most a few ulps so
    that, in floating point, bidding the price still wins (ties count when
    ``tie_wins``) while the next smaller float loses. No bid that wins can
    therefore pay less than the price.
    """
    if not winner_quality > 0:
        raise UndefinedPaymentError(f"winner quality must be > 0, got {winner_quality}")
    if not runner_up_score > 0:
        return 0.0
    return _critical_bid(runner_up_score, winner_quality, tie_wins)


def _critical_bid(r: float, q: float, tie_wins: bool) -> float:
    def wins(b):
        s = b * q
        return s > r or (tie_wins and s == r)

    p = r / q
    while not wins(p):
        p = math.nextafter(p, math.inf)
    while wins(math.nextafter(p, -math.inf)):
        p = math.nextafter(p, -math.inf)
    return p


def update_belief(belief: BeliefState, won: bool, converted: bool) -> BeliefState:
    if converted and not won:
        raise ContractViolation("a conversion requires a won impression")
    if not won:
        return belief
    return BeliefState(belief.impressions + 1, belief.conversions + int(converted))


def settle(
    scored: Sequence[ScoredBid],
    reserve_score: float,
    converted: bool,
    entrants: frozenset[str] | set[str] = frozenset(),
) -> AuctionResult:
    """Allocate, price and book one auction given its conversion outcome.

    Bids are taken as valuations (truthful bidding).
    """
    order = ranking(scored)
    names = tuple(s.ad_id for s in order)
    ent_rank = next((i + 1 for i, n in enumerate(names) if n in entrants), None)
    alloc = allocate(scored, reserve_score)
    if alloc is None:
        if converted:
            raise ContractViolation("conversion reported for an unallocated auction")
        return AuctionResult(None, 0.0, False, 0.0, 0.0, names, ent_rank)
    win = order[0]
    # ties go to the smaller ad_id, so a tie with the price setter counts as a win only then
    tie_wins = alloc.price_setter is None or win.ad_id < alloc.price_setter
    price = payment(alloc.runner_up_score, win.quality_score, tie_wins)
    return AuctionResult(
        alloc.winner, price, bool(converted),
        price if converted else 0.0, win.bid if converted else 0.0,
        names, ent_rank, alloc.price_setter,
    )


def _winner_index(scores: np.ndarray, reserve_score: float) -> np.ndarray:
    """Row-wise winner column, -1 when unallocated. Columns must be in ad_id order."""
    w = scores.argmax(axis=-1)
    top = np.take_along_axis(scores, w[..., None], axis=-1)[..., 0]
    return np.where((top >= reserve_score) & (top > 0), w, -1)


def allocation_probability(
    bids: Mapping[str, float],
    beliefs: Mapping[str, BeliefState],
    policy: ExplorationPolicy,
    reserve_score: float,
    mc_samples: int,
    rng: np.random.Generator,
    keyword_id: str = "",
    t: int | None = None,
) -> dict[Hashable, float]:
    """Monte-Carlo win probability of each ad, plus ``UNALLOCATED`` mass.

    For TS this averages the winner indicator over ``mc_samples`` independent
    sets of quality draws. UCB scores are deterministic and need the auction
    index ``t``; the result is then a point mass.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    ads = sorted(bids)
    if not ads:
        return {UNALLOCATED: 1.0}
    b = np.array([bids[a] for a in ads], dtype=float)
    if isinstance(policy, UCBPolicy):
        if t is None:
            raise ValueError("UCB allocation needs the auction index t")
        q = np.array([ucb_quality_score(beliefs[a], policy.rho, t) for a in ads])
        w = _winner_index((b * q)[None, :], reserve_score)
        counts = np.bincount(w + 1, minlength=len(ads) + 1).astype(float)
        n = 1
    else:
        params = np.array([
            beliefs[a].beta_parameters(*policy.priors(a, keyword_id)) for a in ads
        ])
        q = rng.beta(params[:, 0], params[:, 1], size=(mc_samples, len(ads)))
        w = _winner_index(b * q, reserve_score)
        counts = np.bincount(w + 1, minlength=len(ads) + 1).astype(float)
        n = mc_samples
    out: dict[Hashable, float] = {a: counts[i + 1] / n for i, a in enumerate(ads)}
    out[UNALLOCATED] = counts[0] / n
    return out


def policy_prior_arrays(policy: TSPolicy, ad_ids: Sequence[str], keyword_id: str) -> tuple[np.ndarray, np.ndarray]:
    pri = np.array([policy.priors(a, keyword_id) for a in ad_ids], dtype=float).reshape(-1, 2)
    return pri[:, 0], pri[:, 1]
