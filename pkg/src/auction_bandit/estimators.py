"""Valuation and conversion-rate estimators over auction logs.

Logs are per-bidder rows (one per keyword, auction and participating ad) as
produced by :func:`auction_bandit.io.trajectory_log_frame`. Columns used:

* ``keyword_id``, ``auction_index``, ``ad_id``, ``bid``
* ``won`` and ``converted`` (1 on the winning row of a converted auction)
* ``impressions``, ``conversions`` and ``reserve_score`` for propensities
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .engine import keyword_key
from .errors import UnusableLogError
from .mechanisms import (
    BeliefState,
    ExplorationPolicy,
    TSPolicy,
    UCBPolicy,
    allocation_probability,
)

PROPENSITY_FLOOR = 1e-3
DEFAULT_MC_SAMPLES = 10_000

Key = tuple[str, str]


def _require(log: pd.DataFrame, columns, what: str) -> None:
    missing = [c for c in columns if c not in log.columns]
    if missing:
        raise UnusableLogError(f"{what} needs log columns {missing}")


def estimate_valuations(
    log: pd.DataFrame,
    variance_threshold: float | None = None,
    prior: tuple[float, float] = (1.0, 9.0),
) -> dict[Key, float]:
    """Mean bid per (keyword_id, ad_id) over the auctions the ad entered.

    With ``variance_threshold`` only rows whose Beta posterior variance
    (from ``prior`` and the row's impressions/conversions) is at most the
    threshold are averaged; pairs with no such rows are dropped.
    """
    _require(log, ("keyword_id", "ad_id", "bid"), "estimate_valuations")
    df = log
    if variance_threshold is not None:
        _require(log, ("impressions", "conversions"), "variance filter")
        a = prior[0] + df["conversions"].to_numpy(float)
        b = prior[1] + df["impressions"].to_numpy(float) - df["conversions"].to_numpy(float)
        var = a * b / ((a + b) ** 2 * (a + b + 1))
        df = df[var <= variance_threshold]
    out = {}
    for (kw, ad), bids in df.groupby(["keyword_id", "ad_id"], sort=True)["bid"]:
        out[(kw, ad)] = math.fsum(bids.to_numpy(float)) / len(bids)
    return out


def win_counts(log: pd.DataFrame) -> pd.DataFrame:
    """Participations, wins and conversions per (keyword_id, ad_id)."""
    _require(log, ("keyword_id", "ad_id", "won", "converted"), "win_counts")
    g = log.assign(won=log["won"].astype(int), converted=log["converted"].astype(int) * log["won"].astype(int))
    return g.groupby(["keyword_id", "ad_id"], sort=True).agg(
        participations=("won", "size"), wins=("won", "sum"), conversions=("converted", "sum")
    )


def estimate_cvr_sample(log: pd.DataFrame) -> dict[Key, float]:
    """Conversions per win for every pair with at least one win."""
    c = win_counts(log)
    c = c[c["wins"] > 0]
    return {k: float(r.conversions / r.wins) for k, r in zip(c.index, c.itertuples())}


@dataclass(frozen=True)
class IPSResult:
    estimates: dict[Key, float]
    # per pair: participations, wins, conversions, propensities, clipped, min_propensity
    diagnostics: pd.DataFrame = field(repr=False)

    @property
    def clipped_rows(self) -> int:
        return int(self.diagnostics["clipped"].sum())


def _auction_rng(seed: int, keyword_id: str, auction_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(keyword_key(keyword_id), int(auction_index))))


def estimate_cvr_ips(
    log: pd.DataFrame,
    policy: ExplorationPolicy,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    floor: float = PROPENSITY_FLOOR,
) -> IPSResult:
    """Inverse-propensity conversion rates under the logging ``policy``.

    For pair (a, k) the estimate is the sum over converted wins of
    1/pi(a | bids, beliefs) divided by the number of auctions a entered.
    Propensities are Monte-Carlo win probabilities recomputed from every
    participant's bid and logged belief counts; draws for auction t of
    keyword k use a stream keyed by (seed, k, t), so results do not depend
    on row order. Propensities below ``floor`` are raised to ``floor`` and
    counted as clipped.
    """
    need = ("keyword_id", "auction_index", "ad_id", "bid", "won", "converted",
            "impressions", "conversions", "reserve_score")
    _require(log, need, "estimate_cvr_ips")
    if log[list(need)].isna().any().any():
        raise UnusableLogError("estimate_cvr_ips needs every row's bid, belief counts and outcome")
    counts = win_counts(log)
    weight: dict[Key, float] = {k: 0.0 for k in counts.index}
    n_prop = dict.fromkeys(counts.index, 0)
    n_clip = dict.fromkeys(counts.index, 0)
    min_p = dict.fromkeys(counts.index, math.inf)

    kw_col = log["keyword_id"].to_numpy(object)
    t_col = log["auction_index"].to_numpy(np.int64)
    ad_col = log["ad_id"].to_numpy(object)
    bid_col = log["bid"].to_numpy(float)
    imp_col = log["impressions"].to_numpy(np.int64)
    conv_col = log["conversions"].to_numpy(np.int64)
    won_col = log["won"].to_numpy(np.int64) == 1
    res_col = log["reserve_score"].to_numpy(float)
    hit = won_col & (log["converted"].to_numpy(np.int64) == 1)
    keys = sorted(set(zip(kw_col[hit], t_col[hit].tolist())))
    groups = log.groupby(["keyword_id", "auction_index"], sort=False).indices if keys else {}
    for kw, t in keys:
        rows = np.sort(groups[(kw, t)])
        bids = dict(zip(ad_col[rows], bid_col[rows]))
        beliefs = {a: BeliefState(int(i), int(c)) for a, i, c in zip(ad_col[rows], imp_col[rows], conv_col[rows])}
        winner = ad_col[rows[won_col[rows]][0]]
        ucb_t = int(t) + 1 if isinstance(policy, UCBPolicy) else None
        pi = allocation_probability(
            bids, beliefs, policy, float(res_col[rows[0]]), mc_samples, _auction_rng(seed, kw, t), kw, ucb_t
        )[winner]
        key = (kw, winner)
        n_prop[key] += 1
        min_p[key] = min(min_p[key], pi)
        if pi < floor:
            pi = floor
            n_clip[key] += 1
        weight[key] += 1.0 / pi

    estimates = {k: weight[k] / counts.loc[k, "participations"] for k in counts.index}
    diag = counts.copy()
    diag["propensities"] = [n_prop[k] for k in counts.index]
    diag["clipped"] = [n_clip[k] for k in counts.index]
    diag["min_propensity"] = [min_p[k] if n_prop[k] else np.nan for k in counts.index]
    diag["estimate"] = [estimates[k] for k in counts.index]
    return IPSResult(estimates, diag)


@dataclass(frozen=True)
class EstimatedPrimitives:
    valuation_hat: Mapping[Key, float]
    cvr_hat: Mapping[Key, float]
    cvr_hat_ips: Mapping[Key, float]
    support_counts: pd.DataFrame = field(repr=False)

    def to_frame(self) -> pd.DataFrame:
        df = self.support_counts.copy()
        keys = list(df.index)
        df["valuation_hat"] = [self.valuation_hat.get(k, np.nan) for k in keys]
        df["cvr_hat"] = [self.cvr_hat.get(k, np.nan) for k in keys]
        df["cvr_hat_ips"] = [self.cvr_hat_ips.get(k, np.nan) for k in keys]
        return df.reset_index()


def estimate_primitives(
    log: pd.DataFrame,
    policy: ExplorationPolicy = TSPolicy(),
    mc_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    floor: float = PROPENSITY_FLOOR,
    variance_threshold: float | None = None,
) -> EstimatedPrimitives:
    ips = estimate_cvr_ips(log, policy, mc_samples, seed, floor)
    return EstimatedPrimitives(
        valuation_hat=estimate_valuations(log, variance_threshold),
        cvr_hat=estimate_cvr_sample(log),
        cvr_hat_ips=ips.estimates,
        support_counts=ips.diagnostics.drop(columns=["estimate"]),
    )
