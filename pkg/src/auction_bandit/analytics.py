"""Market outcomes and policy experiments built on simulated trajectories.

Revenue and efficiency are reported per replication (summed over keywords),
then averaged; standard errors are over replications. Common random numbers
make grid points of a sweep paired by replication.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .engine import (
    DECOMPOSITION_LABELS,
    Lane,
    SimulationConfig,
    Trajectory,
    map_markets,
    replication_seed,
    run_lanes,
)
from .errors import InsufficientDetailError, ValidityRegionError
from .market import KeywordMarket
from .mechanisms import DATA_PRIOR_MEAN, TSPolicy

DEFAULT_PRIOR_MEANS = tuple(float(x) for x in np.logspace(-4, -1, 13))
DEFAULT_TAU_GRID = tuple(float(x) for x in np.linspace(0.0, 1.0, 21))
DEFAULT_BETA_GRID = tuple(1.0 / m - 1.0 for m in DEFAULT_PRIOR_MEANS)


def _se(x: np.ndarray) -> float:
    """Standard error of the mean of a 1-D sample; NaN below two values."""
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size >= 2 else float("nan")


# --------------------------------------------------------------------------
# Outcomes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MarketOutcome:
    keyword_id: str | None  # None for the aggregate over keywords
    replications: int
    mean_revenue: float
    mean_efficiency: float
    se_revenue: float
    se_efficiency: float
    decomposition: Mapping[str, float]
    efficient_allocation_rate: float
    outside_validity: bool = False


def _outcome(keyword_id, dec: np.ndarray, eff: np.ndarray, efficient: int, auctions: int, outside: bool) -> MarketOutcome:
    # dec: (R, 3) per-replication decomposition; revenue is its exact sum
    rev = np.array([math.fsum(row) for row in dec])
    return MarketOutcome(
        keyword_id=keyword_id,
        replications=len(rev),
        mean_revenue=float(rev.mean()),
        mean_efficiency=float(eff.mean()),
        se_revenue=float(_se(rev)),
        se_efficiency=float(_se(eff)),
        decomposition={lab: float(dec[:, i].mean()) for i, lab in enumerate(DECOMPOSITION_LABELS)},
        efficient_allocation_rate=efficient / auctions if auctions else float("nan"),
        outside_validity=outside,
    )


def compute_outcomes(trajectories: Sequence[Trajectory]) -> tuple[dict[str, MarketOutcome], MarketOutcome]:
    """Per-keyword outcomes and the aggregate over keywords.

    The aggregate sums keywords within each replication index before taking
    means, so every keyword must carry the same set of replications.
    """
    if not trajectories:
        raise ValueError("compute_outcomes needs at least one trajectory")
    by_kw: dict[str, list[Trajectory]] = {}
    for tr in trajectories:
        by_kw.setdefault(tr.keyword_id, []).append(tr)
    reps = None
    per_kw = {}
    for kw in sorted(by_kw):
        group = sorted(by_kw[kw], key=lambda t: t.replication)
        ids = tuple(t.replication for t in group)
        if reps is None:
            reps = ids
        elif ids != reps:
            raise ValueError(f"keyword {kw} has replications {ids}, expected {reps}")
        per_kw[kw] = _outcome(
            kw,
            np.array([t.decomposition for t in group]),
            np.array([t.efficiency for t in group]),
            sum(t.efficient_auctions for t in group),
            sum(t.horizon for t in group),
            any(t.outside_validity for t in group),
        )
    R = len(reps)
    dec = np.zeros((R, 3))
    eff = np.zeros(R)
    for i in range(R):
        rows = [by_kw[kw][j] for kw in sorted(by_kw) for j in range(R) if by_kw[kw][j].replication == reps[i]]
        dec[i] = [math.fsum(t.decomposition[c] for t in rows) for c in range(3)]
        eff[i] = math.fsum(t.efficiency for t in rows)
    agg = _outcome(
        None, dec, eff,
        sum(t.efficient_auctions for t in trajectories),
        sum(t.horizon for t in trajectories),
        any(t.outside_validity for t in trajectories),
    )
    return per_kw, agg


def efficient_allocation_recount(trajectory: Trajectory, reserve_score: float) -> float:
    """Brute-force efficient-allocation rate from per-auction records.

    An auction counts as efficient when the winner maximizes v*mu among the
    eligible participants, or when nobody wins and no eligible participant's
    v*mu clears the reserve.
    """
    a = trajectory.auctions
    if a is None:
        raise InsufficientDetailError("recount needs per-auction records")
    vm = trajectory.valuations * trajectory.true_cvrs
    good = 0
    for t in range(trajectory.horizon):
        part = np.flatnonzero(a.eligible[t])
        best = max((vm[j] for j in part), default=-math.inf)
        w = a.winner[t]
        if w >= 0:
            good += vm[w] == best
        else:
            good += not (best >= reserve_score and best > 0)
    return good / trajectory.horizon


# --------------------------------------------------------------------------
# Thickness
# --------------------------------------------------------------------------

THIN, MEDIUM, THICK = "thin", "medium", "thick"


@dataclass(frozen=True)
class ThicknessReport:
    thickness: Mapping[str, float]
    classes: Mapping[str, str]
    lower_cut: float
    upper_cut: float
    excluded: tuple[str, ...] = ()

    def members(self, cls: str) -> list[str]:
        return sorted(k for k, c in self.classes.items() if c == cls)

    @property
    def interquartile_range(self) -> float:
        return self.upper_cut - self.lower_cut


def classify_thickness(thickness: Mapping[str, float], excluded: Sequence[str] = ()) -> ThicknessReport:
    """Thin at or below the 25th percentile, thick at or above the 75th."""
    if not thickness:
        return ThicknessReport({}, {}, float("nan"), float("nan"), tuple(excluded))
    vals = np.array(list(thickness.values()))
    lo, hi = (float(x) for x in np.quantile(vals, [0.25, 0.75]))
    classes = {
        k: THIN if v <= lo else THICK if v >= hi else MEDIUM
        for k, v in thickness.items()
    }
    if lo == hi:
        # degenerate spread: everything sits on both cuts
        classes = {k: MEDIUM for k in thickness}
    return ThicknessReport(dict(thickness), classes, lo, hi, tuple(excluded))


def compute_thickness(source: Sequence[Trajectory] | pd.DataFrame) -> ThicknessReport:
    """Mean ratio of second-highest to highest combined score per keyword.

    ``source`` is either trajectories or a per-bidder log with columns
    ``keyword_id``, ``auction_index`` and ``combined_score`` (or ``bid`` and
    ``quality_score``). Only auctions with at least two scored bidders and a
    positive top score count. Keywords without such auctions are excluded
    with a warning.
    """
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    if isinstance(source, pd.DataFrame):
        df = source
        if "combined_score" not in df:
            if not {"bid", "quality_score"} <= set(df.columns):
                raise InsufficientDetailError("log needs combined_score or bid and quality_score columns")
            df = df.assign(combined_score=df["bid"] * df["quality_score"])
        df = df[np.isfinite(df["combined_score"])]
        for (kw, _), g in df.groupby(["keyword_id", "auction_index"], sort=True):
            s = np.sort(g["combined_score"].to_numpy())[::-1]
            counts.setdefault(kw, 0)
            sums.setdefault(kw, 0.0)
            if len(s) >= 2 and s[0] > 0:
                sums[kw] += s[1] / s[0]
                counts[kw] += 1
    else:
        for tr in source:
            sums[tr.keyword_id] = sums.get(tr.keyword_id, 0.0) + tr.thickness_sum
            counts[tr.keyword_id] = counts.get(tr.keyword_id, 0) + tr.thickness_count
    excluded = sorted(k for k in counts if counts[k] == 0)
    if excluded:
        warnings.warn(f"thickness undefined for {len(excluded)} keywords without two-bidder auctions: {excluded[:10]}", stacklevel=2)
    thickness = {k: sums[k] / counts[k] for k in sorted(counts) if counts[k] > 0}
    return classify_thickness(thickness, excluded)


# --------------------------------------------------------------------------
# Uniform prior sweep
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    prior_mean: float
    revenue: float
    revenue_se: float
    efficiency: float
    efficiency_se: float


@dataclass(eq=False)
class SweepResult:
    """Per grid point x keyword x replication outcomes of a uniform sweep."""

    prior_means: np.ndarray          # (G,)
    keyword_ids: tuple[str, ...]     # (K,)
    horizons: np.ndarray             # (K,)
    revenue: np.ndarray              # (G, K, R)
    efficiency: np.ndarray           # (G, K, R)
    decomposition: np.ndarray        # (G, K, R, 3)
    efficient_auctions: np.ndarray   # (G, K, R)
    thickness_sum: np.ndarray        # (G, K, R)
    thickness_count: np.ndarray      # (G, K, R)
    entrant_impressions: np.ndarray  # (G, K, R)
    allocated: np.ndarray            # (G, K, R)
    outside_validity: np.ndarray     # (G,)
    master_seed: int = 0

    @property
    def replications(self) -> int:
        return self.revenue.shape[2]

    @property
    def prior_betas(self) -> np.ndarray:
        return 1.0 / self.prior_means - 1.0

    def keyword_mask(self, keywords: Iterable[str] | None) -> np.ndarray:
        if keywords is None:
            return np.ones(len(self.keyword_ids), dtype=bool)
        want = set(keywords)
        return np.array([k in want for k in self.keyword_ids])

    def totals(self, keywords: Iterable[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-replication revenue and efficiency summed over keywords, shape (G, R)."""
        m = self.keyword_mask(keywords)
        return self.revenue[:, m].sum(axis=1), self.efficiency[:, m].sum(axis=1)

    def points(self, keywords: Iterable[str] | None = None) -> list[SweepPoint]:
        rev, eff = self.totals(keywords)
        return [
            SweepPoint(float(p), float(rev[g].mean()), float(_se(rev[g])), float(eff[g].mean()), float(_se(eff[g])))
            for g, p in enumerate(self.prior_means)
        ]

    def revenue_optimal(self) -> int:
        return int(self.totals()[0].mean(axis=1).argmax())

    def efficiency_optimal(self) -> int:
        return int(self.totals()[1].mean(axis=1).argmax())

    def thickness(self, grid_index: int) -> ThicknessReport:
        """Thickness measured on the trajectories of one grid point."""
        s = self.thickness_sum[grid_index].sum(axis=1)
        c = self.thickness_count[grid_index].sum(axis=1)
        excluded = [k for k, n in zip(self.keyword_ids, c) if n == 0]
        if excluded:
            warnings.warn(f"thickness undefined for {len(excluded)} keywords without two-bidder auctions", stacklevel=2)
        return classify_thickness({k: float(a / n) for k, a, n in zip(self.keyword_ids, s, c) if n > 0}, excluded)

    def entrant_share(self) -> np.ndarray:
        """Entrant impression share per grid point."""
        a = self.allocated.sum(axis=(1, 2))
        return np.where(a > 0, self.entrant_impressions.sum(axis=(1, 2)) / np.maximum(a, 1), 0.0)


def _sweep_keyword(args) -> dict[str, np.ndarray]:
    market, prior_means, config = args
    R = config.replications
    lanes = [
        Lane(TSPolicy.from_prior_mean(p), r, replication_seed(config.master_seed, market.keyword_id, r))
        for p in prior_means for r in range(R)
    ]
    out = run_lanes(market, lanes, config)
    G = len(prior_means)

    def grab(fn, shape=()):
        return np.array([fn(o) for o in out]).reshape((G, R) + shape)

    return {
        "revenue": grab(lambda o: o.revenue),
        "efficiency": grab(lambda o: o.efficiency),
        "decomposition": grab(lambda o: o.decomposition, (3,)),
        "efficient_auctions": grab(lambda o: o.efficient_auctions),
        "thickness_sum": grab(lambda o: o.thickness_sum),
        "thickness_count": grab(lambda o: o.thickness_count),
        "entrant_impressions": grab(lambda o: o.entrant_impressions),
        "allocated": grab(lambda o: o.allocated),
    }


def prior_sweep(
    markets: Sequence[KeywordMarket],
    prior_means: Sequence[float] = DEFAULT_PRIOR_MEANS,
    config: SimulationConfig = SimulationConfig(),
    jobs: int = 1,
) -> SweepResult:
    """Simulate every keyword under TS with alpha0 = 1 and each prior mean.

    All grid points share the replication seeds of ``config.master_seed``,
    so grid point ``g`` replication ``r`` is exactly the trajectory
    ``simulate_all`` would produce for that prior.
    """
    means = np.asarray(prior_means, dtype=float)
    if means.size == 0:
        raise ValueError("prior_means must be nonempty")
    if not np.all((means > 0) & (means < 1)):
        raise ValueError("prior means must lie in (0, 1)")
    outside = means > DATA_PRIOR_MEAN * (1 + 1e-12)
    if outside.any() and not config.allow_exploratory:
        raise ValidityRegionError(
            f"prior means {means[outside].tolist()} exceed {DATA_PRIOR_MEAN}; pass allow_exploratory to override"
        )
    markets = sorted(markets, key=lambda m: m.keyword_id)
    parts = map_markets(_sweep_keyword, [(m, tuple(means), config) for m in markets], jobs)

    def stack(name):
        # (K, G, R, ...) -> (G, K, R, ...)
        return np.moveaxis(np.array([p[name] for p in parts]), 0, 1)

    return SweepResult(
        prior_means=means,
        keyword_ids=tuple(m.keyword_id for m in markets),
        horizons=np.array([m.horizon for m in markets]),
        revenue=stack("revenue"),
        efficiency=stack("efficiency"),
        decomposition=stack("decomposition"),
        efficient_auctions=stack("efficient_auctions"),
        thickness_sum=stack("thickness_sum"),
        thickness_count=stack("thickness_count"),
        entrant_impressions=stack("entrant_impressions"),
        allocated=stack("allocated"),
        outside_validity=outside,
        master_seed=config.master_seed,
    )


@dataclass(frozen=True)
class GapByClass:
    """Relative revenue gap between two grid points within a keyword class."""

    cls: str
    keywords: int
    gap: float
    se: float
    per_replication: np.ndarray = field(repr=False)


def revenue_gap_by_thickness(sweep: SweepResult, report: ThicknessReport, high: int, low: int) -> dict[str, GapByClass]:
    """(revenue at grid ``high`` - revenue at ``low``) / mean revenue at ``low``, per class.

    Differences are paired by replication; the standard error is that of the
    per-replication relative gap.
    """
    out = {}
    for cls in (THIN, MEDIUM, THICK):
        kws = report.members(cls)
        rev, _ = sweep.totals(kws)
        base = rev[low].mean()
        d = (rev[high] - rev[low]) / base if base > 0 else np.full(rev.shape[1], np.nan)
        out[cls] = GapByClass(cls, len(kws), float(d.mean()), float(_se(d)), d)
    return out


# --------------------------------------------------------------------------
# Customized priors and Pareto frontiers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CustomizedPriors:
    tau: float
    beta_by_keyword: Mapping[str, float]
    revenue: float
    revenue_se: float
    efficiency: float
    efficiency_se: float
    per_replication: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)

    def policy(self, alpha: float = 1.0) -> TSPolicy:
        return TSPolicy.per_keyword(self.beta_by_keyword, alpha=alpha)


def _sweep_for_betas(markets, beta_grid, config, sweep, jobs) -> tuple[SweepResult, np.ndarray]:
    betas = np.asarray(beta_grid, dtype=float)
    if betas.size == 0:
        raise ValueError("beta_grid must be nonempty")
    if not np.all(betas > 0):
        raise ValueError("beta values must be positive")
    means = 1.0 / (1.0 + betas)
    if sweep is None:
        sweep = prior_sweep(markets, means, config, jobs)
    # map every requested beta to its grid index in the sweep
    idx = []
    for b in betas:
        hit = np.flatnonzero(np.isclose(sweep.prior_betas, b, rtol=1e-9, atol=0))
        if hit.size == 0:
            raise ValueError(f"beta {b} is not on the sweep grid")
        idx.append(int(hit[0]))
    return sweep, np.array(idx)


def _customize(sweep: SweepResult, grid_idx: np.ndarray, tau: float, normalize: bool) -> CustomizedPriors:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    rev = sweep.revenue[grid_idx]       # (B, K, R)
    eff = sweep.efficiency[grid_idx]
    v = tau * rev.mean(axis=2) + (1.0 - tau) * eff.mean(axis=2)  # (B, K)
    if normalize:
        v = v / sweep.horizons[None, :]
    betas = sweep.prior_betas[grid_idx]
    # ties go to the largest beta: scan grid points from the largest beta down
    order = np.argsort(-betas, kind="stable")
    pick = order[v[order].argmax(axis=0)]  # (K,)
    k = np.arange(len(sweep.keyword_ids))
    rev_r = rev[pick, k].sum(axis=0)
    eff_r = eff[pick, k].sum(axis=0)
    return CustomizedPriors(
        tau=float(tau),
        beta_by_keyword={kw: float(betas[p]) for kw, p in zip(sweep.keyword_ids, pick)},
        revenue=float(rev_r.mean()),
        revenue_se=float(_se(rev_r)),
        efficiency=float(eff_r.mean()),
        efficiency_se=float(_se(eff_r)),
        per_replication=(rev_r, eff_r),
    )


def optimize_customized_priors(
    markets: Sequence[KeywordMarket],
    tau: float,
    beta_grid: Sequence[float] = DEFAULT_BETA_GRID,
    config: SimulationConfig = SimulationConfig(),
    sweep: SweepResult | None = None,
    normalize: bool = True,
    jobs: int = 1,
) -> CustomizedPriors:
    """Per keyword, the grid beta maximizing tau*revenue + (1-tau)*efficiency.

    With ``normalize`` both metrics are taken per impression of the keyword.
    Achieved revenue and efficiency are evaluated on the same replications
    used for the choice. Pass a precomputed ``sweep`` covering the grid to
    avoid re-simulating.
    """
    sweep, idx = _sweep_for_betas(markets, beta_grid, config, sweep, jobs)
    return _customize(sweep, idx, tau, normalize)


@dataclass(frozen=True)
class ParetoPoint:
    tau: float | None
    prior_assignment: Mapping[str, float] | float
    revenue: float
    efficiency: float
    revenue_se: float = float("nan")
    efficiency_se: float = float("nan")
    dominated: bool = False


def pareto_filter(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Drop dominated points; the rest sorted by revenue ascending.

    A point is dominated when another is at least as good in both metrics
    and strictly better in one. Exact duplicates keep their first copy.
    """
    keep = []
    seen = set()
    for i, p in enumerate(points):
        dom = any(
            (q.revenue >= p.revenue and q.efficiency >= p.efficiency)
            and (q.revenue > p.revenue or q.efficiency > p.efficiency)
            for j, q in enumerate(points) if j != i
        )
        key = (p.revenue, p.efficiency)
        if not dom and key not in seen:
            seen.add(key)
            keep.append(p)
    return sorted(keep, key=lambda p: (p.revenue, -p.efficiency))


def check_frontier(points: Sequence[ParetoPoint]) -> None:
    """Raise ValueError unless efficiency is non-increasing in revenue."""
    for a, b in zip(points, points[1:]):
        if b.revenue < a.revenue or b.efficiency > a.efficiency:
            raise ValueError(f"frontier not monotone between {a} and {b}")


@dataclass(frozen=True)
class FrontierResult:
    customized: list[ParetoPoint]
    uniform: list[ParetoPoint]
    customized_all: list[ParetoPoint]
    uniform_all: list[ParetoPoint]

    def uniform_dominance(self, n_se: float = 1.0) -> list[tuple[ParetoPoint, bool]]:
        """For each uniform grid point: is it weakly dominated by a customized point within ``n_se``?"""
        out = []
        for u in self.uniform_all:
            ok = any(
                c.revenue >= u.revenue - n_se * u.revenue_se and c.efficiency >= u.efficiency - n_se * u.efficiency_se
                for c in self.customized_all
            )
            out.append((u, ok))
        return out


def pareto_frontier(
    markets: Sequence[KeywordMarket],
    tau_grid: Sequence[float] = DEFAULT_TAU_GRID,
    beta_grid: Sequence[float] = DEFAULT_BETA_GRID,
    config: SimulationConfig = SimulationConfig(),
    sweep: SweepResult | None = None,
    normalize: bool = True,
    jobs: int = 1,
) -> FrontierResult:
    """Customized and uniform (revenue, efficiency) curves, Pareto-filtered.

    ``*_all`` lists hold every grid point with a ``dominated`` flag set
    against the other points of the same curve.
    """
    if len(tau_grid) == 0:
        raise ValueError("tau_grid must be nonempty")
    sweep, idx = _sweep_for_betas(markets, beta_grid, config, sweep, jobs)
    cust = []
    for tau in tau_grid:
        c = _customize(sweep, idx, tau, normalize)
        cust.append(ParetoPoint(c.tau, dict(c.beta_by_keyword), c.revenue, c.efficiency, c.revenue_se, c.efficiency_se))
    pts = sweep.points()
    uni = [
        ParetoPoint(None, float(sweep.prior_betas[g]), pts[g].revenue, pts[g].efficiency,
                    pts[g].revenue_se, pts[g].efficiency_se)
        for g in idx
    ]

    def annotate(points):
        kept = {id(p) for p in pareto_filter(points)}
        return [ParetoPoint(p.tau, p.prior_assignment, p.revenue, p.efficiency, p.revenue_se,
                            p.efficiency_se, id(p) not in kept) for p in points]

    cust_all, uni_all = annotate(cust), annotate(uni)
    return FrontierResult(
        customized=[p for p in pareto_filter(cust_all) if not p.dominated],
        uniform=[p for p in pareto_filter(uni_all) if not p.dominated],
        customized_all=cust_all,
        uniform_all=uni_all,
    )


# --------------------------------------------------------------------------
# Quality-score bias
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasSeries:
    """Per-auction-index mean score bias of winners and non-winners.

    Entries are NaN where no keyword contributes (``*_count`` is zero).
    """

    winner_bias: np.ndarray
    nonwinner_bias: np.ndarray
    winner_count: np.ndarray
    nonwinner_count: np.ndarray

    def __len__(self) -> int:
        return len(self.winner_bias)

    def window_mean(self, start: float, stop: float = 1.0) -> tuple[float, float]:
        """Mean of both series over the fraction [start, stop) of the horizon."""
        n = len(self)
        sl = slice(int(math.floor(start * n)), int(math.floor(stop * n)))
        return float(np.nanmean(self.winner_bias[sl])), float(np.nanmean(self.nonwinner_bias[sl]))


def _trajectory_bias(tr: Trajectory, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = tr.auctions
    if a is None:
        raise InsufficientDetailError(
            f"bias series needs per-auction records; trajectory {tr.keyword_id} is aggregate-only"
        )
    T = tr.horizon
    dev = a.quality - mu[None, :]
    w = a.winner
    hit = np.flatnonzero(w >= 0)
    wb = np.full(T, np.nan)
    wb[hit] = dev[hit, w[hit]]
    nonw = a.eligible.copy()
    nonw[hit, w[hit]] = False
    cnt = nonw.sum(axis=1)
    total = np.where(nonw, dev, 0.0).sum(axis=1)
    nb = np.full(T, np.nan)
    ok = cnt > 0
    nb[ok] = total[ok] / cnt[ok]
    return wb, nb


def bias_series(
    trajectories: Sequence[Trajectory],
    true_cvrs: Mapping[tuple[str, str], float] | None = None,
) -> BiasSeries:
    """Winner and non-winner bias (quality score minus true CVR) over auction index.

    At each index the winner bias averages, over trajectories with a winner,
    the winner's score minus its CVR; the non-winner bias averages, over
    trajectories with at least one non-winner, the mean deviation of the
    non-winning participants. With several replications every trajectory
    counts once. ``true_cvrs`` overrides the CVRs stored on the trajectories.
    """
    if not trajectories:
        raise ValueError("bias_series needs trajectories")
    T = max(tr.horizon for tr in trajectories)
    ws, wc = np.zeros(T), np.zeros(T, dtype=np.int64)
    ns, nc = np.zeros(T), np.zeros(T, dtype=np.int64)
    for tr in trajectories:
        mu = tr.true_cvrs
        if true_cvrs is not None:
            mu = np.array([true_cvrs.get((tr.keyword_id, a), m) for a, m in zip(tr.ad_ids, tr.true_cvrs)])
        wb, nb = _trajectory_bias(tr, mu)
        h = tr.horizon
        okw, okn = ~np.isnan(wb), ~np.isnan(nb)
        ws[:h][okw] += wb[okw]
        wc[:h] += okw
        ns[:h][okn] += nb[okn]
        nc[:h] += okn
    with np.errstate(invalid="ignore", divide="ignore"):
        return BiasSeries(np.where(wc > 0, ws / wc, np.nan), np.where(nc > 0, ns / nc, np.nan), wc, nc)


def bias_by_replication(trajectories: Sequence[Trajectory]) -> dict[int, BiasSeries]:
    groups: dict[int, list[Trajectory]] = {}
    for tr in trajectories:
        groups.setdefault(tr.replication, []).append(tr)
    return {r: bias_series(g) for r, g in sorted(groups.items())}
