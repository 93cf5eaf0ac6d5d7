"""File formats: per-auction trajectory logs, result tables and checksums.

Every numeric cell is written with ``repr`` so files round-trip exactly and
are byte-stable across platforms.
"""

from __future__ import annotations

import csv
import hashlib
import os
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .engine import Trajectory
from .errors import InsufficientDetailError
from .market import LOG_COLUMNS, OPTIONAL_LOG_COLUMNS

OUTCOME_COLUMNS = (
    "replication", "day", "quality_score", "combined_score", "won", "converted",
    "price_per_conversion", "revenue", "efficiency",
)
TRAJECTORY_LOG_COLUMNS = LOG_COLUMNS + OPTIONAL_LOG_COLUMNS + OUTCOME_COLUMNS


def trajectory_log_frame(trajectories: Iterable[Trajectory]) -> pd.DataFrame:
    """One row per (keyword, replication, auction, participating ad).

    ``impressions``/``conversions`` hold the ad's belief counts just before
    the auction; ``won``/``converted`` the outcome; ``revenue`` and
    ``efficiency`` are non-zero only on the winning row of a converted
    auction. Ads excluded by a budget cap do not appear.
    """
    frames = []
    for tr in trajectories:
        a = tr.auctions
        if a is None:
            raise InsufficientDetailError("trajectory logs need record_level='per-auction'")
        imp, conv = tr.beliefs_before()
        t_idx, j_idx = np.nonzero(a.eligible)
        won = a.winner[t_idx] == j_idx
        q = a.quality[t_idx, j_idx]
        v = tr.valuations[j_idx]
        frames.append(pd.DataFrame({
            "keyword_id": tr.keyword_id,
            "auction_index": t_idx,
            "ad_id": np.asarray(tr.ad_ids, dtype=object)[j_idx],
            "bid": v,
            "true_cvr": tr.true_cvrs[j_idx],
            "entrant": tr.entrant_mask[j_idx].astype(int),
            "reserve_score": tr.reserve_score,
            "daily_cap": np.nan,
            "auctions_per_day": tr.auctions_per_day,
            "impressions": imp[t_idx, j_idx],
            "conversions": conv[t_idx, j_idx],
            "replication": tr.replication,
            "day": t_idx // tr.auctions_per_day,
            "quality_score": q,
            "combined_score": v * q,
            "won": won.astype(int),
            "converted": (won & a.converted[t_idx]).astype(int),
            "price_per_conversion": np.where(won, a.price[t_idx], 0.0),
            "revenue": np.where(won, a.revenue[t_idx], 0.0),
            "efficiency": np.where(won, a.efficiency[t_idx], 0.0),
        }))
    if not frames:
        return pd.DataFrame(columns=list(TRAJECTORY_LOG_COLUMNS))
    return pd.concat(frames, ignore_index=True)[list(TRAJECTORY_LOG_COLUMNS)]


def _cell(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if np.isnan(x) else repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def write_table(rows: Iterable[Mapping[str, Any]] | pd.DataFrame, path: str | os.PathLike, columns: Sequence[str] | None = None) -> None:
    """CSV with a header row and full-precision numbers."""
    if isinstance(rows, pd.DataFrame):
        columns = list(columns or rows.columns)
        records = rows[columns].itertuples(index=False, name=None)
    else:
        rows = list(rows)
        columns = list(columns or (rows[0].keys() if rows else ()))
        records = ([r.get(c) for c in columns] for r in rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow([_cell(x) for x in rec])


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
