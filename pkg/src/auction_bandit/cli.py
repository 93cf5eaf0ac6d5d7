"""Command-line front end.

Usage::

    auction-bandit {generate,simulate,sweep,frontier,estimate,bias,caps}
        [--config PATH] [--seed N] [--out DIR] [--jobs N]
        [--allow-exploratory] [--record-level {aggregate,per-auction}]

The config is one YAML (or JSON) file; every key is optional and falls back
to ``DEFAULTS`` below. A ``manifest.json`` written by a previous run is also
accepted as ``--config`` and replays that run. Exit status is 0 on success,
2 for an invalid experiment spec and 1 for a runtime contract violation.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import __version__
from .analytics import (
    DEFAULT_PRIOR_MEANS,
    DEFAULT_TAU_GRID,
    THICK,
    THIN,
    MEDIUM,
    bias_series,
    check_frontier,
    compute_outcomes,
    pareto_frontier,
    prior_sweep,
    revenue_gap_by_thickness,
)
from .engine import (
    DATA_ENTRANT_SHARE,
    SimulationConfig,
    WarmStart,
    derive_caps,
    map_markets,
    run_lanes,
    Lane,
    replication_seed,
    simulate_all,
)
from .errors import (
    ConfigurationError,
    ContractViolation,
    LogParseError,
    ReferentialIntegrityError,
    UnusableLogError,
    ValidityRegionError,
)
from .estimators import DEFAULT_MC_SAMPLES, PROPENSITY_FLOOR, estimate_primitives
from .io import file_sha256, trajectory_log_frame, write_table
from .market import DEFAULT_GENERATOR, GeneratorConfig, generate_market, load_market, write_market_log
from .mechanisms import DATA_PRIOR_MEAN, TSPolicy, UCBPolicy

COMMANDS = ("generate", "simulate", "sweep", "frontier", "estimate", "bias", "caps")

# All defaults in one place. Generator defaults live in market.DEFAULT_GENERATOR.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "market": {"generator": {}},
    "policy": {"kind": "ts", "prior_mean": DATA_PRIOR_MEAN},
    "simulation": {
        "replications": 10,
        "warm_start": "history",
        "record_level": "aggregate",
    },
    "grids": {
        "prior_means": list(DEFAULT_PRIOR_MEANS),
        "tau": list(DEFAULT_TAU_GRID),
        "normalize": True,
    },
    "estimate": {"mc_samples": DEFAULT_MC_SAMPLES, "floor": PROPENSITY_FLOOR, "log": None},
    "caps": {"tighten": 1.0},
}


def module_defaults() -> dict[str, Any]:
    return {
        "generator": GeneratorConfig().to_dict() | {"seed": None},
        "data_prior_mean": DATA_PRIOR_MEAN,
        "data_entrant_share": DATA_ENTRANT_SHARE,
        "prior_means": list(DEFAULT_PRIOR_MEANS),
        "tau_grid": list(DEFAULT_TAU_GRID),
        "propensity_floor": PROPENSITY_FLOOR,
        "mc_samples": DEFAULT_MC_SAMPLES,
        "experiment": DEFAULTS,
    }


class SpecError(Exception):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


# --------------------------------------------------------------------------
# Spec resolution
# --------------------------------------------------------------------------

def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k != "market":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise SpecError("config", f"cannot read {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise SpecError("config", f"not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise SpecError("config", "top level must be a mapping")
    if "spec" in data and "outputs" in data:
        # a manifest: replay its resolved spec
        data = data["spec"]
    return data, p.resolve().parent


def resolve_spec(args: argparse.Namespace) -> dict:
    raw, base_dir = _read_config(args.config)
    unknown = set(raw) - set(DEFAULTS) - {"command", "allow_exploratory"}
    if unknown:
        raise SpecError(sorted(unknown)[0], "unknown config key")
    spec = _merge(DEFAULTS, raw)
    spec["command"] = args.command
    if args.seed is not None:
        spec["seed"] = args.seed
    if args.record_level is not None:
        spec["simulation"]["record_level"] = args.record_level
    # the override only ever comes from the command line
    spec["allow_exploratory"] = bool(args.allow_exploratory)

    seed = spec["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise SpecError("seed", "must be a 64-bit unsigned integer")
    market = spec["market"]
    if not isinstance(market, Mapping) or len(set(market) & {"generator", "log"}) != 1 or set(market) - {"generator", "log"}:
        raise SpecError("market", "needs exactly one of 'generator' or 'log'")
    if "log" in market:
        log = Path(market["log"])
        spec["market"] = {"log": str(log if log.is_absolute() else (base_dir / log))}
    est_log = spec["estimate"].get("log")
    if est_log:
        p = Path(est_log)
        spec["estimate"]["log"] = str(p if p.is_absolute() else (base_dir / p))
    return spec


def spec_hash(spec: Mapping) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def build_policy(p: Mapping) -> TSPolicy | UCBPolicy:
    kind = p.get("kind", "ts")
    try:
        if kind == "ts":
            if "prior_mean" in p:
                if set(p) - {"kind", "prior_mean", "alpha"}:
                    raise SpecError("policy", "use either prior_mean or alpha/beta")
                return TSPolicy.from_prior_mean(float(p["prior_mean"]), float(p.get("alpha", 1.0)))
            a, b = float(p.get("alpha", 1.0)), float(p.get("beta", 9.0))
            if not (a > 0 and b > 0):
                raise SpecError("policy.alpha" if not a > 0 else "policy.beta", "must be positive")
            return TSPolicy(a, b)
        if kind == "ucb":
            return UCBPolicy(float(p.get("rho", 0.0)))
    except (TypeError, ValueError) as exc:
        raise SpecError("policy", str(exc)) from exc
    raise SpecError("policy.kind", f"must be 'ts' or 'ucb', got {kind!r}")


def build_sim_config(spec: Mapping, policy=None) -> SimulationConfig:
    s = spec["simulation"]
    unknown = set(s) - {"replications", "warm_start", "record_level", "budget_caps"}
    if unknown:
        raise SpecError(f"simulation.{sorted(unknown)[0]}", "unknown key")
    reps = s.get("replications")
    if not isinstance(reps, int) or isinstance(reps, bool) or reps < 1:
        raise SpecError("simulation.replications", "must be a positive integer")
    if s.get("warm_start") not in ("history", "cold"):
        raise SpecError("simulation.warm_start", "must be 'history' or 'cold'")
    if s.get("record_level") not in ("aggregate", "per-auction"):
        raise SpecError("simulation.record_level", "must be 'aggregate' or 'per-auction'")
    return SimulationConfig(
        policy=policy if policy is not None else build_policy(spec["policy"]),
        replications=reps,
        master_seed=spec["seed"],
        budget_caps_enabled=bool(s.get("budget_caps", False)),
        warm_start=WarmStart(s["warm_start"]),
        record_level=s["record_level"],
        allow_exploratory=spec["allow_exploratory"],
    )


def load_markets(spec: Mapping):
    m = spec["market"]
    if "log" in m:
        try:
            return load_market(m["log"])
        except OSError as exc:
            raise SpecError("market.log", f"cannot read {m['log']}: {exc.strerror}") from exc
    gen = dict(m["generator"] or {})
    gen.setdefault("seed", spec["seed"])
    try:
        return generate_market(GeneratorConfig.from_dict(gen))
    except ConfigurationError as exc:
        raise SpecError(f"market.generator.{exc.field}", str(exc).split(": ", 1)[-1]) from exc
    except TypeError as exc:
        raise SpecError("market.generator", str(exc)) from exc


def _grid(spec, name, lo_open=0.0, hi=1.0) -> list[float]:
    g = spec["grids"].get(name)
    if not isinstance(g, list) or not g:
        raise SpecError(f"grids.{name}", "must be a nonempty list")
    try:
        vals = [float(x) for x in g]
    except (TypeError, ValueError) as exc:
        raise SpecError(f"grids.{name}", "must hold numbers") from exc
    if name == "prior_means" and not all(0 < v < 1 for v in vals):
        raise SpecError("grids.prior_means", "values must lie in (0, 1)")
    if name == "tau" and not all(0 <= v <= 1 for v in vals):
        raise SpecError("grids.tau", "values must lie in [0, 1]")
    return vals


# --------------------------------------------------------------------------
# Pipelines; each returns (written files, outside_validity)
# --------------------------------------------------------------------------

def _outcome_rows(trajectories):
    per_kw, agg = compute_outcomes(trajectories)
    rows = []
    for o in list(per_kw.values()) + [agg]:
        rows.append({
            "keyword_id": o.keyword_id if o.keyword_id is not None else "ALL",
            "replications": o.replications,
            "mean_revenue": o.mean_revenue,
            "se_revenue": o.se_revenue,
            "mean_efficiency": o.mean_efficiency,
            "se_efficiency": o.se_efficiency,
            **o.decomposition,
            "efficient_allocation_rate": o.efficient_allocation_rate,
            "outside_validity": o.outside_validity,
        })
    return rows


def run_generate(spec, out: Path, jobs: int):
    markets = load_markets(spec)
    write_market_log(markets, out / "market.csv")
    return ["market.csv"], False


def run_simulate(spec, out: Path, jobs: int):
    markets = load_markets(spec)
    cfg = build_sim_config(spec)
    trs = simulate_all(markets, cfg, jobs)
    write_table(_outcome_rows(trs), out / "outcomes.csv")
    files = ["outcomes.csv"]
    if cfg.record_level == "per-auction":
        write_table(trajectory_log_frame(trs), out / "trajectory_log.csv")
        files.append("trajectory_log.csv")
    return files, any(t.outside_validity for t in trs)


def run_sweep(spec, out: Path, jobs: int):
    markets = load_markets(spec)
    means = _grid(spec, "prior_means")
    cfg = build_sim_config(spec, TSPolicy())
    sw = prior_sweep(markets, means, cfg, jobs)
    share = sw.entrant_share()
    dec = sw.decomposition.sum(axis=1).mean(axis=1)  # (G, 3)
    rows = []
    for g, p in enumerate(sw.points()):
        rows.append({
            "prior_mean": p.prior_mean, "prior_beta": float(sw.prior_betas[g]),
            "revenue": p.revenue, "revenue_se": p.revenue_se,
            "efficiency": p.efficiency, "efficiency_se": p.efficiency_se,
            "entrant_win": dec[g, 0], "entrant_second": dec[g, 1], "entrant_none": dec[g, 2],
            "entrant_impression_share": float(share[g]),
            "outside_validity": bool(sw.outside_validity[g]),
        })
    write_table(rows, out / "sweep.csv")
    ge, gr = sw.efficiency_optimal(), sw.revenue_optimal()
    rep = sw.thickness(ge)
    write_table(
        [{"keyword_id": k, "thickness": v, "class": rep.classes[k]} for k, v in rep.thickness.items()],
        out / "thickness.csv",
    )
    gaps = revenue_gap_by_thickness(sw, rep, gr, ge)
    write_table(
        [{"class": c, "keywords": gaps[c].keywords, "relative_revenue_gap": gaps[c].gap, "se": gaps[c].se,
          "revenue_optimal_prior": float(sw.prior_means[gr]), "efficiency_optimal_prior": float(sw.prior_means[ge])}
         for c in (THIN, MEDIUM, THICK)],
        out / "thickness_gap.csv",
    )
    return ["sweep.csv", "thickness.csv", "thickness_gap.csv"], bool(sw.outside_validity.any())


def run_frontier(spec, out: Path, jobs: int):
    markets = load_markets(spec)
    means = _grid(spec, "prior_means")
    taus = _grid(spec, "tau")
    cfg = build_sim_config(spec, TSPolicy())
    sw = prior_sweep(markets, means, cfg, jobs)
    fr = pareto_frontier(markets, taus, list(sw.prior_betas), cfg, sweep=sw,
                         normalize=bool(spec["grids"].get("normalize", True)))
    check_frontier(fr.customized)
    check_frontier(fr.uniform)
    dom = dict((id(u), ok) for u, ok in fr.uniform_dominance())
    write_table(
        [{"tau": p.tau, "revenue": p.revenue, "revenue_se": p.revenue_se, "efficiency": p.efficiency,
          "efficiency_se": p.efficiency_se, "dominated": p.dominated,
          "mean_prior_mean": float(np.mean([1 / (1 + b) for b in p.prior_assignment.values()]))}
         for p in fr.customized_all],
        out / "frontier_customized.csv",
    )
    write_table(
        [{"prior_mean": 1 / (1 + p.prior_assignment), "prior_beta": p.prior_assignment, "revenue": p.revenue,
          "revenue_se": p.revenue_se, "efficiency": p.efficiency, "efficiency_se": p.efficiency_se,
          "dominated": p.dominated, "customized_dominates_within_1se": dom[id(p)]}
         for p in fr.uniform_all],
        out / "frontier_uniform.csv",
    )
    kws = sorted({k for p in fr.customized_all for k in p.prior_assignment})
    write_table(
        [{"tau": p.tau, "keyword_id": k, "prior_beta": p.prior_assignment[k]} for p in fr.customized_all for k in kws],
        out / "customized_priors.csv",
    )
    return ["frontier_customized.csv", "frontier_uniform.csv", "customized_priors.csv"], bool(sw.outside_validity.any())


def run_estimate(spec, out: Path, jobs: int):
    import pandas as pd

    e = spec["estimate"]
    policy = build_policy(spec["policy"])
    outside = False
    if e.get("log"):
        try:
            log = pd.read_csv(e["log"])
        except OSError as exc:
            raise SpecError("estimate.log", f"cannot read {e['log']}: {exc.strerror}") from exc
    else:
        cfg = build_sim_config(spec)
        cfg = dataclasses.replace(cfg, record_level="per-auction", replications=1)
        trs = simulate_all(load_markets(spec), cfg, jobs)
        outside = any(t.outside_validity for t in trs)
        log = trajectory_log_frame(trs)
    mc = e.get("mc_samples")
    if not isinstance(mc, int) or mc < 1:
        raise SpecError("estimate.mc_samples", "must be a positive integer")
    floor = float(e.get("floor"))
    if not 0 < floor <= 1:
        raise SpecError("estimate.floor", "must lie in (0, 1]")
    est = estimate_primitives(log, policy, mc, spec["seed"], floor)
    write_table(est.to_frame(), out / "estimates.csv")
    return ["estimates.csv"], outside


def run_bias(spec, out: Path, jobs: int):
    markets = load_markets(spec)
    cfg = build_sim_config(spec)
    cfg = dataclasses.replace(cfg, record_level="per-auction")
    trs = simulate_all(markets, cfg, jobs)
    bs = bias_series(trs)
    write_table(
        [{"auction_index": t, "winner_bias": bs.winner_bias[t], "nonwinner_bias": bs.nonwinner_bias[t],
          "winner_count": int(bs.winner_count[t]), "nonwinner_count": int(bs.nonwinner_count[t])}
         for t in range(len(bs))],
        out / "bias.csv",
    )
    return ["bias.csv"], any(t.outside_validity for t in trs)


def _capped_market(args):
    market, cfg, caps = args
    lanes = [Lane(cfg.policy, r, replication_seed(cfg.master_seed, market.keyword_id, r)) for r in range(cfg.replications)]
    return run_lanes(market, lanes, cfg, caps)


def run_caps(spec, out: Path, jobs: int):
    markets = load_markets(spec)
    tighten = spec["caps"].get("tighten")
    if not isinstance(tighten, (int, float)) or not tighten > 0 or not math.isfinite(tighten):
        raise SpecError("caps.tighten", "must be a positive number")
    cfg = build_sim_config(spec)
    ref = simulate_all(markets, cfg, jobs)
    caps = derive_caps(ref)
    capped_cfg = dataclasses.replace(cfg, budget_caps_enabled=True)
    per_kw = [{a: caps[(m.keyword_id, a)] * tighten for a in m.ad_ids} for m in markets]
    capped = [t for g in map_markets(_capped_market, [(m, capped_cfg, c) for m, c in zip(markets, per_kw)], jobs) for t in g]
    write_table(
        [{"keyword_id": k, "ad_id": a, "derived_cap": v, "applied_cap": v * tighten} for (k, a), v in sorted(caps.items())],
        out / "caps.csv",
    )
    rows = []
    for label, trs in (("uncapped", ref), ("capped", capped)):
        _, agg = compute_outcomes(trs)
        rows.append({"run": label, "tighten": float(tighten), "mean_revenue": agg.mean_revenue, "se_revenue": agg.se_revenue,
                     "mean_efficiency": agg.mean_efficiency, "se_efficiency": agg.se_efficiency})
    write_table(rows, out / "caps_outcomes.csv")
    return ["caps.csv", "caps_outcomes.csv"], any(t.outside_validity for t in ref)


PIPELINES = {
    "generate": run_generate,
    "simulate": run_simulate,
    "sweep": run_sweep,
    "frontier": run_frontier,
    "estimate": run_estimate,
    "bias": run_bias,
    "caps": run_caps,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="auction-bandit", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="experiment YAML/JSON, or a manifest.json to replay")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--allow-exploratory", action="store_true",
                   help="permit policies beyond the logged data's exploration level; stamped in the manifest")
    p.add_argument("--record-level", choices=("aggregate", "per-auction"))
    return p


def demo_config_path() -> str:
    return str(resources.files("auction_bandit") / "data" / "demo.yaml")


def run(argv: list[str] | None = None) -> int:
    args = parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise SpecError("jobs", "must be >= 1")
        spec = resolve_spec(args)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write-probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise SpecError("out", f"directory not writable: {exc.strerror}") from exc
        files, outside = PIPELINES[args.command](spec, out, args.jobs)
    except (SpecError, ConfigurationError, ValidityRegionError, LogParseError,
            ReferentialIntegrityError, UnusableLogError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "command": args.command,
        "spec": spec,
        "spec_sha256": spec_hash(spec),
        "seed": spec["seed"],
        "package_version": __version__,
        "defaults": module_defaults(),
        "allow_exploratory": spec["allow_exploratory"],
        "outside_validity": bool(outside),
        "outputs": {f: file_sha256(out / f) for f in files},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
