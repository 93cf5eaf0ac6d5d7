"""Simulation and analysis of second-price auctions with learned quality scores."""

from .errors import (
    ConfigurationError,
    ContractViolation,
    InsufficientDetailError,
    LogParseError,
    ReferentialIntegrityError,
    UndefinedPaymentError,
    UnusableLogError,
    ValidityRegionError,
)
from .market import (
    AdvertiserProfile,
    DistributionSpec,
    GeneratorConfig,
    KeywordMarket,
    generate_market,
    load_market,
    write_market_log,
)
from .mechanisms import (
    BeliefState,
    ScoredBid,
    TSPolicy,
    UCBPolicy,
    allocate,
    allocation_probability,
    payment,
    ts_quality_score,
    ucb_quality_score,
    update_belief,
)
from .engine import (
    SimulationConfig,
    Trajectory,
    WarmStart,
    derive_caps,
    simulate_all,
    simulate_keyword,
    simulate_with_caps,
)

__version__ = "0.1.0"

__all__ = [
    "AdvertiserProfile", "BeliefState", "ConfigurationError", "ContractViolation",
    "DistributionSpec", "GeneratorConfig", "InsufficientDetailError", "KeywordMarket",
    "LogParseError", "ReferentialIntegrityError", "ScoredBid", "SimulationConfig",
    "TSPolicy", "Trajectory", "UCBPolicy", "UndefinedPaymentError", "UnusableLogError",
    "ValidityRegionError", "WarmStart", "allocate", "allocation_probability",
    "derive_caps", "generate_market", "load_market", "payment", "simulate_all",
    "simulate_keyword", "simulate_with_caps", "ts_quality_score", "ucb_quality_score",
    "update_belief", "write_market_log",
]
