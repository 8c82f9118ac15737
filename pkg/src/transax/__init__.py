"""Transactive microgrid market: ledger emulator, LP matching, mixing, billing and simulation."""

from .market import (
    EPS,
    Feeder,
    Group,
    MarketState,
    Offer,
    ProsumerLimits,
    Side,
    Solution,
    check_feasible,
    check_safety,
    derive_group_limits,
    is_matchable,
    objective_value,
    privacy_cost,
)
from .solver import SolverConfig, build_lp, enumerate_oracle, greedy_match, solve, solve_lp

__version__ = "0.1.0"
