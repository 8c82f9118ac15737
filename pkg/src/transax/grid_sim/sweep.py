"""Planning-horizon sweep over a whole day of offers."""

from __future__ import annotations

import math
import time
import tracemalloc
from dataclasses import dataclass

from ..market import EPS, MarketState, Offer, Side, objective_value
from ..solver import SolverConfig, solve
from .config import ScenarioConfig
from .devices import Profiles, build_profiles


@dataclass(frozen=True)
class SweepRow:
    horizon: int
    energy_traded_kw: float
    solve_ms: float
    peak_mem_mb: float


def day_offers(cfg: ScenarioConfig, profiles: Profiles, block: int = 4) -> MarketState:
    """Every offer the agents would post over the day, all from anonymous accounts."""
    dt = cfg.timing.delta
    pr = cfg.prices
    offers: list[Offer] = []
    account_group: dict[str, str] = {}
    group_of_feeder = {f: g.id for g in cfg.groups.values() for f in g.feeders}

    def add(node: str, side: Side, energy: float, intervals, price: float) -> None:
        acct = f"anon-{node}"
        account_group[acct] = group_of_feeder[cfg.nodes[node].feeder]
        offers.append(Offer(f"d{len(offers):05d}", side, acct, round(energy, 9), frozenset(intervals), price))

    for t in cfg.timing.intervals:
        for node in sorted(cfg.nodes):
            spec = cfg.nodes[node]
            s, l = profiles.solar[node][t], profiles.load[node][t]
            if spec.role == "consumer":
                if l > EPS:
                    add(node, Side.BUYING, min(l, spec.ecl) * dt, {t}, pr.buy_reserve)
            elif s - l > EPS:
                add(node, Side.SELLING, min(s - l, spec.epl) * dt, {t}, pr.solar_reserve)
    ts = list(cfg.timing.intervals)
    for node in sorted(cfg.nodes):
        spec = cfg.nodes[node]
        if spec.battery is None:
            continue
        for i in range(0, len(ts), block):
            window = [t for t in ts[i:i + block] if profiles.solar[node][t] - profiles.load[node][t] <= EPS]
            if window:
                add(node, Side.SELLING, spec.battery.max_power * dt, window, pr.battery_reserve)
    return MarketState.from_offers(offers, groups=dict(cfg.groups), feeders=dict(cfg.feeders),
                                   limits=cfg.limits(), account_group=account_group,
                                   account_owner={a: None for a in account_group})


def horizon_sweep(cfg: ScenarioConfig, horizons, profiles: Profiles | None = None,
                  timing: str = "wall") -> list[SweepRow]:
    profiles = profiles or build_profiles(cfg)
    state = day_offers(cfg, profiles)
    t_f = cfg.timing.first_interval
    rows = []
    for h in sorted(set(int(h) for h in horizons)):
        scfg = SolverConfig(horizon=h, delta=cfg.timing.delta)
        tracemalloc.start()
        start = time.perf_counter()
        sol = solve(state, t_f, scfg)
        elapsed = (time.perf_counter() - start) * 1e3
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        if timing == "none":
            elapsed, peak = 0.0, 0
        rows.append(SweepRow(h, objective_value(sol), elapsed, peak / 2**20))
    return rows


def saturation_point(rows: list[SweepRow], tol: float = 1e-6) -> int | None:
    """Smallest horizon after which the traded energy no longer grows (needs a later row to confirm)."""
    for i, row in enumerate(rows[:-1]):
        if all(abs(r.energy_traded_kw - row.energy_traded_kw) <= tol * max(1.0, row.energy_traded_kw)
               for r in rows[i + 1:]):
            return row.horizon
    return None


def is_non_decreasing(rows: list[SweepRow], tol: float = 1e-6) -> bool:
    return all(b.energy_traded_kw >= a.energy_traded_kw - tol * max(1.0, a.energy_traded_kw)
               for a, b in zip(rows, rows[1:]))


def total_offered(state: MarketState) -> float:
    return math.fsum(o.energy for o in state.offers.values())
