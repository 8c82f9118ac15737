"""Instance builders and brute-force oracles shared by the test modules."""

from __future__ import annotations

import itertools
import math
import random

import numpy as np

from transax.ledger import ECA, EPA, Ledger, LedgerConfig
from transax.market import Feeder, Group, MarketState, Offer, ProsumerLimits, Side, Solution

INF = math.inf


def sell(oid: str, account: str, energy: float, intervals, price: float) -> Offer:
    return Offer(oid, Side.SELLING, account, energy, frozenset(intervals), price)


def buy(oid: str, account: str, energy: float, intervals, price: float) -> Offer:
    return Offer(oid, Side.BUYING, account, energy, frozenset(intervals), price)


def one_group_state(offers, c_int: float = INF, c_ext: float = INF, limits=None, owners=None) -> MarketState:
    accounts = {o.account for o in offers}
    return MarketState.from_offers(
        offers,
        groups={"g": Group("g", frozenset({"f"}), c_int, c_ext)},
        feeders={"f": Feeder("f", c_int, c_ext, frozenset(accounts))},
        limits=limits or {},
        account_group={a: "g" for a in accounts},
        account_owner=owners or {},
    )


def example1_offers() -> list[Offer]:
    return [
        sell("s1", "P1", 10, {48}, 1),
        sell("s2", "P2", 30, {48, 49}, 1),
        buy("b1", "P3", 30, {48}, 5),
        buy("b2", "P3", 10, {49}, 5),
    ]


def example1_state() -> MarketState:
    return one_group_state(example1_offers())


EXAMPLE1_TRADES = {("s1", "b1", 48): 10.0, ("s2", "b1", 48): 20.0, ("s2", "b2", 49): 10.0}


def example1_solution() -> Solution:
    return Solution(dict(EXAMPLE1_TRADES), {k: 3.0 for k in EXAMPLE1_TRADES})


def random_instance(rng: random.Random, max_offers: int = 6, n_intervals: int = 3, max_energy: int = 6,
                    with_limits: bool = True) -> MarketState:
    """Small integral instance: named prosumers in up to two groups, Delta = 1 h."""
    n = rng.randint(2, max_offers)
    n_sell = rng.randint(1, n - 1)
    ts = list(range(1, n_intervals + 1))
    prosumers = [f"u{i}" for i in range(rng.randint(2, 4))]
    offers = []
    for i in range(n):
        side = Side.SELLING if i < n_sell else Side.BUYING
        k = rng.randint(1, len(ts))
        offers.append(Offer(f"{'s' if side is Side.SELLING else 'b'}{i}", side, rng.choice(prosumers),
                            rng.randint(0, max_energy), frozenset(rng.sample(ts, k)), rng.randint(0, 5)))
    two_groups = with_limits and rng.random() < 0.5
    group_of = {u: ("g2" if two_groups and j % 2 else "g1") for j, u in enumerate(prosumers)}
    groups, feeders = {}, {}
    for g in sorted(set(group_of.values())):
        c_int = rng.choice([INF, rng.randint(2, 8)]) if with_limits else INF
        c_ext = rng.choice([c_int, rng.randint(1, 8)]) if with_limits and math.isfinite(c_int) else c_int
        if c_ext > c_int:
            c_ext = c_int
        groups[g] = Group(g, frozenset({f"f{g}"}), c_int, c_ext)
        feeders[f"f{g}"] = Feeder(f"f{g}", INF, INF, frozenset(u for u in prosumers if group_of[u] == g))
    limits = {}
    if with_limits:
        for u in prosumers:
            if rng.random() < 0.5:
                limits[u] = ProsumerLimits(u, rng.randint(1, 6), rng.randint(1, 6))
    return MarketState.from_offers(offers, groups=groups, feeders=feeders, limits=limits,
                                   account_group=dict(group_of), account_owner={u: u for u in prosumers})


# ---------------------------------------------------------------- group limits
def random_group(rng: random.Random, max_prosumers: int = 5, max_el: int = 4):
    """Feeders with integral capacities and integral per-prosumer limits."""
    n_feeders = rng.randint(1, 3)
    counts = [1] * n_feeders
    for _ in range(rng.randint(0, max_prosumers - n_feeders)):
        counts[rng.randrange(n_feeders)] += 1
    feeders, limits, k = [], [], 0
    for i, c in enumerate(counts):
        ids = []
        for _ in range(c):
            u = f"u{k}"
            k += 1
            ids.append(u)
            limits.append(ProsumerLimits(u, rng.randint(0, max_el), rng.randint(0, max_el)))
        cap = rng.randint(1, max_el * c + 1)
        feeders.append(Feeder(f"f{i}", cap, cap, frozenset(ids)))
    return feeders, limits


def feeder_overloads(feeders, limits, c_g: float, side: str = "epl") -> int:
    """Count discretized production assignments (x_u <= EL_u, sum <= C_g) that overload a feeder."""
    by_id = {lim.prosumer_id: lim for lim in limits}
    order = [u for f in feeders for u in sorted(f.prosumers)]
    ranges = [np.arange(int(getattr(by_id[u], side)) + 1) for u in order]
    grid = np.array(np.meshgrid(*ranges, indexing="ij")).reshape(len(order), -1).T
    ok = grid.sum(axis=1) <= c_g + 1e-9
    grid = grid[ok]
    bad = np.zeros(len(grid), dtype=bool)
    col = 0
    for f in feeders:
        width = len(f.prosumers)
        bad |= grid[:, col:col + width].sum(axis=1) > f.capacity + 1e-9
        col += width
    return int(bad.sum())


# ------------------------------------------------------------------ ledgers
def small_ledger(meters=(("m1", 10, 10), ("m2", 10, 10), ("m3", 10, 10)), delta: float = 1.0,
                 start_interval: int = 47, t_clear: int = 0, c_int: float = INF, c_ext: float = INF,
                 two_groups: bool = False) -> Ledger:
    if two_groups:
        feeders = {"f1": Feeder("f1", INF, INF), "f2": Feeder("f2", INF, INF)}
        groups = {"g1": Group("g1", frozenset({"f1"}), c_int, c_ext), "g2": Group("g2", frozenset({"f2"}), c_int, c_ext)}
    else:
        feeders = {"f1": Feeder("f1", INF, INF)}
        groups = {"g1": Group("g1", frozenset({"f1"}), c_int, c_ext)}
    ledger = Ledger(LedgerConfig(feeders, groups, delta, t_clear, start_interval))
    for i, (m, epl, ecl) in enumerate(meters):
        feeder = "f2" if two_groups and i % 2 else "f1"
        ledger.register_smart_meter("DSO", m, feeder, epl, ecl)
        acct = f"A-{m}"
        ledger.register_prosumer(acct, m, ledger.certify("DSO", m, acct))
    return ledger


def example1_ledger() -> Ledger:
    """Example 1 posted on a ledger; accounts A-m1, A-m2 sell, A-m3 buys."""
    ledger = small_ledger((("m1", 10, 0), ("m2", 30, 0), ("m3", 0, 30)))
    ledger.withdraw_assets("A-m1", EPA, 10, {48})
    ledger.withdraw_assets("A-m2", EPA, 30, {48, 49})
    ledger.withdraw_assets("A-m3", ECA, 30, {48})
    ledger.withdraw_assets("A-m3", ECA, 10, {49})
    ledger.post_offer("A-m1", sell("s1", "A-m1", 10, {48}, 1))
    ledger.post_offer("A-m2", sell("s2", "A-m2", 30, {48, 49}, 1))
    ledger.post_offer("A-m3", buy("b1", "A-m3", 30, {48}, 5))
    ledger.post_offer("A-m3", buy("b2", "A-m3", 10, {49}, 5))
    return ledger


def all_assignments(n: int, top: int):
    return itertools.product(range(top + 1), repeat=n)


# ------------------------------------------------------------------ scenarios
def small_doc(**over) -> dict:
    doc = {
        "name": "small",
        "seed": 3,
        "timing": {"delta_minutes": 15, "subtick_minutes": 2, "start": "10:00", "end": "13:00",
                   "t_clear": 1, "horizon": 8, "lookahead": 2},
        "feeders": [{"id": "A", "c_int": 40, "c_ext": 40}, {"id": "B", "c_int": 40, "c_ext": 40}],
        "groups": [{"id": "G", "feeders": ["A", "B"], "c_int": "derive", "c_ext": "derive"}],
        "nodes": [
            {"id": "P1", "feeder": "A", "role": "producer", "epl": 10, "ecl": 5, "solar_peak": 6, "base_load": 0.5,
             "battery": {"capacity": 10, "charge": 5, "max_power": 4, "efficiency": 0.95}},
            {"id": "P2", "feeder": "B", "role": "producer", "epl": 10, "ecl": 5, "solar_peak": 5, "base_load": 0.6,
             "battery": {"capacity": 10, "charge": 8, "max_power": 4, "efficiency": 0.95}},
            {"id": "C1", "feeder": "A", "role": "consumer", "epl": 0, "ecl": 10, "base_load": 2.5},
            {"id": "C2", "feeder": "B", "role": "consumer", "epl": 0, "ecl": 10, "base_load": 3.0,
             "evening_load": 1.0},
        ],
        "solvers": ["greedy", "lp"],
        "crypto": "envelope",
    }
    doc.update(over)
    return doc
