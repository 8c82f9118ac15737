"""Market domain types and the pure predicates over them.

Everything here is a pure function of immutable inputs. Units: energy in
kWh, power in kW, interval length ``delta`` in hours, prices in currency
per kWh.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

EPS = 1e-6
INF = math.inf

TradeKey = tuple[str, str, int]  # (selling offer id, buying offer id, interval)


class Side(str, Enum):
    SELLING = "selling"
    BUYING = "buying"


class UnknownOffer(KeyError):
    pass


class UnknownGroup(KeyError):
    pass


class EmptyGroup(ValueError):
    pass


@dataclass(frozen=True)
class Offer:
    id: str
    side: Side
    account: str
    energy: float
    intervals: frozenset[int]
    reservation_price: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "side", Side(self.side))
        object.__setattr__(self, "intervals", frozenset(int(t) for t in self.intervals))
        if self.energy < 0:
            raise ValueError(f"offer {self.id}: negative energy {self.energy}")
        if not self.intervals:
            raise ValueError(f"offer {self.id}: empty interval set")
        if min(self.intervals) < 0:
            raise ValueError(f"offer {self.id}: negative interval")
        if self.reservation_price < 0:
            raise ValueError(f"offer {self.id}: negative reservation price")

    @property
    def is_selling(self) -> bool:
        return self.side is Side.SELLING

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "side": self.side.value,
            "account": self.account,
            "energy": self.energy,
            "intervals": sorted(self.intervals),
            "reservation_price": self.reservation_price,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Offer":
        return cls(d["id"], Side(d["side"]), d["account"], float(d["energy"]),
                   frozenset(d["intervals"]), float(d["reservation_price"]))


@dataclass(frozen=True)
class Solution:
    """Sparse trade vector ``p`` (kW) and unit prices ``pi`` on the same keys."""

    trades: Mapping[TradeKey, float] = field(default_factory=dict)
    prices: Mapping[TradeKey, float] = field(default_factory=dict)

    def restrict(self, pred) -> "Solution":
        keys = [k for k in self.trades if pred(k)]
        return Solution({k: self.trades[k] for k in keys},
                        {k: self.prices.get(k, 0.0) for k in keys})

    def merged(self, other: "Solution") -> "Solution":
        """Union of keys; ``other`` wins on overlap."""
        trades = dict(self.trades)
        prices = dict(self.prices)
        trades.update(other.trades)
        prices.update(other.prices)
        return Solution(trades, prices)

    def nonzero(self, tol: float = 0.0) -> "Solution":
        return self.restrict(lambda k: self.trades[k] > tol)

    def intervals(self) -> set[int]:
        return {k[2] for k in self.trades}

    def to_json(self) -> list:
        return [[s, b, t, self.trades[(s, b, t)], self.prices.get((s, b, t), 0.0)]
                for (s, b, t) in sorted(self.trades, key=lambda k: (k[2], k[0], k[1]))]

    @classmethod
    def from_json(cls, rows: Iterable) -> "Solution":
        trades, prices = {}, {}
        for s, b, t, p, pi in rows:
            key = (str(s), str(b), int(t))
            trades[key] = float(p)
            prices[key] = float(pi)
        return cls(trades, prices)


def _normalize_limits(name: str, c_int: float, c_ext: float) -> float:
    if c_ext > c_int:
        warnings.warn(f"{name}: external limit {c_ext} exceeds internal limit {c_int}; "
                      f"clamping to {c_int}", stacklevel=3)
        return c_int
    return c_ext


@dataclass(frozen=True)
class Feeder:
    id: str
    c_int: float
    c_ext: float
    prosumers: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "prosumers", frozenset(self.prosumers))
        object.__setattr__(self, "c_ext", _normalize_limits(f"feeder {self.id}", self.c_int, self.c_ext))

    @property
    def capacity(self) -> float:
        """Single limit used when a feeder is folded into a group."""
        return min(self.c_int, self.c_ext)


@dataclass(frozen=True)
class Group:
    id: str
    feeders: frozenset[str]
    c_int: float
    c_ext: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "feeders", frozenset(self.feeders))
        if not self.feeders:
            raise EmptyGroup(f"group {self.id} has no feeders")
        object.__setattr__(self, "c_ext", _normalize_limits(f"group {self.id}", self.c_int, self.c_ext))


@dataclass(frozen=True)
class ProsumerLimits:
    prosumer_id: str
    epl: float
    ecl: float

    def __post_init__(self) -> None:
        if self.epl < 0 or self.ecl < 0:
            raise ValueError(f"prosumer {self.prosumer_id}: negative limit")


@dataclass(frozen=True)
class MarketState:
    """Offers plus the topology needed to judge a solution.

    ``account_owner`` maps named accounts to their prosumer; anonymous
    accounts map to ``None`` (or are absent) and are subject only to group
    constraints.
    """

    offers: Mapping[str, Offer]
    groups: Mapping[str, Group] = field(default_factory=dict)
    feeders: Mapping[str, Feeder] = field(default_factory=dict)
    limits: Mapping[str, ProsumerLimits] = field(default_factory=dict)
    account_group: Mapping[str, str] = field(default_factory=dict)
    account_owner: Mapping[str, str | None] = field(default_factory=dict)
    finalized: Solution = field(default_factory=Solution)

    @classmethod
    def from_offers(cls, offers: Iterable[Offer], **kw) -> "MarketState":
        return cls(offers={o.id: o for o in offers}, **kw)

    def selling(self) -> list[Offer]:
        return [o for o in self.offers.values() if o.is_selling]

    def buying(self) -> list[Offer]:
        return [o for o in self.offers.values() if not o.is_selling]

    def offer(self, offer_id: str) -> Offer:
        try:
            return self.offers[offer_id]
        except KeyError:
            raise UnknownOffer(offer_id) from None

    def group_of(self, account: str) -> str:
        try:
            return self.account_group[account]
        except KeyError:
            raise UnknownGroup(f"account {account} has no group assignment") from None


@dataclass(frozen=True)
class Violation:
    kind: str
    key: object
    lhs: float
    bound: float


def is_matchable(s: Offer, b: Offer) -> bool:
    return s.reservation_price <= b.reservation_price and bool(s.intervals & b.intervals)


def objective_value(sol: Solution) -> float:
    return math.fsum(sol.trades.values())


def check_feasible(sol: Solution, state: MarketState, delta: float) -> list[Violation]:
    """Energy-budget and price-box violations of ``sol`` (empty list if feasible)."""
    out: list[Violation] = []
    used: dict[str, float] = {}
    for key, p in sol.trades.items():
        s_id, b_id, t = key
        s, b = state.offer(s_id), state.offer(b_id)
        if not s.is_selling or b.is_selling:
            out.append(Violation("WrongSide", key, 0.0, 0.0))
            continue
        if p < -EPS:
            out.append(Violation("NegativeTrade", key, p, 0.0))
        if not is_matchable(s, b):
            out.append(Violation("NotMatchable", key, s.reservation_price, b.reservation_price))
        if t not in s.intervals or t not in b.intervals:
            out.append(Violation("IntervalMismatch", key, float(t), 0.0))
        price = sol.prices.get(key, 0.0)
        if p > EPS and not (s.reservation_price - EPS <= price <= b.reservation_price + EPS):
            out.append(Violation("PriceOutOfRange", key, price, s.reservation_price if price < s.reservation_price
                                 else b.reservation_price))
        used[s_id] = used.get(s_id, 0.0) + p * delta
        used[b_id] = used.get(b_id, 0.0) + p * delta
    for offer_id, energy in sorted(used.items()):
        bound = state.offers[offer_id].energy
        if energy > bound + EPS:
            out.append(Violation("EnergyExceeded", offer_id, energy, bound))
    return out


def _flows(sol: Solution, state: MarketState):
    """Per-interval sums: (prosumer sells, prosumer buys, group sells, group buys)."""
    p_sell: dict[tuple[str, int], float] = {}
    p_buy: dict[tuple[str, int], float] = {}
    g_sell: dict[tuple[str, int], float] = {}
    g_buy: dict[tuple[str, int], float] = {}
    for (s_id, b_id, t), p in sol.trades.items():
        s, b = state.offer(s_id), state.offer(b_id)
        gs, gb = state.group_of(s.account), state.group_of(b.account)
        g_sell[gs, t] = g_sell.get((gs, t), 0.0) + p
        g_buy[gb, t] = g_buy.get((gb, t), 0.0) + p
        owner = state.account_owner.get(s.account)
        if owner is not None:
            p_sell[owner, t] = p_sell.get((owner, t), 0.0) + p
        owner = state.account_owner.get(b.account)
        if owner is not None:
            p_buy[owner, t] = p_buy.get((owner, t), 0.0) + p
    return p_sell, p_buy, g_sell, g_buy


def group_flows(sol: Solution, state: MarketState) -> dict[tuple[str, int], tuple[float, float, float, float]]:
    """For every (group, interval) touched: (sells, buys, internal quantity, external quantity)."""
    _, _, g_sell, g_buy = _flows(sol, state)
    out = {}
    for key in sorted(set(g_sell) | set(g_buy)):
        a, b = g_sell.get(key, 0.0), g_buy.get(key, 0.0)
        out[key] = (a, b, max(a, b), abs(a - b))
    return out


def check_safety(sol: Solution, state: MarketState) -> list[Violation]:
    """Prosumer production/consumption limits and group internal/external limits."""
    out: list[Violation] = []
    p_sell, p_buy, _, _ = _flows(sol, state)
    for (owner, t), v in sorted(p_sell.items()):
        lim = state.limits.get(owner)
        if lim is not None and v > lim.epl + EPS:
            out.append(Violation("ProductionLimitExceeded", (owner, t), v, lim.epl))
    for (owner, t), v in sorted(p_buy.items()):
        lim = state.limits.get(owner)
        if lim is not None and v > lim.ecl + EPS:
            out.append(Violation("ConsumptionLimitExceeded", (owner, t), v, lim.ecl))
    for (g, t), (_, _, internal, external) in group_flows(sol, state).items():
        group = state.groups.get(g)
        if group is None:
            raise UnknownGroup(g)
        if math.isfinite(group.c_int) and internal > group.c_int + EPS:
            out.append(Violation("InternalExceeded", (g, t), internal, group.c_int))
        if math.isfinite(group.c_ext) and external > group.c_ext + EPS:
            out.append(Violation("ExternalExceeded", (g, t), external, group.c_ext))
    return out


@dataclass(frozen=True)
class SideLimit:
    value: float
    case: int  # 1: some feeder can reach its limit; 2: none can


@dataclass(frozen=True)
class GroupLimits:
    production: SideLimit
    consumption: SideLimit

    @property
    def shared(self) -> float:
        return min(self.production.value, self.consumption.value)

    @property
    def case(self) -> int:
        return 1 if 1 in (self.production.case, self.consumption.case) else 2


def _side_limit(feeders: list[Feeder], totals: Mapping[str, float]) -> SideLimit:
    reachable = [f.capacity for f in feeders if totals[f.id] >= f.capacity]
    if reachable:
        return SideLimit(min(reachable), 1)
    return SideLimit(math.fsum(f.capacity for f in feeders), 2)


def derive_group_limits(feeders: Iterable[Feeder], limits: Iterable[ProsumerLimits]) -> GroupLimits:
    """Largest safe group limit, evaluated separately for production and consumption.

    If the prosumers on some feeder can together reach that feeder's limit,
    the group may move no more than the smallest such feeder; otherwise
    asset withdrawal limits already keep every feeder safe and the group
    limit is the sum of feeder limits.
    """
    feeders = sorted(feeders, key=lambda f: f.id)
    if not feeders:
        raise EmptyGroup("no feeders")
    by_id = {lim.prosumer_id: lim for lim in limits}
    prod, cons = {}, {}
    for f in feeders:
        members = [by_id[u] for u in f.prosumers if u in by_id]
        prod[f.id] = math.fsum(m.epl for m in members)
        cons[f.id] = math.fsum(m.ecl for m in members)
    return GroupLimits(_side_limit(feeders, prod), _side_limit(feeders, cons))


def privacy_cost(sell_energies: Iterable[float], buy_energies: Iterable[float], c_g: float) -> float:
    """Tradeable volume lost to the group limit."""
    if c_g < 0:
        raise ValueError("group limit must be non-negative")
    es, eb = math.fsum(sell_energies), math.fsum(buy_energies)
    return min(es, eb) - min(es, eb, c_g)
