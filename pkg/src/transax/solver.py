"""Off-ledger matching: LP construction and solution, an exhaustive oracle,
a greedy fallback, and the event-driven solver agent that posts solutions.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix

from .market import (
    EPS,
    MarketState,
    Offer,
    Solution,
    TradeKey,
    check_feasible,
    check_safety,
    is_matchable,
)

log = logging.getLogger(__name__)

OFFER_EVENTS = ("SellingOfferPosted", "BuyingOfferPosted")


class Infeasible(RuntimeError):
    pass


class NumericalFailure(RuntimeError):
    pass


class TooLarge(ValueError):
    pass


class LedgerUnavailable(ConnectionError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    horizon: int = 30
    delta: float = 0.25  # hours
    solver_id: str = "lp"
    method: str = "lp"  # "lp" or "greedy"
    debounce: float = 1.0  # logical seconds of quiet after the last offer
    resubmit_on_finalize: bool = True
    tie_break: bool = True

    def __post_init__(self) -> None:
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        if self.method not in ("lp", "greedy"):
            raise ValueError(f"unknown solver method {self.method!r}")


@dataclass(frozen=True)
class LinearConstraint:
    name: str
    coeffs: dict[int, float]
    relation: str  # "<=", ">=", "=="
    rhs: float


@dataclass
class LPProblem:
    variables: list[TradeKey]
    price_bounds: list[tuple[float, float]]
    objective: np.ndarray
    constraints: list[LinearConstraint]
    pins: Solution
    t_f: int
    horizon: int

    def dump(self) -> str:
        """Human-readable listing, one constraint per line."""
        names = [f"p[{s},{b},{t}]" for s, b, t in self.variables]
        lines = ["max: " + " ".join(f"{c:g}*{names[i]}" for i, c in enumerate(self.objective)) if names
                 else "max: 0"]
        for c in self.constraints:
            terms = " ".join(f"{v:+g}*{names[i]}" for i, v in sorted(c.coeffs.items()))
            lines.append(f"{c.name}: {terms} {c.relation} {c.rhs:g}")
        for name, (lo, hi) in zip(names, self.price_bounds):
            lines.append(f"price{name[1:]}: {lo:g} <= pi <= {hi:g}")
        for (s, b, t), p in sorted(self.pins.trades.items(), key=lambda kv: (kv[0][2], kv[0])):
            lines.append(f"pin[{s},{b},{t}]: p == {p:g}, pi == {self.pins.prices.get((s, b, t), 0.0):g}")
        return "\n".join(lines) + "\n"


def _offer_rank(state: MarketState) -> dict[str, int]:
    return {oid: i for i, oid in enumerate(state.offers)}


def candidate_keys(state: MarketState, t_lo: int | None = None, t_hi: int | None = None) -> list[TradeKey]:
    """Matchable (s, b, t) keys, ordered by interval then offer posting order."""
    rank = _offer_rank(state)
    keys = []
    for s in state.selling():
        for b in state.buying():
            if not is_matchable(s, b):
                continue
            for t in s.intervals & b.intervals:
                if (t_lo is None or t >= t_lo) and (t_hi is None or t <= t_hi):
                    keys.append((s.id, b.id, t))
    keys.sort(key=lambda k: (k[2], rank[k[0]], rank[k[1]]))
    return keys


def _pins_for(state: MarketState, finalized: Solution | None, t_f: int) -> Solution:
    finalized = state.finalized if finalized is None else finalized
    return finalized.restrict(lambda k: k[2] < t_f and k[0] in state.offers and k[1] in state.offers)


def build_lp(state: MarketState, t_f: int, cfg: SolverConfig, finalized: Solution | None = None) -> LPProblem:
    """Pruned LP over intervals ``t_f .. t_f + horizon``; finalized trades enter as constants."""
    pins = _pins_for(state, finalized, t_f)
    variables = candidate_keys(state, t_f, t_f + cfg.horizon)
    index = {k: i for i, k in enumerate(variables)}
    delta = cfg.delta
    rows: list[LinearConstraint] = []

    pinned_energy: dict[str, float] = {}
    for (s, b, _), p in pins.trades.items():
        pinned_energy[s] = pinned_energy.get(s, 0.0) + p * delta
        pinned_energy[b] = pinned_energy.get(b, 0.0) + p * delta

    by_offer: dict[str, list[int]] = {}
    for i, (s, b, _) in enumerate(variables):
        by_offer.setdefault(s, []).append(i)
        by_offer.setdefault(b, []).append(i)
    for oid, idxs in by_offer.items():
        rhs = state.offers[oid].energy - pinned_energy.get(oid, 0.0)
        rows.append(LinearConstraint(f"energy[{oid}]", {i: delta for i in idxs}, "<=", rhs))

    prosumer_sell: dict[tuple[str, int], list[int]] = {}
    prosumer_buy: dict[tuple[str, int], list[int]] = {}
    group_sell: dict[tuple[str, int], list[int]] = {}
    group_buy: dict[tuple[str, int], list[int]] = {}
    for i, (s_id, b_id, t) in enumerate(variables):
        s, b = state.offers[s_id], state.offers[b_id]
        owner = state.account_owner.get(s.account)
        if owner is not None and owner in state.limits:
            prosumer_sell.setdefault((owner, t), []).append(i)
        owner = state.account_owner.get(b.account)
        if owner is not None and owner in state.limits:
            prosumer_buy.setdefault((owner, t), []).append(i)
        group_sell.setdefault((state.group_of(s.account), t), []).append(i)
        group_buy.setdefault((state.group_of(b.account), t), []).append(i)

    for (u, t), idxs in sorted(prosumer_sell.items()):
        rows.append(LinearConstraint(f"epl[{u},{t}]", {i: 1.0 for i in idxs}, "<=", state.limits[u].epl))
    for (u, t), idxs in sorted(prosumer_buy.items()):
        rows.append(LinearConstraint(f"ecl[{u},{t}]", {i: 1.0 for i in idxs}, "<=", state.limits[u].ecl))

    for g, t in sorted(set(group_sell) | set(group_buy)):
        group = state.groups[g]
        sells, buys = group_sell.get((g, t), []), group_buy.get((g, t), [])
        if math.isfinite(group.c_int):
            if sells:
                rows.append(LinearConstraint(f"int_sell[{g},{t}]", {i: 1.0 for i in sells}, "<=", group.c_int))
            if buys:
                rows.append(LinearConstraint(f"int_buy[{g},{t}]", {i: 1.0 for i in buys}, "<=", group.c_int))
        if math.isfinite(group.c_ext):
            net: dict[int, float] = {}
            for i in sells:
                net[i] = net.get(i, 0.0) + 1.0
            for i in buys:
                net[i] = net.get(i, 0.0) - 1.0
            net = {i: v for i, v in net.items() if v != 0.0}
            if net:
                rows.append(LinearConstraint(f"ext_out[{g},{t}]", net, "<=", group.c_ext))
                rows.append(LinearConstraint(f"ext_in[{g},{t}]", net, ">=", -group.c_ext))

    price_bounds = [(state.offers[s].reservation_price, state.offers[b].reservation_price)
                    for s, b, _ in variables]
    return LPProblem(variables, price_bounds, np.ones(len(variables)), rows, pins, t_f, cfg.horizon)


def _matrices(lp: LPProblem):
    n = len(lp.variables)
    ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
    for c in lp.constraints:
        if c.relation == "<=":
            ub_rows.append(c.coeffs)
            ub_rhs.append(c.rhs)
        elif c.relation == ">=":
            ub_rows.append({i: -v for i, v in c.coeffs.items()})
            ub_rhs.append(-c.rhs)
        elif c.relation == "==":
            eq_rows.append(c.coeffs)
            eq_rhs.append(c.rhs)
        else:
            raise ValueError(f"bad relation {c.relation!r} in {c.name}")

    def sparse(rows):
        if not rows:
            return None
        data, ri, ci = [], [], []
        for r, coeffs in enumerate(rows):
            for i, v in coeffs.items():
                ri.append(r)
                ci.append(i)
                data.append(v)
        return csr_matrix((data, (ri, ci)), shape=(len(rows), n))

    return (sparse(ub_rows), np.array(ub_rhs) if ub_rhs else None,
            sparse(eq_rows), np.array(eq_rhs) if eq_rhs else None)


def _linprog(c, a_ub, b_ub, a_eq, b_eq):
    res = linprog(-c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status == 2:
        raise Infeasible(res.message)
    if res.status != 0:
        raise NumericalFailure(res.message)
    return res


def midpoint_price(s: Offer, b: Offer) -> float:
    return (s.reservation_price + b.reservation_price) / 2.0


def solve_lp(lp: LPProblem, tie_break: bool = True) -> Solution:
    """Optimal trades for ``lp``; pinned keys are copied through unchanged.

    With ``tie_break`` a second pass keeps the optimum and prefers earlier
    variables in the ordered list (earlier intervals, then earlier offers).
    """
    pins = lp.pins
    if not lp.variables:
        return Solution(dict(pins.trades), dict(pins.prices))
    a_ub, b_ub, a_eq, b_eq = _matrices(lp)
    if b_ub is not None and (b_ub < -EPS).any():
        raise Infeasible("pinned trades exceed an offer's energy")
    if b_ub is not None:
        b_ub = np.maximum(b_ub, 0.0)
    res = _linprog(lp.objective, a_ub, b_ub, a_eq, b_eq)
    x = res.x
    best = float(lp.objective @ x)
    if tie_break and best > EPS:
        n = len(lp.variables)
        weights = 1.0 + (n - np.arange(n)) / n  # strictly decreasing along the ordered variables
        keep = csr_matrix(-lp.objective.reshape(1, -1))
        floor = best - max(1e-9, 1e-9 * best)
        a2 = keep if a_ub is None else _vstack(a_ub, keep)
        b2 = np.array([-floor]) if b_ub is None else np.append(b_ub, -floor)
        try:
            x = _linprog(weights, a2, b2, a_eq, b_eq).x
        except (Infeasible, NumericalFailure):
            log.debug("tie-break pass failed; keeping first-pass vertex")
    trades, prices = dict(pins.trades), dict(pins.prices)
    for (key, (lo, hi)), v in zip(zip(lp.variables, lp.price_bounds), x):
        if v > 1e-9:
            trades[key] = float(v)
            prices[key] = (lo + hi) / 2.0
    return Solution(trades, prices)


def _vstack(a, b):
    from scipy.sparse import vstack

    return vstack([a, b]).tocsr()


def solve(state: MarketState, t_f: int, cfg: SolverConfig) -> Solution:
    if cfg.method == "greedy":
        return greedy_match(state, t_f, cfg.horizon, cfg.delta)
    return solve_lp(build_lp(state, t_f, cfg), tie_break=cfg.tie_break)


class _Capacity:
    """Residual capacities shared by the greedy matcher."""

    def __init__(self, state: MarketState, delta: float, pins: Solution):
        self.state = state
        self.delta = delta
        self.energy = {oid: o.energy for oid, o in state.offers.items()}
        for (s, b, _), p in pins.trades.items():
            self.energy[s] -= p * delta
            self.energy[b] -= p * delta
        self.p_sell: dict = {}
        self.p_buy: dict = {}
        self.g_sell: dict = {}
        self.g_buy: dict = {}

    def room(self, key: TradeKey) -> float:
        st = self.state
        s_id, b_id, t = key
        s, b = st.offers[s_id], st.offers[b_id]
        q = min(self.energy[s_id], self.energy[b_id]) / self.delta
        owner = st.account_owner.get(s.account)
        if owner is not None and owner in st.limits:
            q = min(q, st.limits[owner].epl - self.p_sell.get((owner, t), 0.0))
        owner = st.account_owner.get(b.account)
        if owner is not None and owner in st.limits:
            q = min(q, st.limits[owner].ecl - self.p_buy.get((owner, t), 0.0))
        gs, gb = st.group_of(s.account), st.group_of(b.account)
        q = min(q, st.groups[gs].c_int - self.g_sell.get((gs, t), 0.0))
        q = min(q, st.groups[gb].c_int - self.g_buy.get((gb, t), 0.0))
        if gs != gb:
            net_s = self.g_sell.get((gs, t), 0.0) - self.g_buy.get((gs, t), 0.0)
            net_b = self.g_sell.get((gb, t), 0.0) - self.g_buy.get((gb, t), 0.0)
            q = min(q, st.groups[gs].c_ext - net_s, st.groups[gb].c_ext + net_b)
        return max(q, 0.0)

    def take(self, key: TradeKey, q: float) -> None:
        st = self.state
        s_id, b_id, t = key
        s, b = st.offers[s_id], st.offers[b_id]
        self.energy[s_id] -= q * self.delta
        self.energy[b_id] -= q * self.delta
        for acct, book in ((s.account, self.p_sell), (b.account, self.p_buy)):
            owner = st.account_owner.get(acct)
            if owner is not None:
                book[owner, t] = book.get((owner, t), 0.0) + q
        gs, gb = st.group_of(s.account), st.group_of(b.account)
        self.g_sell[gs, t] = self.g_sell.get((gs, t), 0.0) + q
        self.g_buy[gb, t] = self.g_buy.get((gb, t), 0.0) + q


def greedy_match(state: MarketState, t_f: int, horizon: int, delta: float = 0.25) -> Solution:
    """Fill keys in order of descending matchable quantity; always feasible and safe."""
    pins = _pins_for(state, None, t_f)
    keys = candidate_keys(state, t_f, t_f + horizon)
    order = {k: i for i, k in enumerate(keys)}
    keys.sort(key=lambda k: (-min(state.offers[k[0]].energy, state.offers[k[1]].energy), order[k]))
    cap = _Capacity(state, delta, pins)
    trades, prices = dict(pins.trades), dict(pins.prices)
    for key in keys:
        q = cap.room(key)
        if q <= 1e-9:
            continue
        cap.take(key, q)
        trades[key] = q
        prices[key] = midpoint_price(state.offers[key[0]], state.offers[key[1]])
    sol = Solution(trades, prices)
    if check_feasible(sol, state, delta) or check_safety(sol, state):
        log.warning("greedy produced an unsafe solution; falling back to pins only")
        return pins
    return sol


def enumerate_oracle(state: MarketState, grid_step: float, delta: float = 1.0) -> float:
    """Best objective over all trade vectors on the grid ``{0, step, 2*step, ...}``.

    Exhaustive (memoised over residual capacities), independent of the LP
    path. Limited to tiny instances.
    """
    if len(state.offers) > 6:
        raise TooLarge(f"{len(state.offers)} offers (max 6)")
    all_t = set().union(*(o.intervals for o in state.offers.values())) if state.offers else set()
    if len(all_t) > 3:
        raise TooLarge(f"{len(all_t)} intervals (max 3)")
    keys = []
    for s in state.selling():
        for b in state.buying():
            if s.reservation_price <= b.reservation_price:
                keys.extend((s.id, b.id, t) for t in sorted(s.intervals & b.intervals))
    if not keys:
        return 0.0

    def units(x: float) -> int:
        return int(math.floor(x / grid_step + 1e-9)) if math.isfinite(x) else 10**9

    # resources: offer energy, prosumer sell/buy per t, group int sell/buy per t
    res_cap: dict[tuple, int] = {}
    key_res: list[list[tuple]] = []
    key_ext: list[list[tuple[tuple, int]]] = []
    for s_id, b_id, t in keys:
        s, b = state.offers[s_id], state.offers[b_id]
        rs = [("E", s_id), ("E", b_id)]
        res_cap[("E", s_id)] = units(s.energy / delta)
        res_cap[("E", b_id)] = units(b.energy / delta)
        for acct, tag, attr in ((s.account, "PS", "epl"), (b.account, "PB", "ecl")):
            owner = state.account_owner.get(acct)
            if owner is not None and owner in state.limits:
                rs.append((tag, owner, t))
                res_cap[(tag, owner, t)] = units(getattr(state.limits[owner], attr))
        gs, gb = state.group_of(s.account), state.group_of(b.account)
        rs.append(("GS", gs, t))
        res_cap[("GS", gs, t)] = units(state.groups[gs].c_int)
        rs.append(("GB", gb, t))
        res_cap[("GB", gb, t)] = units(state.groups[gb].c_int)
        key_res.append(rs)
        key_ext.append([] if gs == gb else [((gs, t), 1), ((gb, t), -1)])
    ext_cap = {(g, t): units(state.groups[g].c_ext) for g, _ in state.groups.items() for t in all_t}
    res_names = sorted(res_cap)
    res_idx = {r: i for i, r in enumerate(res_names)}
    caps = tuple(res_cap[r] for r in res_names)
    key_res_i = [tuple(res_idx[r] for r in rs) for rs in key_res]
    ext_names = sorted({e for ks in key_ext for e, _ in ks})
    ext_idx = {e: i for i, e in enumerate(ext_names)}
    key_ext_i = [tuple((ext_idx[e], sgn) for e, sgn in ks) for ks in key_ext]
    ext_lim = tuple(ext_cap[e] for e in ext_names)

    memo: dict = {}

    def best(i: int, used: tuple, net: tuple) -> int:
        if i == len(keys):
            ok = all(abs(v) <= lim for v, lim in zip(net, ext_lim))
            return 0 if ok else -(10**9)
        token = (i, used, net)
        if token in memo:
            return memo[token]
        room = min(caps[r] - used[r] for r in key_res_i[i])
        top = -(10**9)
        for q in range(room, -1, -1):
            u = list(used)
            for r in key_res_i[i]:
                u[r] += q
            nt = list(net)
            for e, sgn in key_ext_i[i]:
                nt[e] += sgn * q
            v = best(i + 1, tuple(u), tuple(nt))
            if v >= 0 and v + q > top:
                top = v + q
        memo[token] = top
        return top

    result = best(0, tuple(0 for _ in caps), tuple(0 for _ in ext_names))
    return float(max(result, 0) * grid_step)


class SolverAgent:
    """Watches the ledger's event stream and posts solutions.

    Offer events are debounced: a solve happens once no new offer has
    arrived for ``cfg.debounce`` logical seconds. A ``Finalized`` event
    triggers an immediate resolve when ``cfg.resubmit_on_finalize`` is set.
    """

    def __init__(self, client, cfg: SolverConfig):
        self.client = client
        self.cfg = cfg
        self.next_seq = 0
        self.last_offer_at: float | None = None
        self.finalize_pending = False
        self.posts: list[tuple[bool, str]] = []
        self.timings: list[tuple[int, float, float]] = []  # (t_f, solve_ms, solve_submit_ms)

    def poll(self, now: float) -> bool:
        """Consume new events; solve and post if due. Returns True if a solution was posted."""
        for ev in self.client.read_events(self.next_seq):
            self.next_seq = ev.seq + 1
            if ev.kind in OFFER_EVENTS:
                self.last_offer_at = now
            elif ev.kind == "Finalized" and self.cfg.resubmit_on_finalize:
                self.finalize_pending = True
        due = self.finalize_pending or (
            self.last_offer_at is not None and now - self.last_offer_at >= self.cfg.debounce)
        if not due:
            return False
        self.finalize_pending = False
        self.last_offer_at = None
        self.solve_and_post()
        return True

    def solve_and_post(self) -> tuple[bool, str]:
        start = time.perf_counter()
        state, t_f = self.client.market_snapshot()
        sol = solve(state, t_f, self.cfg)
        solved = time.perf_counter()
        result = self.client.post_solution(self.cfg.solver_id, sol)
        done = time.perf_counter()
        self.timings.append((t_f, (solved - start) * 1e3, (done - start) * 1e3))
        outcome = (result.accepted, result.reason)
        self.posts.append(outcome)
        if not result.accepted:
            log.debug("solver %s: submission rejected (%s)", self.cfg.solver_id, result.reason)
        return outcome


def solver_loop(client, cfg: SolverConfig, stop: threading.Event | None = None,
                clock: Callable[[], float] = time.monotonic, poll_interval: float = 0.05,
                max_backoff: float = 2.0) -> SolverAgent:
    """Service loop around :class:`SolverAgent`; retries with backoff while the ledger is down."""
    stop = stop or threading.Event()
    agent = SolverAgent(client, cfg)
    backoff = poll_interval
    while not stop.is_set():
        try:
            agent.poll(clock())
            backoff = poll_interval
        except LedgerUnavailable:
            log.warning("ledger unavailable; retrying in %.2fs", backoff)
            backoff = min(backoff * 2, max_backoff)
        except Exception:  # the loop must survive anything a single solve throws
            log.exception("solver iteration failed")
        stop.wait(backoff)
    return agent


def total_traded(sols: Iterable[Solution]) -> float:
    return math.fsum(p for sol in sols for p in sol.trades.values())
