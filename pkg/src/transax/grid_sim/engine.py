"""Closed-loop discrete-time microgrid driven by the ledger and solver agents.

Each market tick (current ledger interval ``t``):

1. agents open new offer intervals: withdraw assets, mix them into their
   anonymous trading accounts and post offers;
2. solver agents see the offer events and race to post solutions;
3. the clock passes the end of ``t`` and the ledger finalizes ``t_f``;
4. if ``t`` is a physical interval its finalized trades are dispatched,
   meters measure, agents deposit settled assets and meters audit.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..ledger import ECA, EPA, Ledger, LedgerConfig, LogicalClock
from ..market import EPS, Offer, Side, Solution
from ..metering import PricePolicy, SmartMeter, billing_cycle, check_limits
from ..mixer import EnvelopeBackend, HybridBackend, MixMember, run_mix
from ..solver import SolverAgent, SolverConfig
from .config import NodeSpec, ScenarioConfig
from .devices import Battery, Profiles, build_profiles, dispatch_setpoint

log = logging.getLogger(__name__)

DSO = "DSO"


class BarrierTimeout(RuntimeError):
    """The simulator reached an interval the market has not finalized."""


class InvariantViolation(RuntimeError):
    pass


def _account_id(seed: int, node: str, purpose: str) -> str:
    return "0x" + hashlib.sha256(f"{seed}:{node}:{purpose}".encode()).hexdigest()[:20]


@dataclass
class Agent:
    spec: NodeSpec
    named: str
    anon: str
    meter_account: str
    battery: Battery | None
    group: str
    battery_offers: dict[str, Offer] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return EPA if self.spec.role == "producer" else ECA


@dataclass
class IntervalResult:
    t: int
    solar: dict[str, float]
    load: dict[str, float]
    battery: dict[str, float]
    net: dict[str, float]  # kW, positive exports
    traded: dict[str, float]  # kW sold minus bought
    deviation: dict[str, float]
    substation_kw: float
    baseline_kw: float
    traded_kw: float


@dataclass
class RunResult:
    cfg: ScenarioConfig
    mode: str
    intervals: list[IntervalResult]
    baseline: dict[int, float]
    ledger: Ledger | None = None
    meters: dict[str, SmartMeter] = field(default_factory=dict)
    bills: dict = field(default_factory=dict)
    audits: dict[tuple[str, int], bool] = field(default_factory=dict)
    charge: dict[int, float] = field(default_factory=dict)
    offered: dict[int, tuple[float, float]] = field(default_factory=dict)
    solver_times: list[tuple[int, float, float]] = field(default_factory=list)
    lockstep: list[tuple[str, int]] = field(default_factory=list)
    policy: PricePolicy | None = None
    accounts: dict[str, str] = field(default_factory=dict)  # anon trading account -> node

    @property
    def total_traded_kw(self) -> float:
        return math.fsum(r.traded_kw for r in self.intervals)


def baseline_load(profiles: Profiles, t: int) -> float:
    return math.fsum(profiles.load[n][t] - profiles.solar[n][t] for n in sorted(profiles.load))


class World:
    def __init__(self, cfg: ScenarioConfig, profiles: Profiles | None = None, timing: str = "wall",
                 realtime: bool = False, faulty: frozenset[str] = frozenset()):
        self.cfg = cfg
        self.profiles = profiles or build_profiles(cfg)
        self.timing = timing
        self.realtime = realtime
        self.faulty = faulty  # nodes that drop part of their deposits
        tm = cfg.timing
        self.delta = tm.delta
        self.t0 = tm.first_interval - tm.t_clear - 1
        self.clock = LogicalClock(0.0)
        self.ledger = Ledger(LedgerConfig(cfg.feeders, cfg.groups, self.delta, tm.t_clear, self.t0, 0.0, DSO),
                             self.clock)
        self.policy = PricePolicy.flat(cfg.prices.pi_s, cfg.prices.pi_b, tm.intervals)
        self.crypto = EnvelopeBackend() if cfg.crypto == "envelope" else HybridBackend()
        self.agents: dict[str, Agent] = {}
        self.meters: dict[str, SmartMeter] = {}
        self.by_account: dict[str, Agent] = {}
        self.solvers: list[SolverAgent] = []
        self.next_open = tm.first_interval
        self.offer_seq = 0
        self.finalized_at: dict[int, Solution] = {}
        self.lockstep: list[tuple[str, int]] = []
        self._setup()

    # ---------------------------------------------------------------- setup
    def _setup(self) -> None:
        seed = self.cfg.seed
        for spec in sorted(self.cfg.nodes.values(), key=lambda n: n.id):
            self.ledger.register_smart_meter(DSO, spec.id, spec.feeder, spec.epl, spec.ecl)
            named = _account_id(seed, spec.id, "named")
            cert = self.ledger.certify(DSO, spec.id, named)
            self.ledger.register_prosumer(named, spec.id, cert)
            b = spec.battery
            agent = Agent(spec, named, _account_id(seed, spec.id, "trade"), _account_id(seed, spec.id, "meter"),
                          Battery(b.capacity, b.charge, b.max_power, b.efficiency) if b else None,
                          self.ledger.group_of(named))
            self.agents[spec.id] = agent
            self.by_account[agent.anon] = agent
            self.meters[spec.id] = SmartMeter(spec.id, named, agent.meter_account)
        tm = self.cfg.timing
        for sid in self.cfg.solvers:
            self.solvers.append(SolverAgent(self.ledger, SolverConfig(
                horizon=tm.horizon, delta=self.delta, solver_id=sid, method=sid,
                debounce=tm.subtick_minutes * 60.0)))

    # ------------------------------------------------------------- forecast
    def forecast(self, node: str, tau: int, now_t: int) -> tuple[float, float]:
        p = self.profiles
        if self.cfg.forecast == "persistence":
            ref = min(max(now_t, self.cfg.timing.first_interval), self.cfg.timing.last_interval)
            return p.solar[node][ref], p.load[node][tau]
        return p.solar[node][tau], p.load[node][tau]

    def _surplus(self, node: str, tau: int, now_t: int) -> float:
        solar, load = self.forecast(node, tau, now_t)
        return max(solar - load, 0.0)

    # --------------------------------------------------------------- offers
    def _new_offer_id(self) -> str:
        self.offer_seq += 1
        return f"o{self.offer_seq:05d}"

    def _free_cover(self, account: str, kind: str, intervals: list[int]) -> float:
        free = math.inf
        bal = self.ledger.balance(account)
        for t in intervals:
            free = min(free, math.fsum(a.amount for a in bal if a.kind == kind and not a.traded and t in a.intervals))
        return 0.0 if free is math.inf else free

    def open_interval(self, tau: int, now_t: int) -> None:
        self._withdraw_and_mix(tau)
        pr = self.cfg.prices
        t_f = self.ledger.t_f
        for node in sorted(self.agents):
            a = self.agents[node]
            solar, load = self.forecast(node, tau, now_t)
            if a.spec.role == "consumer":
                e = min(load * self.delta, self._free_cover(a.anon, ECA, [tau]))
                if e > EPS:
                    self._post(a, Side.BUYING, e, {tau}, pr.buy_reserve)
                continue
            e = min(max(solar - load, 0.0) * self.delta, self._free_cover(a.anon, EPA, [tau]))
            if e > EPS:
                self._post(a, Side.SELLING, e, {tau}, pr.solar_reserve)
            if a.battery is None:
                continue
            # the battery only backs intervals the panel is not expected to cover
            window = [x for x in range(max(t_f, tau - self.cfg.timing.lookahead), tau + 1)
                      if self._surplus(node, x, now_t) <= EPS]
            if not window:
                continue
            reserved = math.fsum(o.energy for o in a.battery_offers.values())
            e = min(0.5 * a.battery.deliverable() - reserved, a.battery.max_power * self.delta,
                    self._free_cover(a.anon, EPA, window))
            if e > EPS:
                offer = self._post(a, Side.SELLING, e, set(window), pr.battery_reserve)
                a.battery_offers[offer.id] = offer

    def _post(self, a: Agent, side: Side, energy: float, intervals: set[int], price: float) -> Offer:
        offer = Offer(self._new_offer_id(), side, a.anon, round(energy, 9), frozenset(intervals), price)
        self.ledger.post_offer(a.anon, offer)
        return offer

    def _withdraw_and_mix(self, tau: int) -> None:
        for gid in sorted(self.cfg.groups):
            for kind in (EPA, ECA):
                members = [a for n, a in sorted(self.agents.items()) if a.group == gid and a.kind == kind]
                if not members:
                    continue
                limit = "epl" if kind == EPA else "ecl"
                denom = min(getattr(a.spec, limit) for a in members) * self.delta
                if denom <= 0:
                    continue
                mix = []
                for a in members:
                    asset = self.ledger.withdraw_assets(a.named, kind, denom, {tau})
                    mix.append(MixMember(a.spec.id, a.named, a.anon, asset))
                if self.cfg.mixing and len(mix) >= 2:
                    sid = f"mix:{gid}:{kind}:{tau}"
                    session = run_mix(mix, self.ledger, sid, self.crypto, random.Random(f"{self.cfg.seed}:{sid}"))
                    if not session.ok:
                        raise InvariantViolation(f"honest mixing session {sid} aborted: {session.reason}")
                else:
                    # fewer than two members (or mixing off): nothing to hide behind, move directly
                    for m in mix:
                        self.ledger.transfer_assets(m.input_account, [(m.target_account, m.asset)])

    # ---------------------------------------------------------------- solve
    def run_solvers(self, now: float) -> None:
        debounce = self.cfg.timing.subtick_minutes * 60.0
        for s in self.solvers:
            s.poll(now)
        for s in self.solvers:
            s.poll(now + debounce)

    # ------------------------------------------------------------ physical
    def step(self, t: int) -> IntervalResult:
        if t not in self.finalized_at or t > self.ledger.last_finalized:
            raise BarrierTimeout(f"interval {t} has not been finalized")
        self.lockstep.append(("consume", t))
        trades = self.finalized_at[t]
        traded = {n: 0.0 for n in self.agents}
        for (s_id, b_id, _), p in trades.trades.items():
            traded[self.by_account[self.ledger.offers[s_id].account].spec.id] += p
            traded[self.by_account[self.ledger.offers[b_id].account].spec.id] -= p
        solar, load, batt, net, dev = {}, {}, {}, {}, {}
        for node in sorted(self.agents):
            a = self.agents[node]
            s, l = self.profiles.solar[node][t], self.profiles.load[node][t]
            want = dispatch_setpoint(traded[node], s, l)
            if a.battery is not None:
                b, d = a.battery.apply(want, self.delta)
            else:
                b, d = 0.0, want
            if abs(d) > EPS:
                log.debug("interval %d node %s: dispatch deviation %.4f kW", t, node, d)
            solar[node], load[node], batt[node], dev[node] = s, l, b, d
            net[node] = s - l + b
        for a in self.agents.values():
            for oid in [oid for oid, o in a.battery_offers.items() if max(o.intervals) <= t]:
                del a.battery_offers[oid]
        substation = -math.fsum(net.values())
        return IntervalResult(t, solar, load, batt, net, traded, dev, substation,
                              baseline_load(self.profiles, t), math.fsum(trades.trades.values()))

    def settle(self, r: IntervalResult, audits: dict) -> None:
        t = r.t
        for node in sorted(self.agents):
            a = self.agents[node]
            assets = [x for x in self.ledger.balance(a.anon) if max(x.intervals) <= t]
            if node in self.faulty and assets:
                assets = assets[1:]
            if assets:
                self.ledger.deposit(a.anon, a.meter_account, assets)
        events = self.ledger.read_events(min(m.next_seq for m in self.meters.values()))
        for node, meter in self.meters.items():
            meter.ingest([e for e in events if e.seq >= meter.next_seq])
            rec = meter.measure(t, r.net[node] * self.delta)
            spec = self.cfg.nodes[node]
            check_limits(rec, spec.epl, spec.ecl, self.delta)
            audits[(node, t)] = meter.audit(t).passed

    # ------------------------------------------------------------------ run
    def run(self) -> RunResult:
        tm = self.cfg.timing
        last = tm.last_interval
        interval_s = self.delta * 3600.0
        res = RunResult(self.cfg, "market", [], {}, self.ledger, self.meters, policy=self.policy)
        for t in range(self.t0, last + 1):
            base = (t - self.t0) * interval_s
            self.clock.set(base)
            while self.next_open <= min(self.ledger.t_f + tm.lookahead, last):
                self.open_interval(self.next_open, t)
                self.next_open += 1
            self.run_solvers(base + tm.subtick_minutes * 60.0)
            if self.realtime:
                time.sleep(tm.subtick_minutes * 60.0)
            self.clock.set(base + interval_s)
            t_f = self.ledger.t_f
            self.finalized_at[t_f] = self.ledger.finalize(DSO)
            self.lockstep.append(("finalized", t_f))
            if t >= tm.first_interval:
                r = self.step(t)
                self.settle(r, res.audits)
                res.intervals.append(r)
                res.baseline[t] = r.baseline_kw
                batts = [a.battery for a in self.agents.values() if a.battery]
                res.charge[t] = 100.0 * math.fsum(b.charge / b.capacity for b in batts) / len(batts) if batts else 0.0
                offers = [o for o in self.ledger.offers.values() if t in o.intervals]
                res.offered[t] = (math.fsum(o.energy / self.delta for o in offers if o.is_selling),
                                  math.fsum(o.energy / self.delta for o in offers if not o.is_selling))
            bad = self.ledger.check_conservation()
            if bad:
                raise InvariantViolation(f"asset conservation broken at interval {t}: {bad[:3]}")
        for node, meter in self.meters.items():
            res.bills[node] = billing_cycle(meter.records, self.policy, tm.first_interval, last,
                                            self.cfg.sign_convention)
        for s in self.solvers:
            if s.cfg.method == "lp":
                res.solver_times.extend(s.timings)
        if self.timing == "none":
            res.solver_times = [(t, 0.0, 0.0) for t, _, _ in res.solver_times]
        res.lockstep = self.lockstep
        res.accounts = {a.anon: n for n, a in self.agents.items()}
        return res


def run_baseline(cfg: ScenarioConfig, profiles: Profiles | None = None) -> RunResult:
    profiles = profiles or build_profiles(cfg)
    res = RunResult(cfg, "baseline", [], {})
    for t in cfg.timing.intervals:
        res.baseline[t] = baseline_load(profiles, t)
    return res


def run_scenario(cfg: ScenarioConfig, mode: str = "market", timing: str = "wall",
                 realtime: bool = False, faulty: frozenset[str] = frozenset()) -> RunResult:
    if mode == "baseline":
        return run_baseline(cfg)
    if mode != "market":
        raise ValueError(f"unknown mode {mode!r}")
    return World(cfg, timing=timing, realtime=realtime, faulty=faulty).run()


# ----------------------------------------------------------------- outputs
def _f(x: float) -> str:
    return f"{x:.6f}"


def write_outputs(res: RunResult, out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tm = res.cfg.timing
    written = []

    def table(name: str, header: list[str], rows) -> None:
        path = out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    market = {r.t: r.substation_kw for r in res.intervals}
    table("substation.csv", ["time", "baseline_kw", "market_kw"],
          [[tm.clock(t), _f(res.baseline[t]), _f(market[t]) if t in market else ""] for t in sorted(res.baseline)])
    if res.mode == "baseline":
        return written
    table("trades.csv", ["interval", "sell_total_kw", "buy_total_kw", "traded_kw"],
          [[r.t, _f(res.offered[r.t][0]), _f(res.offered[r.t][1]), _f(r.traded_kw)] for r in res.intervals])
    table("charge.csv", ["time", "mean_charge_pct"], [[tm.clock(t), _f(c)] for t, c in sorted(res.charge.items())])
    table("solver_times.csv", ["interval", "solve_ms", "solve_submit_ms"],
          [[t, f"{a:.3f}", f"{b:.3f}"] for t, a, b in res.solver_times])
    cycle = f"{tm.first_interval}-{tm.last_interval}"
    table("bills.csv", ["prosumer", "cycle", "total"], [[n, cycle, _f(b.total)] for n, b in sorted(res.bills.items())])
    meters = out / "meters"
    meters.mkdir(exist_ok=True)
    for node, meter in sorted(res.meters.items()):
        path = meters / f"{node}.csv"
        meter.write_audit_csv(path, res.policy, res.cfg.sign_convention)
        written.append(path)
    return written
