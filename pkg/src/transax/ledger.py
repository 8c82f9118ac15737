"""Single-writer ledger emulating the trading contract.

All mutating calls are serialised behind one lock. Each one is validated before
its effect is applied and logged. Every log entry carries enough payload to be
re-applied, so a ledger rebuilt from its log reaches the same state hash.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .market import (
    EPS,
    Feeder,
    Group,
    MarketState,
    Offer,
    ProsumerLimits,
    Solution,
    UnknownOffer,
    check_feasible,
    check_safety,
    objective_value,
)

log = logging.getLogger(__name__)

EPA = "EPA"
ECA = "ECA"

# events emitted by contract functions; the remaining kinds are bookkeeping
# entries needed to replay the log
CONTRACT_EVENTS = (
    "ProsumerRegistered",
    "AssetsWithdrawn",
    "BuyingOfferPosted",
    "SellingOfferPosted",
    "SolutionPosted",
    "Finalized",
)
BOOKKEEPING_EVENTS = ("SmartMeterRegistered", "LimitsUpdated", "AssetsTransferred", "AssetsDeposited")


class LedgerError(Exception):
    pass


class NotAuthorized(LedgerError):
    pass


class DuplicateMeter(LedgerError):
    pass


class UnknownMeter(LedgerError):
    pass


class InvalidCertificate(LedgerError):
    pass


class LimitExceeded(LedgerError):
    def __init__(self, interval: int, requested: float, remaining: float):
        super().__init__(f"interval {interval}: requested {requested:g} kWh, {remaining:g} kWh left")
        self.interval = interval


class AnonymousCallerForbidden(LedgerError):
    pass


class InsufficientAssets(LedgerError):
    pass


class CrossGroupTransfer(LedgerError):
    pass


class IntervalNotCovered(LedgerError):
    pass


class IntervalClosed(LedgerError):
    pass


class DuplicateOffer(LedgerError):
    pass


class UnknownAccount(LedgerError):
    pass


class TooEarly(LedgerError):
    pass


class ReplayError(LedgerError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class Asset:
    kind: str
    amount: float
    intervals: frozenset[int]
    group: str
    traded: bool = False

    def __post_init__(self) -> None:
        if self.kind not in (EPA, ECA):
            raise ValueError(f"bad asset kind {self.kind!r}")
        if self.amount < 0:
            raise ValueError("negative asset amount")
        object.__setattr__(self, "intervals", frozenset(int(t) for t in self.intervals))

    @property
    def key(self) -> tuple:
        return (self.kind, self.intervals, self.group, self.traded)

    def to_json(self) -> dict:
        return {"kind": self.kind, "amount": self.amount, "intervals": sorted(self.intervals),
                "group": self.group, "traded": self.traded}

    @classmethod
    def from_json(cls, d: Mapping) -> "Asset":
        return cls(d["kind"], float(d["amount"]), frozenset(d["intervals"]), d["group"],
                   bool(d.get("traded", False)))


@dataclass(frozen=True)
class Event:
    seq: int
    kind: str
    payload: dict
    interval: int

    def to_json(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "payload": self.payload, "interval": self.interval}


@dataclass(frozen=True)
class Certificate:
    meter_id: str
    address: str
    tag: str


@dataclass(frozen=True)
class PostResult:
    accepted: bool
    reason: str
    objective: float = 0.0


class LogicalClock:
    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        self._now += seconds
        return self._now

    def set(self, t: float) -> None:
        self._now = float(t)


class WallClock:
    def __init__(self):
        self._start = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._start


@dataclass
class LedgerConfig:
    feeders: dict[str, Feeder]
    groups: dict[str, Group]
    delta: float = 0.25  # hours
    t_clear: int = 1
    start_interval: int = 0
    epoch: float = 0.0  # clock reading at the start of start_interval
    dso: str = "DSO"
    dso_secret: str = "dso-certificate-key"
    feeder_group: dict[str, str] = field(init=False)

    def __post_init__(self) -> None:
        self.feeder_group = {}
        for g in self.groups.values():
            for f in g.feeders:
                if f in self.feeder_group:
                    raise ValueError(f"feeder {f} belongs to groups {self.feeder_group[f]} and {g.id}")
                self.feeder_group[f] = g.id
        missing = set(self.feeders) - set(self.feeder_group)
        if missing:
            raise ValueError(f"feeders without a group: {sorted(missing)}")

    def to_json(self) -> dict:
        return {
            "feeders": [{"id": f.id, "c_int": _num(f.c_int), "c_ext": _num(f.c_ext),
                         "prosumers": sorted(f.prosumers)} for f in self.feeders.values()],
            "groups": [{"id": g.id, "feeders": sorted(g.feeders), "c_int": _num(g.c_int),
                        "c_ext": _num(g.c_ext)} for g in self.groups.values()],
            "delta": self.delta, "t_clear": self.t_clear, "start_interval": self.start_interval,
            "epoch": self.epoch, "dso": self.dso, "dso_secret": self.dso_secret,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "LedgerConfig":
        feeders = {f["id"]: Feeder(f["id"], _inf(f["c_int"]), _inf(f["c_ext"]), frozenset(f.get("prosumers", ())))
                   for f in d["feeders"]}
        groups = {g["id"]: Group(g["id"], frozenset(g["feeders"]), _inf(g["c_int"]), _inf(g["c_ext"]))
                  for g in d["groups"]}
        return cls(feeders, groups, d["delta"], d["t_clear"], d["start_interval"], d.get("epoch", 0.0),
                   d.get("dso", "DSO"), d.get("dso_secret", "dso-certificate-key"))


def _num(x: float):
    return "inf" if math.isinf(x) else x


def _inf(x) -> float:
    return math.inf if x in ("inf", None) else float(x)


@dataclass
class _Account:
    kind: str  # "named" | "anonymous"
    group: str
    owner: str | None = None  # meter id, named accounts only


Bucket = dict[tuple, float]


def _add(bucket: Bucket, key: tuple, amount: float) -> None:
    v = bucket.get(key, 0.0) + amount
    if v <= 1e-12:
        bucket.pop(key, None)
    else:
        bucket[key] = v


def _key_asset(key: tuple, amount: float) -> Asset:
    kind, intervals, group, traded = key
    return Asset(kind, amount, intervals, group, traded)


def _sort_key(key: tuple):
    kind, intervals, group, traded = key
    return (len(intervals), sorted(intervals), kind, group, traded)


class Ledger:
    def __init__(self, config: LedgerConfig, clock=None):
        self.config = config
        self.clock = clock or LogicalClock(config.epoch)
        self._lock = threading.RLock()
        self.meters: dict[str, dict] = {}
        self.accounts: dict[str, _Account] = {}
        self.balances: dict[str, Bucket] = {}
        self.currency: dict[str, int] = {}
        self.offers: dict[str, Offer] = {}
        self.escrow: dict[str, Bucket] = {}
        self.candidate: Solution | None = None
        self.candidate_objective = 0.0
        self.finalized = Solution({}, {})
        self.withdrawals: dict[tuple[str, str, int], float] = {}
        self.minted: dict[tuple, float] = {}
        self.current_interval = config.start_interval
        self.events: list[Event] = []

    # ------------------------------------------------------------------ time
    @property
    def t_f(self) -> int:
        """Next interval to be finalised."""
        return self.current_interval + self.config.t_clear + 1

    @property
    def last_finalized(self) -> int:
        return self.t_f - 1

    def interval_end(self, t: int) -> float:
        return self.config.epoch + (t - self.config.start_interval + 1) * self.config.delta * 3600.0

    # ---------------------------------------------------------------- events
    def _emit(self, kind: str, payload: dict) -> Event:
        ev = Event(len(self.events), kind, payload, self.current_interval)
        self.events.append(ev)
        return ev

    def read_events(self, from_seq: int = 0) -> list[Event]:
        with self._lock:
            return self.events[max(from_seq, 0):]

    # ---------------------------------------------------------- registration
    def certify(self, caller: str, meter_id: str, address: str) -> Certificate:
        """DSO-issued certificate binding an address to a meter."""
        if caller != self.config.dso:
            raise NotAuthorized(caller)
        return Certificate(meter_id, address, self._cert_tag(meter_id, address))

    def _cert_tag(self, meter_id: str, address: str) -> str:
        msg = f"{meter_id}|{address}".encode()
        return hmac.new(self.config.dso_secret.encode(), msg, hashlib.sha256).hexdigest()

    def register_smart_meter(self, caller: str, meter_id: str, feeder: str, epl: float, ecl: float) -> None:
        with self._lock:
            if caller != self.config.dso:
                raise NotAuthorized(caller)
            if meter_id in self.meters:
                raise DuplicateMeter(meter_id)
            if feeder not in self.config.feeders:
                raise LedgerError(f"unknown feeder {feeder}")
            if epl < 0 or ecl < 0:
                raise ValueError("limits must be non-negative")
            payload = {"meter": meter_id, "feeder": feeder, "epl": epl, "ecl": ecl}
            self._apply_SmartMeterRegistered(payload)
            self._emit("SmartMeterRegistered", payload)

    def _apply_SmartMeterRegistered(self, p: dict) -> None:
        self.meters[p["meter"]] = {"feeder": p["feeder"], "epl": p["epl"], "ecl": p["ecl"], "account": None}

    def update_limits(self, caller: str, meter_id: str, epl: float, ecl: float) -> None:
        with self._lock:
            if caller != self.config.dso:
                raise NotAuthorized(caller)
            if meter_id not in self.meters:
                raise UnknownMeter(meter_id)
            payload = {"meter": meter_id, "epl": epl, "ecl": ecl}
            self._apply_LimitsUpdated(payload)
            self._emit("LimitsUpdated", payload)

    def _apply_LimitsUpdated(self, p: dict) -> None:
        self.meters[p["meter"]].update(epl=p["epl"], ecl=p["ecl"])

    def register_prosumer(self, caller: str, meter_id: str, certificate: Certificate) -> str:
        with self._lock:
            if meter_id not in self.meters:
                raise UnknownMeter(meter_id)
            if (certificate.meter_id != meter_id or certificate.address != caller
                    or not hmac.compare_digest(certificate.tag, self._cert_tag(meter_id, caller))):
                raise InvalidCertificate(meter_id)
            if caller in self.accounts or self.meters[meter_id]["account"] is not None:
                raise InvalidCertificate(f"{meter_id} already has a registered prosumer")
            group = self.config.feeder_group[self.meters[meter_id]["feeder"]]
            payload = {"meter": meter_id, "account": caller, "group": group}
            self._apply_ProsumerRegistered(payload)
            self._emit("ProsumerRegistered", payload)
            return caller

    def _apply_ProsumerRegistered(self, p: dict) -> None:
        self.meters[p["meter"]]["account"] = p["account"]
        self.accounts[p["account"]] = _Account("named", p["group"], p["meter"])
        self.balances.setdefault(p["account"], {})
        self.currency.setdefault(p["account"], 0)

    def group_of(self, account: str) -> str:
        try:
            return self.accounts[account].group
        except KeyError:
            raise UnknownAccount(account) from None

    # ---------------------------------------------------------------- assets
    def withdraw_assets(self, caller: str, kind: str, amount: float, intervals: Iterable[int]) -> Asset:
        intervals = frozenset(int(t) for t in intervals)
        with self._lock:
            acct = self.accounts.get(caller)
            if acct is None:
                raise UnknownAccount(caller)
            if acct.kind != "named":
                raise AnonymousCallerForbidden(caller)
            if kind not in (EPA, ECA):
                raise ValueError(f"bad asset kind {kind!r}")
            if amount < 0 or not intervals:
                raise ValueError("withdrawal needs a non-negative amount and at least one interval")
            if min(intervals) < self.t_f:
                raise IntervalClosed(f"interval {min(intervals)} is already finalised")
            meter = self.meters[acct.owner]
            cap = (meter["epl"] if kind == EPA else meter["ecl"]) * self.config.delta
            for t in sorted(intervals):
                used = self.withdrawals.get((acct.owner, kind, t), 0.0)
                if used + amount > cap + EPS:
                    raise LimitExceeded(t, amount, cap - used)
            payload = {"account": caller, "meter": acct.owner, "kind": kind, "amount": amount,
                       "intervals": sorted(intervals), "group": acct.group}
            self._apply_AssetsWithdrawn(payload)
            self._emit("AssetsWithdrawn", payload)
            return Asset(kind, amount, intervals, acct.group)

    def _apply_AssetsWithdrawn(self, p: dict) -> None:
        intervals = frozenset(p["intervals"])
        for t in intervals:
            k = (p["meter"], p["kind"], t)
            self.withdrawals[k] = self.withdrawals.get(k, 0.0) + p["amount"]
        key = (p["kind"], intervals, p["group"], False)
        _add(self.balances[p["account"]], key, p["amount"])
        mk = (p["group"], p["kind"], intervals)
        self.minted[mk] = self.minted.get(mk, 0.0) + p["amount"]

    def balance(self, account: str) -> list[Asset]:
        with self._lock:
            bucket = self.balances.get(account, {})
            return [_key_asset(k, v) for k, v in sorted(bucket.items(), key=lambda kv: _sort_key(kv[0]))]

    def withdrawn(self, meter_id: str, kind: str, interval: int) -> float:
        return self.withdrawals.get((meter_id, kind, interval), 0.0)

    def transfer_assets(self, sources: str | Sequence[str], outputs: Sequence[tuple[str, Asset]]) -> None:
        """Atomically move asset slices from ``sources`` (pooled, in order) to output accounts."""
        sources = [sources] if isinstance(sources, str) else list(sources)
        with self._lock:
            for src in sources:
                if src not in self.accounts:
                    raise UnknownAccount(src)
            for dest, asset in outputs:
                acct = self.accounts.get(dest)
                if acct is not None and acct.group != asset.group:
                    raise CrossGroupTransfer(f"{dest} is in group {acct.group}, asset in {asset.group}")
            payload = {"sources": sources,
                       "outputs": [[dest, asset.to_json()] for dest, asset in outputs]}
            self._plan_transfer(payload)  # raises before any mutation
            self._apply_AssetsTransferred(payload)
            self._emit("AssetsTransferred", payload)

    def _plan_transfer(self, p: dict) -> list[tuple[str, tuple, float, str]]:
        avail = {src: dict(self.balances.get(src, {})) for src in p["sources"]}
        moves = []
        for dest, aj in p["outputs"]:
            asset = Asset.from_json(aj)
            need = asset.amount
            for src in p["sources"]:
                have = avail[src].get(asset.key, 0.0)
                take = min(have, need)
                if take > 0:
                    _add(avail[src], asset.key, -take)
                    moves.append((src, asset.key, take, dest))
                    need -= take
                if need <= 1e-12:
                    break
            if need > EPS:
                raise InsufficientAssets(f"short {need:g} kWh of {asset.kind} for {dest}")
        return moves

    def _apply_AssetsTransferred(self, p: dict) -> None:
        for src, key, amount, dest in self._plan_transfer(p):
            _add(self.balances[src], key, -amount)
            self._ensure_anonymous(dest, key[2])
            _add(self.balances[dest], key, amount)

    def _ensure_anonymous(self, account: str, group: str) -> None:
        if account not in self.accounts:
            self.accounts[account] = _Account("anonymous", group)
            self.balances[account] = {}
            self.currency[account] = 0

    # ---------------------------------------------------------------- offers
    def post_offer(self, caller: str, offer: Offer) -> str:
        with self._lock:
            if offer.account != caller:
                raise NotAuthorized(f"{caller} cannot post for {offer.account}")
            if caller not in self.accounts:
                raise UnknownAccount(caller)
            if offer.id in self.offers:
                raise DuplicateOffer(offer.id)
            if min(offer.intervals) < self.t_f:
                raise IntervalClosed(f"interval {min(offer.intervals)} is already finalised")
            self._plan_escrow(caller, offer)
            kind = "SellingOfferPosted" if offer.is_selling else "BuyingOfferPosted"
            payload = {"offer": offer.to_json()}
            self._apply_OfferPosted(payload)
            self._emit(kind, payload)
            return offer.id

    def _plan_escrow(self, account: str, offer: Offer) -> list[tuple[tuple, float]]:
        kind = EPA if offer.is_selling else ECA
        avail = {k: v for k, v in self.balances.get(account, {}).items() if k[0] == kind}
        if offer.energy <= 0:
            return []
        for t in offer.intervals:
            if not any(t in k[1] for k in avail):
                raise IntervalNotCovered(f"no {kind} valid for interval {t}")
        taken: list[tuple[tuple, float]] = []
        covered = {t: 0.0 for t in offer.intervals}
        for t in sorted(offer.intervals):
            need = offer.energy - covered[t]
            for k in sorted((k for k in avail if t in k[1]), key=_sort_key):
                if need <= 1e-12:
                    break
                take = min(avail[k], need)
                if take <= 0:
                    continue
                avail[k] -= take
                taken.append((k, take))
                for tt in k[1] & offer.intervals:
                    covered[tt] += take
                need -= take
            if need > EPS:
                raise InsufficientAssets(f"interval {t}: short {need:g} kWh of {kind}")
        return taken

    def _apply_OfferPosted(self, p: dict) -> None:
        offer = Offer.from_json(p["offer"])
        taken = self._plan_escrow(offer.account, offer)
        bucket = self.escrow.setdefault(offer.id, {})
        for k, amount in taken:
            _add(self.balances[offer.account], k, -amount)
            _add(bucket, k, amount)
        self.offers[offer.id] = offer

    # ------------------------------------------------------------- solutions
    def market_state(self, active_only: bool = False) -> MarketState:
        with self._lock:
            if active_only:
                t_f = self.t_f
                offers = {oid: o for oid, o in self.offers.items() if max(o.intervals) >= t_f}
            else:
                offers = dict(self.offers)
            limits = {m: ProsumerLimits(m, d["epl"], d["ecl"]) for m, d in self.meters.items()}
            accounts = {o.account for o in offers.values()}
            return MarketState(
                offers=offers,
                groups=dict(self.config.groups),
                feeders=dict(self.config.feeders),
                limits=limits,
                account_group={a: self.accounts[a].group for a in accounts},
                account_owner={a: self.accounts[a].owner for a in accounts},
                finalized=self.finalized,
            )

    def market_snapshot(self) -> tuple[MarketState, int]:
        with self._lock:
            return self.market_state(active_only=True), self.t_f

    def post_solution(self, caller: str, sol: Solution) -> PostResult:
        """Verify an untrusted solution and keep it if it beats the candidate."""
        with self._lock:
            t_f = self.t_f
            for s, b, _ in sol.trades:
                if s not in self.offers or b not in self.offers:
                    return PostResult(False, "UnknownOffer")
            for key, p in sol.trades.items():
                if key[2] >= t_f:
                    continue
                if p == 0.0 and key not in self.finalized.trades:
                    continue
                if (self.finalized.trades.get(key) != p
                        or self.finalized.prices.get(key) != sol.prices.get(key)):
                    return PostResult(False, "PinMismatch")
            future = sol.restrict(lambda k: k[2] >= t_f and sol.trades[k] != 0.0)
            effective = self.finalized.merged(future)
            state = self.market_state()
            try:
                problems = check_feasible(effective, state, self.config.delta) + check_safety(effective, state)
            except UnknownOffer:
                return PostResult(False, "UnknownOffer")
            if problems:
                return PostResult(False, problems[0].kind)
            obj = objective_value(effective)
            if self.candidate is not None and not obj > self.candidate_objective + 1e-9:
                return PostResult(False, "Inferior", obj)
            payload = {"solver": caller, "objective": obj, "solution": future.to_json()}
            self._apply_SolutionPosted(payload)
            self._emit("SolutionPosted", payload)
            return PostResult(True, "Accepted", obj)

    def _apply_SolutionPosted(self, p: dict) -> None:
        future = Solution.from_json(p["solution"])
        self.candidate = self.finalized.merged(future)
        self.candidate_objective = p["objective"]

    # ------------------------------------------------------------ finalize
    def finalize(self, caller: str) -> Solution:
        """Fix trades for ``t_f``, settle them, release expired escrow, advance the interval."""
        with self._lock:
            t = self.current_interval
            if self.clock.now() < self.interval_end(t) - 1e-9:
                raise TooEarly(f"interval {t} ends at {self.interval_end(t):g}, now {self.clock.now():g}")
            t_f = self.t_f
            chosen = Solution({}, {})
            if self.candidate is not None:
                chosen = self.candidate.restrict(lambda k: k[2] == t_f and self.candidate.trades[k] > 0.0)
            payload = {"caller": caller, "finalized_interval": t_f, "trades": chosen.to_json()}
            self._apply_Finalized(payload)
            self._emit("Finalized", payload)
            return chosen

    def _take_escrow(self, offer_id: str, kind: str, t: int, amount: float) -> list[tuple[tuple, float]]:
        bucket = self.escrow.get(offer_id, {})
        need = amount
        out = []
        for k in sorted((k for k in bucket if k[0] == kind and t in k[1]), key=_sort_key):
            take = min(bucket[k], need)
            if take > 0:
                _add(bucket, k, -take)
                out.append((k, take))
                need -= take
            if need <= 1e-12:
                break
        if need > 1e-5:
            raise LedgerError(f"escrow of {offer_id} short by {need:g} kWh at interval {t}")
        return out

    def _apply_Finalized(self, p: dict) -> None:
        t_f = p["finalized_interval"]
        chosen = Solution.from_json(p["trades"])
        delta = self.config.delta
        for (s_id, b_id, t), power in sorted(chosen.trades.items()):
            s, b = self.offers[s_id], self.offers[b_id]
            energy = power * delta
            for k, amt in self._take_escrow(s_id, EPA, t, energy):
                self._ensure_anonymous(b.account, k[2])
                _add(self.balances[b.account], (k[0], k[1], k[2], True), amt)
            for k, amt in self._take_escrow(b_id, ECA, t, energy):
                _add(self.balances[s.account], (k[0], k[1], k[2], True), amt)
            money = round(chosen.prices[(s_id, b_id, t)] * energy * 1000)
            self.currency[b.account] -= money
            self.currency[s.account] += money
        self.finalized = self.finalized.merged(chosen)
        for oid, bucket in self.escrow.items():
            owner = self.offers[oid].account
            for k in [k for k in bucket if max(k[1]) <= t_f]:
                _add(self.balances[owner], k, bucket.pop(k))
        self.escrow = {oid: b for oid, b in self.escrow.items() if b}
        self.current_interval += 1

    # --------------------------------------------------------------- deposit
    def deposit(self, caller: str, meter_account: str, assets: Sequence[Asset] | None = None) -> list[Asset]:
        """Move the caller's settled assets (all intervals finalised) to the meter's account."""
        with self._lock:
            if caller not in self.accounts:
                raise UnknownAccount(caller)
            frontier = self.last_finalized
            bucket = self.balances[caller]
            if assets is None:
                assets = [_key_asset(k, v) for k, v in sorted(bucket.items(), key=lambda kv: _sort_key(kv[0]))
                          if max(k[1]) <= frontier]
            for a in assets:
                if max(a.intervals) > frontier:
                    raise IntervalClosed(f"asset for interval {max(a.intervals)} is not settled yet")
                if bucket.get(a.key, 0.0) + EPS < a.amount:
                    raise InsufficientAssets(f"{caller} lacks {a.amount:g} kWh of {a.kind}")
            payload = {"account": caller, "meter_account": meter_account, "group": self.accounts[caller].group,
                       "assets": [a.to_json() for a in assets]}
            self._apply_AssetsDeposited(payload)
            self._emit("AssetsDeposited", payload)
            return list(assets)

    def _apply_AssetsDeposited(self, p: dict) -> None:
        self._ensure_anonymous(p["meter_account"], p["group"])
        for aj in p["assets"]:
            a = Asset.from_json(aj)
            amount = min(a.amount, self.balances[p["account"]].get(a.key, 0.0))
            _add(self.balances[p["account"]], a.key, -amount)
            _add(self.balances[p["meter_account"]], a.key, amount)

    # ------------------------------------------------------------ invariants
    def check_conservation(self) -> list[tuple]:
        """(group, kind, intervals) buckets whose held total differs from the minted total."""
        with self._lock:
            held: dict[tuple, float] = {}
            for bucket in list(self.balances.values()) + list(self.escrow.values()):
                for (kind, intervals, group, _), v in bucket.items():
                    held[(group, kind, intervals)] = held.get((group, kind, intervals), 0.0) + v
            bad = []
            for k in set(held) | set(self.minted):
                if abs(held.get(k, 0.0) - self.minted.get(k, 0.0)) > 1e-6:
                    bad.append((k, self.minted.get(k, 0.0), held.get(k, 0.0)))
            return bad

    # ---------------------------------------------------- snapshot and replay
    def state_dict(self) -> dict:
        with self._lock:
            def bucket_json(b: Bucket) -> list:
                return [[k[0], sorted(k[1]), k[2], k[3], v] for k, v in sorted(b.items(), key=lambda kv: _sort_key(kv[0]))]

            return {
                "current_interval": self.current_interval,
                "meters": {m: dict(d) for m, d in sorted(self.meters.items())},
                "accounts": {a: {"kind": r.kind, "group": r.group, **({"meter": r.owner} if r.owner else {})}
                             for a, r in sorted(self.accounts.items())},
                "balances": {a: bucket_json(b) for a, b in sorted(self.balances.items()) if b},
                "currency": dict(sorted(self.currency.items())),
                "offers": [o.to_json() for o in self.offers.values()],
                "escrow": {o: bucket_json(b) for o, b in sorted(self.escrow.items())},
                "candidate": None if self.candidate is None else self.candidate.to_json(),
                "candidate_objective": self.candidate_objective,
                "finalized": self.finalized.to_json(),
                "withdrawals": [[m, k, t, v] for (m, k, t), v in sorted(self.withdrawals.items())],
                "head": len(self.events),
            }

    def state_hash(self) -> str:
        blob = json.dumps(self.state_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def export_jsonl(self, path) -> None:
        with self._lock, open(path, "w") as fh:
            fh.write(json.dumps({"genesis": self.config.to_json()}, sort_keys=True) + "\n")
            for ev in self.events:
                fh.write(json.dumps(ev.to_json(), sort_keys=True) + "\n")

    @classmethod
    def replay(cls, lines: Iterable[str]) -> "Ledger":
        """Rebuild a ledger from an exported log; raises :class:`ReplayError` on a bad line."""
        ledger = None
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReplayError(lineno, f"invalid JSON ({exc.msg})") from None
            try:
                if ledger is None:
                    ledger = cls(LedgerConfig.from_json(rec["genesis"]))
                    continue
                kind = rec["kind"]
                if rec["seq"] != len(ledger.events):
                    raise ReplayError(lineno, f"expected seq {len(ledger.events)}, got {rec['seq']}")
                name = "OfferPosted" if kind in ("SellingOfferPosted", "BuyingOfferPosted") else kind
                apply = getattr(ledger, f"_apply_{name}", None)
                if apply is None:
                    raise ReplayError(lineno, f"unknown event kind {kind!r}")
                apply(rec["payload"])
                ledger.events.append(Event(rec["seq"], kind, rec["payload"], rec["interval"]))
            except ReplayError:
                raise
            except (KeyError, TypeError, ValueError, LedgerError) as exc:
                raise ReplayError(lineno, f"{type(exc).__name__}: {exc}") from None
        if ledger is None:
            raise ReplayError(0, "empty log")
        return ledger
