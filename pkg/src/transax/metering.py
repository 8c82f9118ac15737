"""Smart-meter emulation: deposit audits and residual bills.

Asset amounts are attributed to the last interval they are valid for; with
single-interval assets this is exactly per-interval bookkeeping.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .ledger import ECA, EPA, Asset, Event

EPS = 1e-6


class MissingPolicy(KeyError):
    pass


class IncompleteCycle(ValueError):
    pass


@dataclass
class MeterRecord:
    prosumer_id: str
    interval: int
    measured: float = 0.0  # net production E_u^t in kWh; negative means net consumption
    epa_withdrawn: float = 0.0
    epa_deposited: float = 0.0  # every EPA that came back, traded records included
    eca_withdrawn: float = 0.0
    eca_deposited: float = 0.0
    epa_traded_in: float = 0.0  # EPA records received for energy bought
    eca_traded_in: float = 0.0  # ECA records received for energy sold
    expected_residual: float | None = None
    safety_violation: bool = False

    @property
    def delta_epa(self) -> float:
        return self.epa_deposited - self.epa_withdrawn

    @property
    def residual(self) -> float:
        return self.measured + self.delta_epa


@dataclass(frozen=True)
class AuditResult:
    passed: bool
    epa_discrepancy: float = 0.0
    eca_discrepancy: float = 0.0

    @property
    def discrepancy(self) -> float:
        return self.epa_discrepancy + self.eca_discrepancy


def audit_deposit(record: MeterRecord) -> AuditResult:
    """Every withdrawn asset must come back unused or as its traded counterpart."""
    epa_back = (record.epa_deposited - record.epa_traded_in) + record.eca_traded_in
    eca_back = (record.eca_deposited - record.eca_traded_in) + record.epa_traded_in
    d_epa = record.epa_withdrawn - epa_back
    d_eca = record.eca_withdrawn - eca_back
    return AuditResult(abs(d_epa) <= EPS and abs(d_eca) <= EPS, d_epa, d_eca)


@dataclass
class PricePolicy:
    sell: Mapping[int, float]  # pi^S: DSO buys residual production
    buy: Mapping[int, float]  # pi^B: DSO sells residual consumption

    def __post_init__(self) -> None:
        if any(v < 0 for v in list(self.sell.values()) + list(self.buy.values())):
            raise ValueError("prices must be non-negative")

    @classmethod
    def flat(cls, pi_s: float, pi_b: float, intervals: Iterable[int]) -> "PricePolicy":
        ts = list(intervals)
        return cls({t: pi_s for t in ts}, {t: pi_b for t in ts})

    def at(self, t: int) -> tuple[float, float]:
        if t not in self.sell or t not in self.buy:
            raise MissingPolicy(t)
        return self.sell[t], self.buy[t]


def compute_bill(energy: float, delta_epa: float, policy: PricePolicy, t: int,
                 sign_convention: str = "verbatim") -> float:
    """Residual ``r = E + dEPA`` priced at pi^S when negative, pi^B otherwise.

    ``sign_convention="swapped"`` is the alternative reading in which a net
    importer (``r < 0``) pays ``-r * pi^B`` and a net exporter is paid at pi^S.
    """
    pi_s, pi_b = policy.at(t)
    r = energy + delta_epa
    if sign_convention == "verbatim":
        return r * pi_s if r < 0 else r * pi_b
    if sign_convention == "swapped":
        return -r * pi_b if r < 0 else -r * pi_s
    raise ValueError(f"unknown sign convention {sign_convention!r}")


def check_limits(record: MeterRecord, epl: float, ecl: float, delta: float) -> bool:
    """True when measured production/consumption stays within EPL/ECL (closed bound)."""
    e = record.measured
    ok = (e <= epl * delta + EPS) if e >= 0 else (-e <= ecl * delta + EPS)
    record.safety_violation = not ok
    return ok


@dataclass
class Bill:
    prosumer_id: str
    cycle_start: int
    cycle_end: int
    per_interval: dict[int, float]

    @property
    def total(self) -> float:
        return math.fsum(self.per_interval.values())

    @property
    def total_millicurrency(self) -> int:
        return round(self.total * 1000)

    def dso_payload(self) -> dict:
        """The only thing the DSO learns: one total per prosumer per cycle."""
        return {"prosumer": self.prosumer_id, "cycle_start": self.cycle_start,
                "cycle_end": self.cycle_end, "total_millicurrency": self.total_millicurrency}

    def dso_message(self) -> str:
        return json.dumps(self.dso_payload(), sort_keys=True)


def billing_cycle(records: Mapping[int, MeterRecord], policy: PricePolicy, start: int, end: int,
                  sign_convention: str = "verbatim") -> Bill:
    """Bill for intervals ``start..end`` inclusive; every interval needs a record."""
    missing = [t for t in range(start, end + 1) if t not in records]
    if missing:
        raise IncompleteCycle(f"no meter record for intervals {missing}")
    owners = {records[t].prosumer_id for t in range(start, end + 1)}
    if len(owners) != 1:
        raise ValueError(f"records from several prosumers: {sorted(owners)}")
    per = {t: compute_bill(records[t].measured, records[t].delta_epa, policy, t, sign_convention)
           for t in range(start, end + 1)}
    return Bill(owners.pop(), start, end, per)


@dataclass
class SmartMeter:
    """Tamper-proof meter for one prosumer.

    It knows the prosumer's named account, which is public, and its own
    anonymous deposit account. It learns withdrawals and deposits from
    ledger events and measurements from the simulator.
    """

    prosumer_id: str
    named_account: str
    meter_account: str
    records: dict[int, MeterRecord] = field(default_factory=dict)
    next_seq: int = 0

    def record(self, t: int) -> MeterRecord:
        if t not in self.records:
            self.records[t] = MeterRecord(self.prosumer_id, t)
        return self.records[t]

    def ingest(self, events: Iterable[Event]) -> None:
        for ev in events:
            self.next_seq = ev.seq + 1
            p = ev.payload
            if ev.kind == "AssetsWithdrawn" and p["account"] == self.named_account:
                rec = self.record(max(p["intervals"]))
                if p["kind"] == EPA:
                    rec.epa_withdrawn += p["amount"]
                else:
                    rec.eca_withdrawn += p["amount"]
            elif ev.kind == "AssetsDeposited" and p["meter_account"] == self.meter_account:
                for aj in p["assets"]:
                    self._deposited(Asset.from_json(aj))

    def _deposited(self, a: Asset) -> None:
        rec = self.record(max(a.intervals))
        if a.kind == EPA:
            rec.epa_deposited += a.amount
            if a.traded:
                rec.epa_traded_in += a.amount
        elif a.kind == ECA:
            rec.eca_deposited += a.amount
            if a.traded:
                rec.eca_traded_in += a.amount

    def measure(self, t: int, energy: float) -> MeterRecord:
        rec = self.record(t)
        rec.measured = energy
        return rec

    def audit(self, t: int) -> AuditResult:
        return audit_deposit(self.record(t))

    def write_audit_csv(self, path, policy: PricePolicy, sign_convention: str = "verbatim") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["interval", "E", "delta_epa", "residual", "bill", "audit"])
            for t in sorted(self.records):
                rec = self.records[t]
                bill = compute_bill(rec.measured, rec.delta_epa, policy, t, sign_convention)
                w.writerow([t, _fmt(rec.measured), _fmt(rec.delta_epa), _fmt(rec.residual), _fmt(bill),
                            "pass" if audit_deposit(rec).passed else "fail"])


def _fmt(x: float) -> str:
    return f"{x:.6f}"
