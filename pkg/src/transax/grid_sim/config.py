"""Scenario configuration: JSON document plus validation with line-anchored errors."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..market import Feeder, Group, ProsumerLimits, derive_group_limits


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {msg}")


@dataclass(frozen=True)
class BatterySpec:
    capacity: float  # kWh
    charge: float  # kWh at start
    max_power: float  # kW
    efficiency: float = 0.95


@dataclass(frozen=True)
class NodeSpec:
    id: str
    feeder: str
    role: str  # producer | consumer
    epl: float
    ecl: float
    solar_peak: float = 0.0
    base_load: float = 0.0
    evening_load: float = 0.0
    battery: BatterySpec | None = None


@dataclass(frozen=True)
class Timing:
    delta_minutes: float = 15.0
    subtick_minutes: float = 2.0
    start_minute: int = 8 * 60
    end_minute: int = 20 * 60
    t_clear: int = 1
    horizon: int = 30
    lookahead: int = 3

    @property
    def delta(self) -> float:
        """Interval length in hours."""
        return self.delta_minutes / 60.0

    @property
    def first_interval(self) -> int:
        return int(self.start_minute // self.delta_minutes)

    @property
    def last_interval(self) -> int:
        return int(self.end_minute // self.delta_minutes) - 1

    @property
    def intervals(self) -> range:
        return range(self.first_interval, self.last_interval + 1)

    def clock(self, t: int) -> str:
        m = int(round(t * self.delta_minutes))
        return f"{m // 60:02d}:{m % 60:02d}"


@dataclass(frozen=True)
class Prices:
    pi_s: float = 0.5
    pi_b: float = 4.0
    solar_reserve: float = 1.0
    battery_reserve: float = 2.0
    buy_reserve: float = 3.0


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    timing: Timing
    prices: Prices
    feeders: dict[str, Feeder]
    groups: dict[str, Group]
    nodes: dict[str, NodeSpec]
    profiles: dict = field(default_factory=lambda: {"generator": "bell"})
    forecast: str = "perfect"
    mixing: bool = True
    crypto: str = "hybrid"
    solvers: tuple[str, ...] = ("lp", "greedy")
    sign_convention: str = "verbatim"
    base_dir: Path = Path(".")

    @property
    def producers(self) -> list[NodeSpec]:
        return [n for n in self.nodes.values() if n.role == "producer"]

    @property
    def consumers(self) -> list[NodeSpec]:
        return [n for n in self.nodes.values() if n.role == "consumer"]

    def limits(self) -> dict[str, ProsumerLimits]:
        return {n.id: ProsumerLimits(n.id, n.epl, n.ecl) for n in self.nodes.values()}


def _line_of(text: str, needle: str) -> int | None:
    m = re.search(re.escape(json.dumps(needle)), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _num(v) -> float:
    if v in ("inf", None):
        return math.inf
    return float(v)


def _hhmm(v: str) -> int:
    h, m = v.split(":")
    return int(h) * 60 + int(m)


def parse_config(text: str, source: str = "<config>", base_dir: Path = Path(".")) -> ScenarioConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno, source) from None

    def fail(msg: str, key: str) -> ConfigError:
        return ConfigError(msg, _line_of(text, key), source)

    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object", 1, source)
    for key in ("feeders", "groups", "nodes"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}", 1, source)
    try:
        tj = doc.get("timing", {})
        timing = Timing(
            delta_minutes=float(tj.get("delta_minutes", 15)),
            subtick_minutes=float(tj.get("subtick_minutes", 2)),
            start_minute=_hhmm(tj.get("start", "08:00")),
            end_minute=_hhmm(tj.get("end", "20:00")),
            t_clear=int(tj.get("t_clear", 1)),
            horizon=int(tj.get("horizon", 30)),
            lookahead=int(tj.get("lookahead", 3)),
        )
    except (ValueError, AttributeError) as exc:
        raise fail(f"bad timing block ({exc})", "timing") from None
    if timing.subtick_minutes > timing.delta_minutes:
        raise fail("subtick_minutes must not exceed delta_minutes", "subtick_minutes")
    if timing.end_minute <= timing.start_minute:
        raise fail("end must be after start", "end")
    if timing.horizon < 1 or timing.t_clear < 0 or timing.lookahead < 0:
        raise fail("horizon >= 1, t_clear >= 0 and lookahead >= 0 are required", "timing")
    prices = Prices(**doc.get("prices", {}))

    nodes: dict[str, NodeSpec] = {}
    for nj in doc["nodes"]:
        try:
            bj = nj.get("battery")
            battery = BatterySpec(float(bj["capacity"]), float(bj["charge"]), float(bj["max_power"]),
                                  float(bj.get("efficiency", 0.95))) if bj else None
            node = NodeSpec(nj["id"], nj["feeder"], nj["role"], float(nj["epl"]), float(nj["ecl"]),
                            float(nj.get("solar_peak", 0.0)), float(nj.get("base_load", 0.0)),
                            float(nj.get("evening_load", 0.0)), battery)
        except (KeyError, TypeError, ValueError) as exc:
            raise fail(f"bad node entry ({exc})", nj.get("id", "nodes") if isinstance(nj, dict) else "nodes") from None
        if node.role not in ("producer", "consumer"):
            raise fail(f"node {node.id}: role must be producer or consumer", node.id)
        if battery and not (0 <= battery.charge <= battery.capacity and 0 < battery.efficiency <= 1):
            raise fail(f"node {node.id}: battery charge or efficiency out of range", node.id)
        if node.id in nodes:
            raise fail(f"duplicate node {node.id}", node.id)
        nodes[node.id] = node

    feeders: dict[str, Feeder] = {}
    for fj in doc["feeders"]:
        fid = fj.get("id")
        members = frozenset(n.id for n in nodes.values() if n.feeder == fid)
        feeders[fid] = Feeder(fid, _num(fj.get("c_int")), _num(fj.get("c_ext")), members)
    for n in nodes.values():
        if n.feeder not in feeders:
            raise fail(f"node {n.id} references unknown feeder {n.feeder}", n.id)

    limits = {n.id: ProsumerLimits(n.id, n.epl, n.ecl) for n in nodes.values()}
    groups: dict[str, Group] = {}
    for gj in doc["groups"]:
        gid = gj.get("id")
        fids = gj.get("feeders", [])
        unknown = [f for f in fids if f not in feeders]
        if not fids or unknown:
            raise fail(f"group {gid}: feeders missing or unknown ({unknown})", gid)
        c_int, c_ext = gj.get("c_int", "derive"), gj.get("c_ext", "derive")
        if "derive" in (c_int, c_ext):
            derived = derive_group_limits([feeders[f] for f in fids], limits.values()).shared
            c_int = derived if c_int == "derive" else c_int
            c_ext = derived if c_ext == "derive" else c_ext
        groups[gid] = Group(gid, frozenset(fids), _num(c_int), _num(c_ext))
    seen: dict[str, str] = {}
    for g in groups.values():
        for f in g.feeders:
            if f in seen:
                raise fail(f"feeder {f} is in groups {seen[f]} and {g.id}", f)
            seen[f] = g.id
    orphans = sorted(set(feeders) - set(seen))
    if orphans:
        raise fail(f"feeders without a group: {orphans}", orphans[0])

    return ScenarioConfig(
        name=doc.get("name", "scenario"),
        seed=int(doc.get("seed", 0)),
        timing=timing,
        prices=prices,
        feeders=feeders,
        groups=groups,
        nodes=nodes,
        profiles=doc.get("profiles", {"generator": "bell"}),
        forecast=doc.get("forecast", "perfect"),
        mixing=bool(doc.get("mixing", True)),
        crypto=doc.get("crypto", "hybrid"),
        solvers=tuple(doc.get("solvers", ("lp", "greedy"))),
        sign_convention=doc.get("sign_convention", "verbatim"),
        base_dir=base_dir,
    )


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(exc.strerror or str(exc), None, str(path)) from None
    return parse_config(text, str(path), path.parent)


def packaged_config_path(name: str = "fifteen_node.json") -> Path:
    return Path(str(resources.files("transax") / "data" / name))
