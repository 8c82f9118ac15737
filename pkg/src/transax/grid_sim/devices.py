"""Device models: solar and load profiles, batteries, dispatch."""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass

from .config import NodeSpec, ScenarioConfig

SOLAR_PEAK_HOUR = 12.75
SOLAR_WIDTH_HOURS = 2.4


def bell_solar(peak_kw: float, hour: float) -> float:
    if not 6.5 <= hour <= 19.0:
        return 0.0
    return peak_kw * math.exp(-0.5 * ((hour - SOLAR_PEAK_HOUR) / SOLAR_WIDTH_HOURS) ** 2)


def _load_shape(node: NodeSpec, hour: float) -> float:
    evening = math.exp(-0.5 * ((hour - 18.5) / 1.3) ** 2)
    morning = 0.4 * math.exp(-0.5 * ((hour - 8.5) / 1.0) ** 2)
    return node.base_load + node.evening_load * (evening + morning)


@dataclass
class Profiles:
    """kW per node per interval, evaluated at interval midpoints."""

    solar: dict[str, dict[int, float]]
    load: dict[str, dict[int, float]]


def generate_profiles(cfg: ScenarioConfig) -> Profiles:
    rng = random.Random(f"profiles:{cfg.seed}")
    tm = cfg.timing
    solar: dict[str, dict[int, float]] = {}
    load: dict[str, dict[int, float]] = {}
    for node in sorted(cfg.nodes.values(), key=lambda n: n.id):
        scale = 1.0 + rng.uniform(-0.1, 0.1)
        solar[node.id], load[node.id] = {}, {}
        for t in tm.intervals:
            hour = (t + 0.5) * tm.delta
            cloud = 1.0 - 0.15 * rng.random()
            solar[node.id][t] = round(bell_solar(node.solar_peak * scale, hour) * cloud, 6)
            load[node.id][t] = round(_load_shape(node, hour) * (1.0 + rng.uniform(-0.05, 0.05)), 6)
    return Profiles(solar, load)


def read_profiles_csv(path, cfg: ScenarioConfig) -> Profiles:
    """Rows ``interval,node,solar_kw,load_kw``; missing entries count as zero."""
    solar = {n: {t: 0.0 for t in cfg.timing.intervals} for n in cfg.nodes}
    load = {n: {t: 0.0 for t in cfg.timing.intervals} for n in cfg.nodes}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t, node = int(row["interval"]), row["node"]
            if node in solar and t in solar[node]:
                solar[node][t] = float(row["solar_kw"])
                load[node][t] = float(row["load_kw"])
    return Profiles(solar, load)


def build_profiles(cfg: ScenarioConfig) -> Profiles:
    if "path" in cfg.profiles:
        return read_profiles_csv(cfg.base_dir / cfg.profiles["path"], cfg)
    return generate_profiles(cfg)


@dataclass
class Battery:
    capacity: float
    charge: float
    max_power: float
    efficiency: float = 0.95

    def deliverable(self) -> float:
        """Energy (kWh) the battery could still put out."""
        return self.charge * self.efficiency

    def limits(self, delta: float) -> tuple[float, float]:
        """(max discharge kW, max charge kW) for one interval of ``delta`` hours."""
        dis = min(self.max_power, self.charge * self.efficiency / delta)
        chg = min(self.max_power, (self.capacity - self.charge) / (self.efficiency * delta))
        return dis, chg

    def apply(self, power: float, delta: float) -> tuple[float, float]:
        """Run at ``power`` kW (positive discharges) for ``delta`` hours.

        Returns (actual power, deviation = requested - actual).
        """
        dis, chg = self.limits(delta)
        actual = min(max(power, -chg), dis)
        if actual >= 0:
            self.charge -= actual * delta / self.efficiency
        else:
            self.charge += -actual * delta * self.efficiency
        self.charge = min(max(self.charge, 0.0), self.capacity)
        return actual, power - actual


def dispatch_setpoint(traded_net: float, solar: float, load: float) -> float:
    """Battery power that makes the node's net output equal its net trades."""
    return traded_net - (solar - load)
