from .config import ConfigError, ScenarioConfig, load_config, packaged_config_path, parse_config
from .devices import Battery, Profiles, build_profiles, dispatch_setpoint
from .engine import BarrierTimeout, InvariantViolation, RunResult, World, run_scenario, write_outputs
from .sweep import SweepRow, horizon_sweep, is_non_decreasing, saturation_point

__all__ = [
    "ConfigError", "ScenarioConfig", "load_config", "packaged_config_path", "parse_config",
    "Battery", "Profiles", "build_profiles", "dispatch_setpoint",
    "BarrierTimeout", "InvariantViolation", "RunResult", "World", "run_scenario", "write_outputs",
    "SweepRow", "horizon_sweep", "is_non_decreasing", "saturation_point",
]
