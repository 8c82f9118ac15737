"""``transax`` command line.

Exit codes: 0 success, 2 configuration error, 3 corrupted data,
4 internal invariant failure. ``TRANSAX_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import random
import sys
from pathlib import Path

from .grid_sim import (
    ConfigError,
    InvariantViolation,
    horizon_sweep,
    load_config,
    packaged_config_path,
    run_scenario,
    saturation_point,
    write_outputs,
)
from .ledger import EPA, Ledger, LedgerConfig, ReplayError
from .market import (
    EmptyGroup,
    Feeder,
    Group,
    MarketState,
    Offer,
    ProsumerLimits,
    check_feasible,
    check_safety,
    derive_group_limits,
    objective_value,
    privacy_cost,
)
from .mixer import EnvelopeBackend, HybridBackend, MixMember, run_mix
from .mixer.protocol import FAULTS
from .solver import SolverConfig, build_lp, greedy_match, solve_lp

EXIT_OK, EXIT_CONFIG, EXIT_CORRUPT, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("transax")


def _inf(v) -> float:
    return math.inf if v in (None, "inf") else float(v)


def _read_json(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(exc.strerror or str(exc), None, str(p)) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno, str(p)) from None


def _parse_horizons(spec: str) -> list[int]:
    out: set[int] = set()
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.update(range(int(lo), int(hi) + 1))
        else:
            out.add(int(part))
    if not out or min(out) < 0:
        raise ConfigError(f"bad horizon list {spec!r}", None, "--horizons")
    return sorted(out)


def _maybe_plot(args, out: Path) -> None:
    if args.plot:
        from .plotting import plot_outputs

        for svg in plot_outputs(out):
            print(f"wrote {svg}")


# ------------------------------------------------------------------ commands
def cmd_run_scenario(args) -> int:
    cfg = load_config(args.config or packaged_config_path())
    if args.seed is not None:
        cfg.seed = args.seed
    res = run_scenario(cfg, args.mode, timing=args.timing, realtime=args.realtime)
    out = Path(args.out)
    for path in write_outputs(res, out):
        log.info("wrote %s", path)
    if res.ledger is not None:
        res.ledger.export_jsonl(out / "ledger.jsonl")
        print(f"state_hash,{res.ledger.state_hash()}")
        print(f"energy_traded_kw,{res.total_traded_kw:.6f}")
        failed = sum(not ok for ok in res.audits.values())
        print(f"audit_failures,{failed}")
    _maybe_plot(args, out)
    return EXIT_OK


def _offers_state(doc: dict) -> tuple[MarketState, int, float, int]:
    try:
        offers = [Offer.from_json(o) for o in doc["offers"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad offer list ({exc})", None, "offers") from None
    groups = {g["id"]: Group(g["id"], frozenset(g["feeders"]), _inf(g.get("c_int")), _inf(g.get("c_ext")))
              for g in doc.get("groups", [{"id": "G", "feeders": ["F"]}])}
    feeders = {f["id"]: Feeder(f["id"], _inf(f.get("c_int")), _inf(f.get("c_ext")), frozenset(f.get("prosumers", [])))
               for f in doc.get("feeders", [{"id": "F"}])}
    default_group = next(iter(groups))
    account_group = {o.account: doc.get("account_group", {}).get(o.account, default_group) for o in offers}
    owners = doc.get("account_owner", {})
    limits = {p["id"]: ProsumerLimits(p["id"], _inf(p.get("epl")), _inf(p.get("ecl"))) for p in doc.get("limits", [])}
    state = MarketState.from_offers(offers, groups=groups, feeders=feeders, limits=limits,
                                    account_group=account_group,
                                    account_owner={a: owners.get(a) for a in account_group})
    t_f = int(doc.get("t_f", min((min(o.intervals) for o in offers), default=0)))
    return state, t_f, float(doc.get("delta_hours", 0.25)), int(doc.get("horizon", 30))


def cmd_solve_once(args) -> int:
    state, t_f, delta, horizon = _offers_state(_read_json(args.offers))
    if args.horizon is not None:
        horizon = args.horizon
    cfg = SolverConfig(horizon=horizon, delta=delta)
    if args.method == "greedy":
        sol = greedy_match(state, t_f, horizon, delta)
    else:
        lp = build_lp(state, t_f, cfg)
        if args.dump_lp:
            Path(args.dump_lp).write_text(lp.dump())
        sol = solve_lp(lp)
    if check_feasible(sol, state, delta) or check_safety(sol, state):
        print("solution failed verification", file=sys.stderr)
        return EXIT_INVARIANT
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["seller", "buyer", "interval", "power_kw", "price"])
    for s, b, t, p, pi in sol.to_json():
        w.writerow([s, b, t, f"{p:.6f}", f"{pi:.6f}"])
    print(f"# objective_kw,{objective_value(sol):.6f}")
    return EXIT_OK


def cmd_derive_limits(args) -> int:
    doc = _read_json(args.topology)
    feeders_doc = doc.get("feeders", [])
    if not feeders_doc:
        raise ConfigError("topology has no feeders", 1, args.topology)
    feeders, limits = {}, {}
    for f in feeders_doc:
        pros = f.get("prosumers", [])
        feeders[f["id"]] = Feeder(f["id"], _inf(f.get("c_int")), _inf(f.get("c_ext", f.get("c_int"))),
                                  frozenset(p["id"] for p in pros))
        for p in pros:
            limits[p["id"]] = ProsumerLimits(p["id"], float(p.get("epl", 0)), float(p.get("ecl", 0)))
    groups = doc.get("groups") or [{"id": "G", "feeders": sorted(feeders)}]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["group", "case", "c_production_kw", "c_consumption_kw", "c_g_kw", "privacy_cost_bound_kw"])
    for g in groups:
        members = [feeders[f] for f in g.get("feeders", []) if f in feeders]
        try:
            gl = derive_group_limits(members, limits.values())
        except EmptyGroup as exc:
            raise ConfigError(f"group {g.get('id')}: {exc}", None, args.topology) from None
        prosumers = [limits[p] for f in members for p in f.prosumers]
        bound = privacy_cost([p.epl for p in prosumers], [p.ecl for p in prosumers], gl.shared)
        w.writerow([g["id"], gl.case, f"{gl.production.value:g}", f"{gl.consumption.value:g}",
                    f"{gl.shared:g}", f"{bound:g}"])
    return EXIT_OK


def cmd_mix_demo(args) -> int:
    if args.participants < 1:
        raise ConfigError("--participants must be positive", None, "--participants")
    inf = math.inf
    ledger = Ledger(LedgerConfig({"F": Feeder("F", inf, inf, frozenset())},
                                 {"G": Group("G", frozenset({"F"}), inf, inf)}, delta=0.25, t_clear=0,
                                 start_interval=0))
    rng = random.Random(args.seed)
    members = []
    for i in range(args.participants):
        meter, named = f"meter{i}", f"named{i}"
        ledger.register_smart_meter("DSO", meter, "F", 20.0, 20.0)
        ledger.register_prosumer(named, meter, ledger.certify("DSO", meter, named))
        asset = ledger.withdraw_assets(named, EPA, args.amount, {1})
        fault = args.fault if (args.fault != "none" and i == args.faulty_index) else None
        members.append(MixMember(meter, named, f"anon-{rng.getrandbits(48):012x}", asset, fault))
    before = ledger.state_hash()
    crypto = EnvelopeBackend() if args.crypto == "envelope" else HybridBackend()
    from .mixer import Bus

    bus = Bus()
    session = run_mix(members, ledger, f"demo-{args.seed}", crypto, rng, bus)
    if args.trace:
        Path(args.trace).write_text(bus.trace() + "\n")
    print(f"order,{' '.join(session.order)}")
    print(f"status,{session.phase.value}")
    if session.ok:
        for acct, asset in session.receipt.outputs:
            print(f"output,{acct},{asset.kind},{asset.amount:g},{sorted(asset.intervals)[0]},{asset.group}")
    else:
        print(f"blame,{session.blame}")
        print(f"reason,{session.reason}")
        print(f"balances_unchanged,{ledger.state_hash() == before}")
    return EXIT_OK


def cmd_replay_ledger(args) -> int:
    try:
        with open(args.log) as fh:
            ledger = Ledger.replay(fh)
    except OSError as exc:
        raise ConfigError(exc.strerror or str(exc), None, args.log) from None
    print(f"events,{len(ledger.events)}")
    print(f"state_hash,{ledger.state_hash()}")
    return EXIT_OK


def cmd_sweep_horizon(args) -> int:
    cfg = load_config(args.config or packaged_config_path())
    if args.seed is not None:
        cfg.seed = args.seed
    rows = horizon_sweep(cfg, _parse_horizons(args.horizons), timing=args.timing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "horizon_sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T_h", "energy_traded_kw", "solve_ms", "peak_mem_estimate"])
        for r in rows:
            w.writerow([r.horizon, f"{r.energy_traded_kw:.6f}", f"{r.solve_ms:.3f}", f"{r.peak_mem_mb:.3f}"])
    sat = saturation_point(rows)
    print(f"wrote {path}")
    print(f"saturation_T_h,{sat if sat is not None else 'none'}")
    _maybe_plot(args, out)
    return EXIT_OK


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transax", description="Transactive microgrid market tools.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run-scenario", help="simulate a day and write the CSV set")
    r.add_argument("--config", help="scenario JSON (default: packaged fifteen_node.json)")
    r.add_argument("--mode", choices=["baseline", "market"], default="market", help="control run or full market")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--out", default="out", help="output directory (default: out)")
    r.add_argument("--timing", choices=["wall", "none"], default="wall",
                   help="record solver wall times, or zero them for byte-identical output")
    r.add_argument("--realtime", action="store_true", help="sleep one sub-tick of wall time per interval")
    r.add_argument("--plot", action="store_true", help="also render SVG charts next to the CSVs")
    r.set_defaults(func=cmd_run_scenario)

    s = sub.add_parser("solve-once", help="match one offer book and print the trades")
    s.add_argument("--offers", required=True, help="JSON offer book")
    s.add_argument("--method", choices=["lp", "greedy"], default="lp", help="matching method (default: lp)")
    s.add_argument("--horizon", type=int, help="override T_h from the offer book")
    s.add_argument("--dump-lp", help="write the LP in text form to this path")
    s.set_defaults(func=cmd_solve_once)

    d = sub.add_parser("derive-limits", help="group limits and worst-case privacy cost")
    d.add_argument("--topology", required=True, help="JSON topology: feeders with their prosumers, plus optional groups")
    d.set_defaults(func=cmd_derive_limits)

    m = sub.add_parser("mix-demo", help="run one mixing session on a scratch ledger")
    m.add_argument("--participants", type=int, default=3, help="number of members (default: 3)")
    m.add_argument("--amount", type=float, default=5.0, help="denomination in kWh (default: 5)")
    m.add_argument("--seed", type=int, default=0, help="randomness seed (default: 0)")
    m.add_argument("--crypto", choices=["hybrid", "envelope"], default="hybrid", help="crypto backend")
    m.add_argument("--fault", choices=["none", *FAULTS], default="none", help="inject a fault")
    m.add_argument("--faulty-index", type=int, default=0, help="member index that misbehaves")
    m.add_argument("--trace", help="write the bus transcript as JSON lines")
    m.set_defaults(func=cmd_mix_demo)

    rl = sub.add_parser("replay-ledger", help="rebuild a ledger from its event log and print the state hash")
    rl.add_argument("--log", required=True, help="ledger.jsonl written by run-scenario")
    rl.set_defaults(func=cmd_replay_ledger)

    h = sub.add_parser("sweep-horizon", help="energy traded for a range of planning horizons")
    h.add_argument("--config", help="scenario JSON (default: packaged fifteen_node.json)")
    h.add_argument("--horizons", default="0-48", help="list such as 1,2,5 or a range 1-40 (default: 0-48)")
    h.add_argument("--seed", type=int, help="override the scenario seed")
    h.add_argument("--out", default="out", help="output directory (default: out)")
    h.add_argument("--timing", choices=["wall", "none"], default="wall", help="record or zero timings")
    h.add_argument("--plot", action="store_true", help="also render an SVG chart")
    h.set_defaults(func=cmd_sweep_horizon)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("TRANSAX_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReplayError as exc:
        print(f"corrupt log: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (InvariantViolation, AssertionError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
