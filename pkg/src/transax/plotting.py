"""SVG line charts rendered from the CSV outputs (CSV stays the contract)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "transax"  # stable element ids, so reruns are byte-identical

CHARTS = {
    "substation.csv": ("time", ["baseline_kw", "market_kw"], "Substation load", "kW"),
    "trades.csv": ("interval", ["sell_total_kw", "buy_total_kw", "traded_kw"], "Offered and traded power", "kW"),
    "charge.csv": ("time", ["mean_charge_pct"], "Mean battery charge", "%"),
    "horizon_sweep.csv": ("T_h", ["energy_traded_kw"], "Energy traded vs planning horizon", "kW"),
}


def _columns(path: Path) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    return {k: [r[k] for r in rows] for k in reader.fieldnames or []}


def line_chart(csv_path: str | Path, x: str, ys: list[str], out: str | Path, title: str, ylabel: str) -> Path:
    cols = _columns(Path(csv_path))
    xs = cols.get(x, [])
    fig, ax = plt.subplots(figsize=(8, 3.5))
    pos = list(range(len(xs)))
    for y in ys:
        vals = [float(v) if v not in ("", None) else float("nan") for v in cols.get(y, [])]
        if vals and not all(v != v for v in vals):
            ax.plot(pos, vals, label=y, linewidth=1.4)
    step = max(1, len(xs) // 12)
    ax.set_xticks(pos[::step])
    ax.set_xticklabels(xs[::step], rotation=45, ha="right", fontsize=8)
    ax.set_xlabel(x)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def plot_outputs(out_dir: str | Path) -> list[Path]:
    """One SVG per known CSV present in ``out_dir``."""
    out_dir = Path(out_dir)
    made = []
    for name, (x, ys, title, unit) in CHARTS.items():
        src = out_dir / name
        if src.exists():
            made.append(line_chart(src, x, ys, src.with_suffix(".svg"), title, unit))
    return made
