"""Figures rendered from the CSV tables.  Uses the object-oriented matplotlib
API only, so no display backend is needed."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

from matplotlib.figure import Figure

from .report import read_table


def _save(fig: Figure, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def plot_ospa_sweep(rows, path) -> Path | None:
    """Averaged OSPA against the swept parameter, one line per variant."""
    rows = [r for r in rows if r["sweep_value"] != ""]
    if not rows:
        return None
    series = defaultdict(list)
    for r in rows:
        series[r["variant"]].append((float(r["sweep_value"]), float(r["mean_ospa_m"])))
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for name, pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xscale("log")
    ax.set_xlabel(rows[0]["sweep_parameter"])
    ax.set_ylabel("mean OSPA [m]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, Path(path))


def plot_ospa_time(rows, path) -> Path:
    """Run-averaged OSPA over time, one line per (variant, sweep value)."""
    acc = defaultdict(lambda: defaultdict(list))
    for r in rows:
        acc[(r["variant"], r["sweep_value"])][int(r["t"])].append(float(r["ospa_m"]))
    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot()
    for (name, value), by_t in sorted(acc.items()):
        ts = sorted(by_t)
        label = name if value == "" else f"{name} @ {value}"
        ax.plot(ts, [sum(by_t[t]) / len(by_t[t]) for t in ts], label=label, lw=1)
    ax.set_xlabel("time step")
    ax.set_ylabel("OSPA [m]")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    return _save(fig, Path(path))


def plot_cdf(rows, path) -> Path:
    """Vehicle position-error CDFs, one panel per vehicle."""
    curves = defaultdict(list)
    for r in rows:
        key = (int(r["vehicle_id"]), r["method"], r["sweep_value"])
        curves[key].append((float(r["error_m"]), float(r["quantile"])))
    vids = sorted({k[0] for k in curves})
    fig = Figure(figsize=(5 * max(len(vids), 1), 4))
    for i, vid in enumerate(vids):
        ax = fig.add_subplot(1, len(vids), i + 1)
        for (v, method, value), pts in sorted(curves.items()):
            if v != vid:
                continue
            label = method if value == "" else f"{method} @ {value}"
            ax.step([p[0] for p in pts], [p[1] for p in pts], where="post", label=label)
        ax.set_title(f"vehicle {vid}")
        ax.set_xlabel("position error [m]")
        ax.set_ylabel("CDF")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize="small")
    return _save(fig, Path(path))


def render_all(results_dir, out_dir=None) -> list:
    """Render every figure the tables in ``results_dir`` support."""
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir else results_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if (results_dir / "ospa.csv").exists():
        p = plot_ospa_sweep(read_table(results_dir / "ospa.csv"), out_dir / "ospa_sweep.png")
        if p:
            written.append(p)
    if (results_dir / "ospa_steps.csv").exists():
        rows = read_table(results_dir / "ospa_steps.csv")
        if rows:
            written.append(plot_ospa_time(rows, out_dir / "ospa_time.png"))
    if (results_dir / "cdf.csv").exists():
        rows = read_table(results_dir / "cdf.csv")
        if rows:
            written.append(plot_cdf(rows, out_dir / "vehicle_error_cdf.png"))
    return written
