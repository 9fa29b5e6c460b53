"""Render figures and a text summary from a finished artifact directory.

Everything here is read-only over the delimited output and field files the
run commands wrote; figures land next to them as PNG. Matplotlib is forced
onto the Agg backend so reports render identically on headless machines.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import DependencyError
from .fieldio import read_field, read_trajectory_csv

__all__ = ["render_report"]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _require(path: Path) -> Path:
    if not path.exists():
        raise DependencyError(
            f"missing artifact {path}; run the flow command for this config first")
    return path


def _load_json(path: Path):
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    return None


def _figure_series(plt, art: Path, data) -> Path:
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7.0, 6.0), sharex=True)
    ax0.plot(data["t"], data["sup_phi"], label="sup phi")
    ax0.plot(data["t"], data["inf_phi"], label="inf phi")
    ax0.set_ylabel("potential bounds")
    ax0.legend(loc="best")
    ax0.grid(True, alpha=0.3)
    ax1.plot(data["t"], data["I_t"], color="tab:green")
    ax1.set_ylabel("weighted integral I(t)")
    ax1.set_xlabel("t")
    ax1.grid(True, alpha=0.3)
    fig.tight_layout()
    out = art / "flow_series.png"
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def _figure_convergence(plt, art: Path, data, verify_meta) -> Path:
    t = data["t"]
    dist = data["dist_static"]
    mask = np.isfinite(dist) & (dist > 0)
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    ax.semilogy(t[mask], dist[mask], label="sup |phi - phi_inf|")
    if verify_meta and "rate" in verify_meta:
        fit = verify_meta["rate"]
        lo, hi = fit["window"]
        tt = np.linspace(lo, min(hi, float(t.max())), 50)
        model = fit["c_fit"] * (1.0 + tt) * np.exp(fit["slope"] * tt)
        ax.semilogy(tt, model, "--", color="k",
                    label=f"fit slope {fit['slope']:.3f}")
    ax.set_xlabel("t")
    ax.set_ylabel("distance to static profile")
    ax.legend(loc="best")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    out = art / "convergence.png"
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def _figure_excess(plt, art: Path, data) -> Path:
    t = data["t"]
    ex = data["excess_IplusIprime"]
    mask = np.isfinite(ex)
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    ax.plot(t[mask], ex[mask], color="tab:red")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("(I' + I) minus admissible bound")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out = art / "excess.png"
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def _figure_steps(plt, art: Path, data) -> Path:
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7.0, 6.0), sharex=True)
    ax0.semilogy(data["t"], data["dt"], color="tab:blue")
    ax0.set_ylabel("accepted dt")
    ax0.grid(True, which="both", alpha=0.3)
    res = data["max_residual"]
    mask = np.isfinite(res) & (res > 0)
    ax1.semilogy(data["t"][mask], res[mask], color="tab:orange")
    ax1.set_ylabel("update defect")
    ax1.set_xlabel("t")
    ax1.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    out = art / "time_stepping.png"
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def _figure_sandwich(plt, art: Path, built, barrier_pair) -> Path | None:
    """Base-axis profiles of selected snapshots inside the barrier envelope."""
    snaps = sorted(art.glob("snap_*.field"))
    if not snaps or barrier_pair is None:
        return None
    lower, upper = barrier_pair
    t_min = max(lower.t_start, upper.t_start)
    loaded = []
    for path in snaps:
        field, meta = read_field(path)
        t = float(meta["t"])
        if t >= t_min - 1e-12:
            loaded.append((t, field))
    if not loaded:
        return None
    picks = [loaded[0], loaded[len(loaded) // 2], loaded[-1]]
    seen = set()
    picks = [p for p in picks if not (p[0] in seen or seen.add(p[0]))]
    grid = built.problem.grid
    base_y = grid.axis_coordinates(0)
    slicer = (slice(None),) + (0,) * (grid.n_dims - 1)
    fig, axes = plt.subplots(1, len(picks), figsize=(4.0 * len(picks), 4.0),
                             sharey=True, squeeze=False)
    for ax, (t, field) in zip(axes[0], picks):
        ax.plot(base_y, lower.value(t).values[slicer], "--", color="tab:blue",
                label="lower barrier")
        ax.plot(base_y, field.values[slicer], color="k", label="phi(t)")
        ax.plot(base_y, upper.value(t).values[slicer], "--", color="tab:red",
                label="upper barrier")
        ax.set_title(f"t = {t:.2f}")
        ax.set_xlabel("y1")
        ax.grid(True, alpha=0.3)
    axes[0][0].set_ylabel("potential")
    axes[0][0].legend(loc="best", fontsize=8)
    fig.tight_layout()
    out = art / "sandwich.png"
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def _figure_barrier_trend(plt, art: Path, verify_meta) -> Path | None:
    """Offset-versus-epsilon trend measured by the verify pass, if present."""
    if not verify_meta:
        return None
    trend = verify_meta.get("regularity_trend")
    if not trend:
        return None
    eps = [row["epsilon"] for row in trend]
    vals = [row["E"] for row in trend]
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.plot(eps, vals, "o-", color="tab:purple", label="measured E(eps)")
    ax.plot(eps, [math.expm1(e) for e in eps], "--", color="k",
            label="exp(eps) - 1 bound")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("two-sided metric distortion")
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out = art / "regularity_trend.png"
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def _summary_lines(data, flow_meta, verify_meta) -> list[str]:
    lines = []
    lines.append(f"rows: {len(data['t'])}")
    lines.append(f"t range: [{data['t'][0]:.6g}, {data['t'][-1]:.6g}]")
    lines.append(f"final sup phi: {data['sup_phi'][-1]:.9g}")
    lines.append(f"final inf phi: {data['inf_phi'][-1]:.9g}")
    dist = data["dist_static"]
    if np.isfinite(dist).any():
        lines.append(f"final distance to static: {dist[-1]:.6g}")
    ex = data["excess_IplusIprime"]
    finite = ex[np.isfinite(ex)]
    if finite.size:
        lines.append(f"max integral excess: {finite.max():.6g}")
    if flow_meta:
        for key in ("steps", "step_halvings", "controller_shrinks", "locked_at",
                    "wall_time"):
            if key in flow_meta and flow_meta[key] is not None:
                lines.append(f"{key}: {flow_meta[key]}")
    if verify_meta:
        for name, result in verify_meta.get("checks", {}).items():
            status = "PASS" if result.get("passed") else "FAIL"
            lines.append(f"check {name}: {status} ({result.get('detail', '')})")
    return lines


def render_report(art_dir, built=None, barrier_pair=None) -> list[Path]:
    """Write all applicable figures plus summary.txt; returns written paths.

    built and barrier_pair are optional; when given, snapshot profiles are
    drawn inside the barrier envelope as well.
    """
    art = Path(art_dir)
    csv_path = _require(art / "trajectory.csv")
    data = read_trajectory_csv(csv_path)
    flow_meta = _load_json(art / "flow.json")
    verify_meta = _load_json(art / "verify.json")
    plt = _pyplot()
    written = [
        _figure_series(plt, art, data),
        _figure_convergence(plt, art, data, verify_meta),
        _figure_excess(plt, art, data),
        _figure_steps(plt, art, data),
    ]
    if built is not None:
        extra = _figure_sandwich(plt, art, built, barrier_pair)
        if extra is not None:
            written.append(extra)
    trend = _figure_barrier_trend(plt, art, verify_meta)
    if trend is not None:
        written.append(trend)
    summary = art / "summary.txt"
    summary.write_text("\n".join(_summary_lines(data, flow_meta, verify_meta)) + "\n",
                       encoding="utf-8")
    written.append(summary)
    return written
