"""Matplotlib renderings of run outputs (Agg backend, file targets only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_DPI = 150


def save_path_figure(paths, png_path, dt_hint: float | None = None) -> str:
    """Driving functions of an ensemble plus the traced curve of path 0."""
    from .verify import trace_polyline

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    for p in paths:
        ax1.plot(p.times, p.xi, lw=0.8, alpha=min(1.0, 3.0 / len(paths)))
    ax1.set_xlabel("t")
    ax1.set_ylabel("xi")
    ax1.set_title(f"driving ({len(paths)} paths)")
    poly = trace_polyline(paths[0])
    ax2.plot(poly.real, poly.imag, lw=0.9, color="tab:red")
    ax2.axhline(0.0, color="0.6", lw=0.6)
    ax2.set_xlabel("Re")
    ax2.set_ylabel("Im")
    ax2.set_title("trace of path 0")
    ax2.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    fig.savefig(png_path, dpi=_DPI)
    plt.close(fig)
    return png_path


def save_report_figure(reports, png_path) -> str:
    """Statistic vs tolerance per check, log scale, colored by outcome."""
    names = [r.name for r in reports]
    stats = np.array([abs(r.statistic) for r in reports])
    tols = np.array([r.tolerance for r in reports])
    ok = [r.passed for r in reports]
    floor = 1e-17
    y = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7.0, 0.34 * len(names) + 1.6))
    ax.barh(y, np.maximum(stats, floor),
            color=["tab:green" if p else "tab:red" for p in ok], alpha=0.75)
    ax.plot(np.maximum(tols, floor), y, "k|", markersize=9, label="tolerance")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xscale("log")
    ax.set_xlabel("|statistic| (bar) vs tolerance (tick)")
    ax.invert_yaxis()
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=_DPI)
    plt.close(fig)
    return png_path


def save_lerw_figure(spacings, lattice_p, continuum_p, png_path) -> str:
    """Exit-probability convergence: values per spacing and |rel err| decay."""
    a = np.asarray(spacings, float)
    lat = np.asarray(lattice_p, float)
    rel = np.abs(lat / continuum_p - 1.0)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.4, 3.2))
    ax1.plot(a, lat, "o-", label="lattice")
    ax1.axhline(continuum_p, color="0.4", lw=0.8, ls="--", label="continuum")
    ax1.set_xlabel("a")
    ax1.set_ylabel("subinterval probability")
    ax1.invert_xaxis()
    ax1.legend(fontsize=8)
    ax2.loglog(a, np.maximum(rel, 1e-17), "s-")
    ax2.set_xlabel("a")
    ax2.set_ylabel("|relative error|")
    fig.tight_layout()
    fig.savefig(png_path, dpi=_DPI)
    plt.close(fig)
    return png_path


def save_series_figure(ts, series: dict, ylabel: str, png_path) -> str:
    """Columns of a profile table against time, one line each."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for label, values in series.items():
        ax.plot(ts, values, lw=1.0, label=label)
    ax.axhline(0.0, color="0.6", lw=0.6)
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=_DPI)
    plt.close(fig)
    return png_path
