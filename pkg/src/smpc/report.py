"""CSV writers and optional matplotlib figures for the study commands."""

from __future__ import annotations

import csv
import io
import os

import numpy as np

from smpc.lane import gap_slack
from smpc.pipeline import atomic_write


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, header, rows) -> str:
    atomic_write(path, _csv_text(header, rows))
    return os.fspath(path)


def trace_header(n: int, m: int, with_trial: bool = True) -> list:
    cols = ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + ["stage_cost", "solve_time", "status"]
    return (["trial"] + cols) if with_trial else cols


def trace_rows(traces) -> list:
    return [[trial, *row] for trial, tr in enumerate(traces) for row in tr.rows()]


def summary_row(summary, ls) -> list:
    times = summary.solve_times()
    pct = np.percentile(times, [50, 90, 99]) if times.size else np.full(3, np.nan)
    viol = sum(int((gap_slack(tr.states[1:], ls) < 0).any(axis=1).sum()) for tr in summary.traces)
    steps = sum(len(tr.stage_costs) for tr in summary.traces)
    return [summary.kind, len(summary.traces), int(summary.completed.sum()), summary.n_infeasible,
            summary.mean, summary.std, viol, steps, *pct, times.max() if times.size else np.nan]


SUMMARY_HEADER = ["kind", "n_trials", "n_completed", "n_infeasible", "mean_cost", "std_cost",
                  "violating_steps", "steps", "solve_p50", "solve_p90", "solve_p99", "solve_max"]


# ----------------------------------------------------------------- figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> str:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, bbox_inches="tight")
    atomic_write(path, buf.getvalue())
    return os.fspath(path)


def plot_roa(grid, path, title=None) -> str:
    """Feasible nodes as circles, infeasible as crosses, over ego (s0, v0)."""
    plt = _pyplot()
    S, V = np.meshgrid(grid.s, grid.v, indexing="ij")
    ok = grid.feasible
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    ax.scatter(S[ok], V[ok], marker="o", facecolors="none", edgecolors="tab:blue", label="feasible")
    ax.scatter(S[~ok], V[~ok], marker="x", color="tab:red", label="infeasible")
    ax.set_xlabel("ego position s0 [m]")
    ax.set_ylabel("ego speed v0 [m/s]")
    ax.set_title(title or f"{grid.kind}: {grid.count}/{ok.size} feasible")
    ax.legend(loc="upper right", fontsize=7)
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_costs(summaries: dict, path) -> str:
    """Cumulative stage cost over time, mean of completed trials per controller."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    for kind, s in summaries.items():
        done = [tr.stage_costs for tr in s.traces if tr.completed and tr.stage_costs.size]
        if not done:
            continue
        c = np.cumsum(np.array(done), axis=1)
        ax.plot(np.arange(c.shape[1]), c.mean(axis=0), label=f"{kind} ({len(done)} runs)")
    ax.set_xlabel("time step")
    ax.set_ylabel("cumulative cost")
    ax.legend(fontsize=7)
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_gaps(summaries: dict, ls, path) -> str:
    """Gap distance traces with the safety and follow limits."""
    plt = _pyplot()
    kinds = list(summaries)
    fig, axes = plt.subplots(1, max(len(kinds), 1), figsize=(3.4 * max(len(kinds), 1), 3.0), sharey=True,
                             squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        for tr in summaries[kind].traces:
            gap = tr.states[:, 2] - tr.states[:, 0]
            ax.plot(np.arange(gap.size), gap, lw=0.6, color="tab:red" if not tr.completed else "0.3", alpha=0.6)
        ax.axhline(ls.d_safe, color="k", ls="--", lw=0.8)
        ax.axhline(ls.d_follow, color="k", ls="--", lw=0.8)
        ax.set_title(kind)
        ax.set_xlabel("time step")
    axes[0][0].set_ylabel("gap [m]")
    out = _save(fig, path)
    plt.close(fig)
    return out
