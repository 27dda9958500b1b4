"""Matplotlib rendering for run, gap, and ablation reports.

Figures are drawn on explicit Figure objects (no pyplot state) and written
next to the delimited output.
"""

from __future__ import annotations

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _line(ax, xs, ys, label):
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None]
    if not pts:
        return
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120)


def render_sequence(seq, path) -> None:
    T = len(seq.order)
    fig = Figure(figsize=(9, 3.6))
    ax_pla, ax_sta = fig.subplots(1, 2)
    for rep in seq.strategies:
        _line(ax_pla, range(1, T + 1), [rep.pla.get(t) for t in range(1, T + 1)], rep.strategy)
        _line(ax_sta, range(2, T + 1), [rep.sta.get(t) for t in range(2, T + 1)], rep.strategy)
    ax_pla.set_title("plasticity")
    ax_sta.set_title("stability")
    for ax in (ax_pla, ax_sta):
        ax.set_xlabel("step t")
        ax.set_ylabel("Spearman")
        ax.grid(True, alpha=0.3)
    ax_sta.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    _save(fig, path)


def render_gap(report, path) -> None:
    fig = Figure(figsize=(4.8, 3.4))
    ax = fig.subplots()
    ks = report.ks
    _line(ax, ks, [report.in_scope.get(k) for k in ks], "in scope")
    _line(ax, ks, [report.out_scope.get(k) for k in ks], "out of scope")
    ax.set_xlabel("systems in training scope (k)")
    ax.set_ylabel("mean Spearman vs grades")
    ax.set_xticks(ks)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def render_ablation(report, strategies, T: int, path) -> None:
    fig = Figure(figsize=(4.8, 3.4))
    ax = fig.subplots()
    for strategy in strategies:
        _line(
            ax,
            report.fractions,
            [report.normalized(strategy, f, T) for f in report.fractions],
            strategy,
        )
    ax.set_xlabel("training fraction")
    ax.set_ylabel(f"plasticity at t={T}, normalized to full data")
    ax.invert_xaxis()
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
