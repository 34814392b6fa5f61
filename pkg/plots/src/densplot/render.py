"""Figure builders. All rendering goes through the Agg backend so the tool
works headless; files are written only after every input validated."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import ErrorCurve, GridPanel, InputFormatError

plt.rcParams.update({
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
})


def render_error_curves(curves: list[ErrorCurve], out_path) -> None:
    """One figure overlaying every strategy's NRMSE(t) on a log error axis."""
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for curve in curves:
        ax.semilogy(curve.times, curve.nrmse, label=curve.label, linewidth=1.4)
    ax.set_xlabel("t")
    ax.set_ylabel("NRMSE")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def render_heatmaps(panels: list[GridPanel], out_path) -> None:
    """One panel per snapshot with a color scale shared across the figure, so
    growth of the density over time stays visible."""
    ref = panels[0]
    for p in panels[1:]:
        if (p.xaxis, p.yaxis) != (ref.xaxis, ref.yaxis) \
                or not np.array_equal(p.x_grid, ref.x_grid) \
                or not np.array_equal(p.y_grid, ref.y_grid):
            raise InputFormatError(
                "heat-map panels have inconsistent grids or axes; all inputs "
                "must share the same grid")
    vmax = max(float(p.values.max()) for p in panels)
    if vmax <= 0:
        vmax = 1.0
    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(3.4 * n, 3.0), sharey=True,
                             squeeze=False)
    mesh = None
    for ax, panel in zip(axes[0], panels):
        # values are indexed (x, y); pcolormesh wants the x axis horizontal
        mesh = ax.pcolormesh(panel.x_grid, panel.y_grid, panel.values.T,
                             vmin=0.0, vmax=vmax, shading="gouraud",
                             cmap="viridis")
        ax.set_title(f"t = {panel.t:g}")
        ax.set_xlabel(panel.xaxis)
        ax.grid(False)
    axes[0][0].set_ylabel(ref.yaxis)
    fig.colorbar(mesh, ax=axes[0], shrink=0.9, label="density")
    fig.savefig(out_path)
    plt.close(fig)
