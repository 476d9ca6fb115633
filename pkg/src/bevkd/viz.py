"""BEV scene rendering: ground truth vs predicted boxes as raster images."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .geom import BEVGridSpec, Box3D

CLASS_PLOT_COLORS = ("tab:blue", "tab:orange", "tab:green")


def _draw_box(ax, box: Box3D, color: str, linestyle: str, alpha: float = 1.0):
    corners = box.bev_corners()
    loop = np.vstack([corners, corners[:1]])
    # World x runs up the plot, world y to the right (rows index x).
    ax.plot(loop[:, 1], loop[:, 0], color=color, linestyle=linestyle,
            alpha=alpha, linewidth=1.2)
    head = box.center[:2] + 0.5 * box.size[0] * np.array(
        [np.cos(box.yaw), np.sin(box.yaw)])
    ax.plot([box.center[1], head[1]], [box.center[0], head[0]],
            color=color, linestyle=linestyle, alpha=alpha, linewidth=0.8)


def plot_bev_scene(gts: list, dets: list, grid: BEVGridSpec, out_path: str,
                   title: str = ""):
    """Write one PNG: solid GT boxes, dashed predictions (alpha = score)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for box in gts:
        _draw_box(ax, box, CLASS_PLOT_COLORS[box.class_id], "-")
    for det in dets:
        _draw_box(ax, det.box, CLASS_PLOT_COLORS[det.box.class_id], "--",
                  alpha=max(0.25, min(1.0, det.score)))
    ax.set_xlim(grid.y_range)
    ax.set_ylim(grid.x_range)
    ax.set_aspect("equal")
    ax.set_xlabel("y [m]")
    ax.set_ylabel("x [m]")
    ax.set_title(title or "GT (solid) vs predictions (dashed)")
    ax.grid(alpha=0.2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
