"""Static figure of one scene: lanes, observed track, predicted modes, ground truth."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .predictor import PredictionSet  # noqa: E402
from .scene import Scene  # noqa: E402


def plot_scene(scene: Scene, pred: PredictionSet, out_path, title: str | None = None):
    """Write an SVG (or any matplotlib format, by suffix) of the scene and its modes."""
    plt.rcParams["svg.hashsalt"] = "socialformer"
    fig, ax = plt.subplots(figsize=(7, 7))
    try:
        for node in scene.lane_graph.nodes:
            xy = np.array([(p.x, p.y) for p in node.poses])
            ax.plot(xy[:, 0], xy[:, 1], color="0.75", lw=1.0, zorder=1)
        for track in scene.tracks:
            xy = np.array([(s.x, s.y) for s in track.states if s.present])
            if not len(xy):
                continue
            is_target = track.id == scene.target_id
            color = "tab:blue" if is_target else ("tab:green" if track.agent_type == "human" else "0.35")
            ax.plot(xy[:, 0], xy[:, 1], "o-", color=color, ms=3, lw=1.5 if is_target else 1.0, zorder=3)
        order = np.argsort(-np.asarray(pred.scores), kind="stable")
        for rank, i in enumerate(order):
            m = np.asarray(pred.modes[i])
            ax.plot(m[:, 0], m[:, 1], color="tab:orange", alpha=max(0.25, 1.0 - 0.07 * rank), lw=1.2, zorder=4,
                    label="prediction" if rank == 0 else None)
        gt = np.asarray(scene.future)
        ax.plot(gt[:, 0], gt[:, 1], "--", color="tab:red", lw=1.5, zorder=5, label="ground truth")
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_title(title or scene.scene_id)
        ax.legend(loc="best", fontsize=8)
        fig.savefig(out_path, metadata={"Date": None} if str(out_path).endswith(".svg") else None)
    finally:
        plt.close(fig)
