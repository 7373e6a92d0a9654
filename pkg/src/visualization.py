"""
Static charts for training runs, variant comparisons and planned trajectories.
"""

from pathlib import Path
from typing import Dict

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from PIL import Image

VARIANT_COLORS = {
    "dgform": "#1f77b4",
    "dgform-i": "#17becf",
    "dgform-il": "#2ca02c",
    "ppo-full": "#9467bd",
    "ppo-rgbd": "#8c564b",
    "ppo-homo": "#ff7f0e",
    "ppo-hetero": "#d62728",
    "random": "#7f7f7f",
}
METRIC_TITLES = {"reward": "Reward", "iou": "IoU", "sdf": "SDF", "density": "Density"}


def get_variant_color(variant: str) -> str:
    return VARIANT_COLORS.get(variant, "#6b7280")


def create_learning_curves(logs: Dict[str, pd.DataFrame], metric: str = "iou") -> go.Figure:
    fig = go.Figure()
    for name, log in sorted(logs.items()):
        variant = name.split("_seed")[0]
        fig.add_trace(go.Scatter(
            x=log["update"],
            y=log[metric],
            mode="lines",
            name=name,
            line=dict(color=get_variant_color(variant), width=2)
        ))
    fig.update_layout(
        title=f"{METRIC_TITLES.get(metric, metric)} over Updates",
        xaxis_title="Update",
        yaxis_title=METRIC_TITLES.get(metric, metric),
        font=dict(size=12)
    )
    return fig


def create_metric_bar_chart(report: pd.DataFrame, metric: str) -> go.Figure:
    stats = report.groupby("variant", sort=True)[metric].agg(["mean", "std"]).fillna(0.0)
    fig = go.Figure(data=[
        go.Bar(
            x=list(stats.index),
            y=stats["mean"],
            error_y=dict(type="data", array=stats["std"]),
            marker_color=[get_variant_color(v) for v in stats.index],
            text=[f"{v:.3g}" for v in stats["mean"]],
            textposition="auto"
        )
    ])
    fig.update_layout(
        title=f"{METRIC_TITLES.get(metric, metric)} by Variant",
        xaxis_title="Variant",
        yaxis_title=METRIC_TITLES.get(metric, metric),
        font=dict(size=12)
    )
    return fig


def create_trajectory_chart(timestamps: np.ndarray, left: np.ndarray, right: np.ndarray) -> go.Figure:
    fig = go.Figure()
    for side, poses, dash in (("left", left, "solid"), ("right", right, "dash")):
        for j, axis in enumerate("xyz"):
            fig.add_trace(go.Scatter(
                x=timestamps,
                y=poses[:, j],
                mode="lines",
                name=f"{side} {axis}",
                line=dict(dash=dash, width=2)
            ))
    fig.update_layout(
        title="Planned End-Effector Positions",
        xaxis_title="Time [s]",
        yaxis_title="Position [m]",
        hovermode="x unified",
        font=dict(size=12)
    )
    return fig


def save_figure(fig: go.Figure, filepath) -> Path:
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_image(str(path))
    return path


def save_snapshot(rgb: np.ndarray, filepath) -> Path:
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)
    return path
