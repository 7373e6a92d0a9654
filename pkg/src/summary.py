"""
Training summary and IoU trend analysis.
"""

from typing import Any, Dict, List, Optional

import numpy as np

TREND_MARGIN = 0.02


def iou_trend(ious: List[float], margin: float = TREND_MARGIN) -> str:
    if len(ious) < 2:
        return "stable"
    first_half = ious[:len(ious) // 2]
    second_half = ious[len(ious) // 2:]
    first_avg = float(np.mean(first_half))
    second_avg = float(np.mean(second_half))
    if second_avg > first_avg + margin:
        return "improved"
    if second_avg < first_avg - margin:
        return "declined"
    return "stable"


def describe_trend(trend: str) -> str:
    if trend == "improved":
        return "Goal overlap grew over training."
    if trend == "declined":
        return "Goal overlap shrank over training."
    return "Goal overlap stayed roughly constant over training."


def training_summary(history: List[Dict[str, float]], alphas: List[float], variant: str, seed: int,
                     evaluation: Optional[Dict[str, float]] = None) -> Dict[str, Any]:
    ious = [row["iou"] for row in history]
    trend = iou_trend(ious)
    summary = {
        "variant": variant,
        "seed": seed,
        "updates": len(history),
        "alpha_trajectory": [float(a) for a in alphas],
        "trend": trend,
        "description": describe_trend(trend),
        "key_updates": key_updates(history),
    }
    if history:
        last = history[-1]
        summary["final"] = {k: float(last[k]) for k in ("reward_mean", "iou", "sdf", "density", "alpha")}
        best = int(np.argmax(ious))
        summary["best_iou"] = {"update": int(history[best]["update"]), "iou": float(ious[best])}
    if evaluation is not None:
        summary["evaluation"] = {k: float(v) for k, v in evaluation.items()}
    return summary


def key_updates(history: List[Dict[str, float]], threshold: float = 0.05) -> List[Dict[str, float]]:
    """Updates where the period-end IoU jumped by more than `threshold` in either direction."""
    moments = []
    for prev, row in zip(history, history[1:]):
        delta = row["iou"] - prev["iou"]
        if abs(delta) > threshold:
            moments.append({"update": int(row["update"]), "iou": float(row["iou"]), "delta": float(delta)})
    return moments
