"""
Shape metrics between the current dough and the goal: IoU, goal distance field, volume misplacement.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, List

import numpy as np
from scipy import ndimage

from src.errors import ContractError

if TYPE_CHECKING:
    from src.dough_env import DoughState, GoalSpec

logger = logging.getLogger(__name__)

DOUGH_EPS = 1e-5


@dataclass
class MetricReport:
    reward_total: float
    iou: float
    sdf: float
    density: float
    episodes: List[Dict[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ContractError(f"IoU must lie in [0, 1], got {self.iou}")
        if self.sdf < 0 or self.density < 0:
            raise ContractError("SDF and density must be non-negative")

    @classmethod
    def from_episodes(cls, episodes: List[Dict[str, float]]) -> "MetricReport":
        if not episodes:
            raise ContractError("Cannot build a report from zero episodes")
        mean = {k: float(np.mean([e[k] for e in episodes])) for k in ("reward", "iou", "sdf", "density")}
        return cls(reward_total=mean["reward"], iou=mean["iou"], sdf=mean["sdf"],
                   density=mean["density"], episodes=list(episodes))

    def to_dict(self) -> Dict:
        return asdict(self)


def dough_mask(state: "DoughState", eps: float = DOUGH_EPS) -> np.ndarray:
    return state.heights > eps


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"IoU masks differ in shape: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def goal_distance_field(goal_mask: np.ndarray, cell_size: float) -> np.ndarray:
    """Unsigned Euclidean distance of every cell to the nearest goal cell (0 inside)."""
    mask = np.asarray(goal_mask, dtype=bool)
    if not mask.any():
        raise ContractError("Goal mask is empty")
    return ndimage.distance_transform_edt(~mask) * cell_size


def sdf_distance(state: "DoughState", goal: "GoalSpec") -> float:
    current = dough_mask(state)
    if current.shape != goal.goal_mask.shape:
        raise ContractError(f"State grid {current.shape} does not match goal grid {goal.goal_mask.shape}")
    if not current.any():
        logger.warning("SDF of an empty dough state is reported as 0")
        return 0.0
    field_ = goal_distance_field(goal.goal_mask, state.cell_size)
    return float(field_[current].mean())


def density_metric(state: "DoughState", goal: "GoalSpec") -> float:
    if state.heights.shape != goal.goal_heights.shape:
        raise ContractError(f"State grid {state.heights.shape} does not match goal grid {goal.goal_heights.shape}")
    return float(np.abs(state.heights - goal.goal_heights).sum() * state.cell_size ** 2)
