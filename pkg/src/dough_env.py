"""
Height-field dough on a square board, deformed by a rolling-pin capsule.

Board frame: origin at the board centre, x along grid columns, y along grid
rows, z up. Cell (i, j) has its centre at (-L/2 + (j + 0.5) c, -L/2 + (i + 0.5) c).
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from src.config import EnvConfig
from src.errors import ActionError, ConfigError, ContractError
from src.metrics import density_metric, dough_mask, iou, sdf_distance

logger = logging.getLogger(__name__)

DOUGH_COLOR = np.array([230, 200, 150], dtype=np.uint8)
BOARD_COLOR = np.array([70, 50, 35], dtype=np.uint8)
PIN_COLOR = np.array([150, 150, 160], dtype=np.uint8)

POSE_DIM = 7


@dataclass(frozen=True)
class PinPose:
    center: Tuple[float, float]
    z: float
    yaw: float
    half_length: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0 or not self.half_length > 0:
            raise ContractError("Pin radius and half_length must be positive")

    @property
    def axis(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw)])

    @property
    def clearance(self) -> float:
        return max(self.z - self.radius, 0.0)

    def endpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=float)
        return c - self.half_length * self.axis, c + self.half_length * self.axis


@dataclass
class DoughState:
    heights: np.ndarray
    cell_size: float
    pin_pose: PinPose
    time_index: int = 0

    def volume(self) -> float:
        return float(self.heights.sum() * self.cell_size ** 2)

    def copy(self) -> "DoughState":
        return replace(self, heights=self.heights.copy())


@dataclass
class RgbdObs:
    rgb: np.ndarray
    depth: np.ndarray

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.depth.shape


@dataclass
class GoalSpec:
    goal_heights: np.ndarray
    goal_mask: np.ndarray
    description: str = ""

    def volume(self, cell_size: float) -> float:
        return float(self.goal_heights.sum() * cell_size ** 2)


def cell_centers(config: EnvConfig) -> Tuple[np.ndarray, np.ndarray]:
    coords = -config.board_size / 2 + (np.arange(config.grid_size) + 0.5) * config.cell_size
    xs, ys = np.meshgrid(coords, coords)
    return xs, ys


def segment_distance(xs: np.ndarray, ys: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    d = p1 - p0
    length_sq = float(d @ d)
    if length_sq == 0:
        return np.hypot(xs - p0[0], ys - p0[1])
    s = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / length_sq, 0.0, 1.0)
    return np.hypot(xs - (p0[0] + s * d[0]), ys - (p0[1] + s * d[1]))


def start_pin_pose(config: EnvConfig) -> PinPose:
    return PinPose(center=(0.0, 0.0), z=config.pin_start_z, yaw=0.0,
                   half_length=config.pin_half_length, radius=config.pin_radius)


def yaw_quaternion(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])


def pin_to_ee_poses(pin: PinPose) -> np.ndarray:
    left, right = pin.endpoints()
    q = yaw_quaternion(pin.yaw)
    return np.stack([np.concatenate([left, [pin.z], q]), np.concatenate([right, [pin.z], q])])


def decode_action(action, config: EnvConfig) -> Tuple[PinPose, bool]:
    """Map a dual end-effector pose pair to the pin it holds; returns (pin, clipped)."""
    a = np.asarray(action, dtype=float)
    if a.size != 2 * POSE_DIM:
        raise ActionError(f"Action must hold two {POSE_DIM}-d poses, got {a.size} values")
    if not np.all(np.isfinite(a)):
        raise ActionError("Action contains NaN or infinite values")
    a = a.reshape(2, POSE_DIM)
    left, right = a[0, :3], a[1, :3]
    mid = (left + right) / 2
    sep = right[:2] - left[:2]
    yaw = math.atan2(sep[1], sep[0]) if np.hypot(*sep) > 1e-12 else 0.0
    half = config.board_size / 2
    x, y = float(np.clip(mid[0], -half, half)), float(np.clip(mid[1], -half, half))
    z = float(np.clip(mid[2], 0.0, config.camera_height))
    clipped = (x, y, z) != (float(mid[0]), float(mid[1]), float(mid[2]))
    pin = PinPose(center=(x, y), z=z, yaw=yaw, half_length=config.pin_half_length, radius=config.pin_radius)
    return pin, clipped


def random_action(rng: np.random.Generator, config: EnvConfig) -> np.ndarray:
    half = config.board_size / 2 - config.pin_half_length
    pin = PinPose(center=tuple(rng.uniform(-half, half, size=2)),
                  z=float(rng.uniform(0.0, config.pin_start_z)),
                  yaw=float(rng.uniform(-math.pi, math.pi)),
                  half_length=config.pin_half_length, radius=config.pin_radius)
    return pin_to_ee_poses(pin).reshape(-1)


def make_goal(kind: str, params: Dict[str, float], config: EnvConfig) -> GoalSpec:
    if kind != "flat_disk":
        raise ConfigError(f"Unknown goal kind {kind!r}")
    radius = float(params.get("radius", config.goal_radius))
    volume = float(params.get("volume", config.volume))
    if radius <= 0 or radius > config.board_size / 2:
        raise ConfigError(f"Goal radius {radius} does not fit on a board of size {config.board_size}")
    xs, ys = cell_centers(config)
    mask = xs ** 2 + ys ** 2 <= radius ** 2
    height = volume / (math.pi * radius ** 2)
    goal = GoalSpec(goal_heights=np.where(mask, height, 0.0), goal_mask=mask,
                    description=f"flat disk r={radius:g} m, h={height:.6g} m")
    goal_volume = goal.volume(config.cell_size)
    if abs(goal_volume - volume) > 0.01 * volume:
        raise ConfigError(f"Goal disk of radius {radius} is too coarse for the grid "
                          f"(volume {goal_volume:.6g} vs {volume:.6g})")
    return goal


def reset(seed: int, config: EnvConfig) -> Tuple[DoughState, RgbdObs]:
    config.validate()
    rng = np.random.default_rng(seed)
    center = rng.uniform(-config.mound_jitter, config.mound_jitter, size=2)
    xs, ys = cell_centers(config)
    r_sq = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    profile = np.maximum(0.0, 1.0 - r_sq / config.mound_radius ** 2)
    heights = profile * (config.volume / (profile.sum() * config.cell_size ** 2))
    state = DoughState(heights=heights, cell_size=config.cell_size, pin_pose=start_pin_pose(config))
    return state, render_topdown(state, config)


def apply_pin(heights: np.ndarray, pin: PinPose, config: EnvConfig) -> np.ndarray:
    xs, ys = cell_centers(config)
    p0, p1 = pin.endpoints()
    dist = segment_distance(xs, ys, p0, p1)
    footprint = dist <= pin.radius
    clearance = pin.clearance
    over = footprint & (heights > clearance)
    if not over.any():
        return heights.copy()
    ring = ndimage.binary_dilation(footprint, structure=np.ones((3, 3), dtype=bool)) & ~footprint
    if not ring.any():
        logger.warning("Pin footprint covers the whole board; no room to displace dough")
        return heights.copy()
    removed = float((heights[over] - clearance).sum())
    new = np.where(over, clearance, heights)
    weights = np.where(ring, 1.0 / (1.0 + dist / config.cell_size), 0.0)
    new += removed * weights / weights.sum()
    return new


def _metrics(state: DoughState, goal: GoalSpec) -> Tuple[float, float, float]:
    return sdf_distance(state, goal), iou(dough_mask(state), goal.goal_mask), density_metric(state, goal)


def step(state: DoughState, action, config: EnvConfig,
         goal: GoalSpec) -> Tuple[DoughState, RgbdObs, float, bool, Dict[str, Any]]:
    pin, clipped = decode_action(action, config)
    if clipped:
        logger.warning("Pin pose outside the board; clipped to (%.3f, %.3f, z=%.3f)", pin.center[0], pin.center[1], pin.z)
    new_state = DoughState(heights=apply_pin(state.heights, pin, config), cell_size=state.cell_size,
                           pin_pose=pin, time_index=state.time_index + 1)
    sdf0, iou0, dens0 = _metrics(state, goal)
    sdf1, iou1, dens1 = _metrics(new_state, goal)
    w1, w2, w3 = config.reward_weights
    reward = w1 * (sdf0 - sdf1) + w2 * (iou1 - iou0) + w3 * (dens0 - dens1)
    done = new_state.time_index >= config.horizon
    info = {"clipped": clipped, "sdf": sdf1, "iou": iou1, "density": dens1}
    return new_state, render_topdown(new_state, config), float(reward), done, info


def render_topdown(state: DoughState, config: EnvConfig) -> RgbdObs:
    res = config.resolution
    g = state.heights.shape[0]
    idx = (np.arange(res) * g) // res
    heights_px = state.heights[np.ix_(idx, idx)]
    dough = heights_px > config.dough_eps
    rgb = np.where(dough[..., None], DOUGH_COLOR, BOARD_COLOR).astype(np.uint8)
    depth = config.camera_height - heights_px
    if config.occlusion:
        pin = state.pin_pose
        coords = -config.board_size / 2 + (np.arange(res) + 0.5) * (config.board_size / res)
        px, py = np.meshgrid(coords, coords)
        p0, p1 = pin.endpoints()
        d = segment_distance(px, py, p0, p1)
        top = pin.z + np.sqrt(np.maximum(pin.radius ** 2 - d ** 2, 0.0))
        covered = (d <= pin.radius) & (top < config.camera_height)
        rgb[covered] = PIN_COLOR
        depth = np.where(covered, config.camera_height - top, depth)
    return RgbdObs(rgb=rgb, depth=depth)


class DoughEnv:
    def __init__(self, config: Optional[EnvConfig] = None, goal: Optional[GoalSpec] = None):
        self.config = config or EnvConfig()
        self.config.validate()
        self.goal = goal or make_goal("flat_disk", {"radius": self.config.goal_radius,
                                                    "volume": self.config.volume}, self.config)

    def reset(self, seed: int) -> Tuple[DoughState, RgbdObs]:
        return reset(seed, self.config)

    def step(self, state: DoughState, action) -> Tuple[DoughState, RgbdObs, float, bool, Dict[str, Any]]:
        return step(state, action, self.config, self.goal)

    def render(self, state: DoughState) -> RgbdObs:
        return render_topdown(state, self.config)

    def reset_pin(self, state: DoughState) -> DoughState:
        return replace(state, pin_pose=start_pin_pose(self.config))

    def metrics(self, state: DoughState) -> Dict[str, float]:
        sdf, iou_value, density = _metrics(state, self.goal)
        return {"sdf": sdf, "iou": iou_value, "density": density}
