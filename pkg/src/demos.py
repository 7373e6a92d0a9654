"""
Demonstration datasets: JSON Lines storage, imitation pairs and a scripted
press-and-roll demonstrator.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from src.config import EnvConfig
from src.dough_env import DoughEnv, PinPose, pin_to_ee_poses, start_pin_pose
from src.errors import ContractError, EmptySegmentation, ParseError
from src.graph import ObjectSubgraph, PixelFrame, abstract_observation, build_hetero_graph
from src.losses import ImitationSample

logger = logging.getLogger(__name__)

ZETA_SHAPE = (2, 7)


@dataclass
class DemoStep:
    rollout_id: int
    t: int
    zeta: np.ndarray
    subgraph: ObjectSubgraph

    def __post_init__(self):
        self.zeta = np.asarray(self.zeta, dtype=float)
        if self.zeta.shape != ZETA_SHAPE:
            raise ContractError(f"zeta must hold two 7-d poses, got shape {self.zeta.shape}")

    def to_record(self) -> Dict[str, Any]:
        return {"rollout_id": self.rollout_id, "t": self.t,
                "zeta": [[float(v) for v in pose] for pose in self.zeta],
                "subgraph": self.subgraph.to_dict()}


@dataclass
class DemoDataset:
    rollouts: List[List[DemoStep]] = field(default_factory=list)

    def __post_init__(self):
        if not self.rollouts or any(not r for r in self.rollouts):
            raise ContractError("A demo dataset needs at least one non-empty rollout")

    def __len__(self) -> int:
        return len(self.rollouts)

    @property
    def n_steps(self) -> int:
        return sum(len(r) for r in self.rollouts)

    def to_records(self) -> List[Dict[str, Any]]:
        return [step.to_record() for rollout in self.rollouts for step in rollout]

    def imitation_samples(self, codec, start_poses: np.ndarray) -> List[ImitationSample]:
        """Pair each demo subgraph with the previous demo pose (start pose at t=0) and the demo action."""
        samples = []
        for rollout in self.rollouts:
            goal = rollout[-1].subgraph
            prev = np.asarray(start_poses, dtype=float)
            for step in rollout:
                graph = build_hetero_graph(step.subgraph, prev)
                samples.append(ImitationSample(graph=graph, goal=goal, action=codec.from_poses(step.zeta)))
                prev = step.zeta
        return samples


def save_demonstrations(dataset: DemoDataset, filepath) -> Path:
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in dataset.to_records():
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def _parse_step(line: str, lineno: int) -> DemoStep:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", line=lineno) from e
    if not isinstance(record, dict):
        raise ParseError("each line must be a JSON object", line=lineno)
    missing = [k for k in ("rollout_id", "t", "zeta", "subgraph") if k not in record]
    if missing:
        raise ParseError(f"missing keys {missing}", line=lineno)
    try:
        zeta = np.asarray(record["zeta"], dtype=float)
        subgraph = ObjectSubgraph.from_dict(record["subgraph"])
        step = DemoStep(rollout_id=int(record["rollout_id"]), t=int(record["t"]), zeta=zeta, subgraph=subgraph)
    except (ParseError, ContractError, TypeError, ValueError) as e:
        raise ParseError(str(e), line=lineno) from e
    if not (np.all(np.isfinite(step.zeta)) and subgraph.is_finite()):
        raise ParseError("non-finite values", line=lineno)
    return step


def load_demonstrations(filepath) -> DemoDataset:
    path = Path(filepath)
    if not path.is_file():
        raise FileNotFoundError(f"Demo file not found: {path}")
    grouped: Dict[int, List[DemoStep]] = {}
    first_line: Dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            step = _parse_step(line, lineno)
            grouped.setdefault(step.rollout_id, []).append(step)
            first_line.setdefault(step.rollout_id, lineno)
    if not grouped:
        raise ParseError("demo file holds no steps", line=1)
    rollouts = []
    for rollout_id in sorted(grouped):
        steps = sorted(grouped[rollout_id], key=lambda s: s.t)
        if [s.t for s in steps] != list(range(len(steps))):
            raise ParseError(f"rollout {rollout_id} steps are not numbered 0..{len(steps) - 1}",
                             line=first_line[rollout_id])
        rollouts.append(steps)
    logger.info("Loaded %d demonstration rollouts (%d steps) from %s", len(rollouts),
                sum(len(r) for r in rollouts), path)
    return DemoDataset(rollouts=rollouts)


def scripted_pins(env_config: EnvConfig, mound_center, rotation: float, n_strokes: int = 4,
                  reach=(0.0, 0.02, 0.04, 0.06)) -> List[PinPose]:
    """Centre press on the mound, then outward radial strokes from the board centre, rotated per stroke."""
    goal_height = env_config.volume / (math.pi * env_config.goal_radius ** 2)
    z = env_config.pin_radius + goal_height
    base = start_pin_pose(env_config)
    pins = [PinPose(center=(float(mound_center[0]), float(mound_center[1])), z=z, yaw=rotation,
                    half_length=base.half_length, radius=base.radius)]
    for k in range(n_strokes):
        theta = rotation + 2 * math.pi * k / n_strokes
        for d in reach:
            pins.append(PinPose(center=(d * math.cos(theta), d * math.sin(theta)), z=z, yaw=theta + math.pi / 2,
                                half_length=base.half_length, radius=base.radius))
    return pins


def _observe(obs, frame: PixelFrame, previous: Optional[ObjectSubgraph]) -> ObjectSubgraph:
    try:
        return abstract_observation(obs, frame)
    except EmptySegmentation:
        if previous is None:
            raise
        logger.warning("Segmentation failed; carrying the previous subgraph forward")
        return previous


def generate_scripted_demos(env_config: EnvConfig, n_rollouts: int, seed: int = 0) -> DemoDataset:
    if n_rollouts < 1:
        raise ContractError(f"n_rollouts must be >= 1, got {n_rollouts}")
    env = DoughEnv(env_config)
    frame = PixelFrame(env_config.board_size, env_config.resolution)
    rng = np.random.default_rng(seed)
    rollouts = []
    for rollout_id in range(n_rollouts):
        state, obs = env.reset(seed + rollout_id)
        sub = _observe(obs, frame, None)
        rotation = float(rng.uniform(0.0, math.pi / 2))
        steps = []
        for t, pin in enumerate(scripted_pins(env_config, sub.node_attrs[0, :2], rotation)):
            zeta = pin_to_ee_poses(pin)
            steps.append(DemoStep(rollout_id=rollout_id, t=t, zeta=zeta, subgraph=sub))
            state, obs, _, _, _ = env.step(state, zeta.reshape(-1))
            sub = _observe(obs, frame, sub)
        rollouts.append(steps)
        logger.info("Scripted demo %d: final IoU %.3f", rollout_id, env.metrics(state)["iou"])
    return DemoDataset(rollouts=rollouts)
