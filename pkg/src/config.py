"""
Run configuration: typed sections loaded from a single JSON file.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from src.errors import ConfigError
from src.utils import read_json

VARIANTS = (
    "dgform",
    "dgform-i",
    "dgform-il",
    "ppo-full",
    "ppo-rgbd",
    "ppo-homo",
    "ppo-hetero",
)


@dataclass
class EnvConfig:
    grid_size: int = 64
    board_size: float = 0.4
    volume: float = 2.0e-4
    mound_radius: float = 0.06
    mound_jitter: float = 0.04
    horizon: int = 250
    pin_radius: float = 0.02
    pin_half_length: float = 0.09
    pin_start_z: float = 0.08
    camera_height: float = 0.5
    resolution: int = 128
    goal_radius: float = 0.12
    reward_weights: Tuple[float, float, float] = (1.0, 10.0, 0.01)
    occlusion: bool = False
    dough_eps: float = 1e-5

    @property
    def cell_size(self) -> float:
        return self.board_size / self.grid_size

    def validate(self):
        if self.grid_size < 32:
            raise ConfigError(f"env.grid_size must be >= 32, got {self.grid_size}")
        if self.volume <= 0:
            raise ConfigError(f"env.volume must be positive, got {self.volume}")
        if self.board_size <= 0:
            raise ConfigError(f"env.board_size must be positive, got {self.board_size}")
        if self.pin_radius <= 0 or self.pin_half_length <= 0:
            raise ConfigError("env.pin_radius and env.pin_half_length must be positive")
        if self.resolution < 8:
            raise ConfigError(f"env.resolution must be >= 8, got {self.resolution}")
        if self.horizon < 1:
            raise ConfigError(f"env.horizon must be >= 1, got {self.horizon}")
        if self.mound_radius <= 0 or self.mound_radius + self.mound_jitter >= self.board_size / 2:
            raise ConfigError("env.mound_radius plus env.mound_jitter must fit inside the board")
        if self.goal_radius <= 0 or self.goal_radius > self.board_size / 2:
            raise ConfigError(f"env.goal_radius must lie in (0, board_size/2], got {self.goal_radius}")
        if self.camera_height <= 0:
            raise ConfigError("env.camera_height must be positive")
        if len(self.reward_weights) != 3:
            raise ConfigError("env.reward_weights must have three entries")


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    pose_dim: int = 7
    attr_dim: int = 3
    log_std_init: float = 0.0
    hetero: bool = True
    position_scale: Tuple[float, float, float] = (0.1, 0.1, 0.03)
    vector_downsample: int = 16

    @property
    def action_dim(self) -> int:
        return 2 * self.pose_dim

    def validate(self):
        if self.hidden_dim < 1:
            raise ConfigError(f"model.hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.pose_dim != 7:
            raise ConfigError("model.pose_dim must be 7 (position + quaternion)")
        if self.attr_dim != 3:
            raise ConfigError("model.attr_dim must be 3 (x, y, depth)")
        if len(self.position_scale) != 3 or min(self.position_scale) <= 0:
            raise ConfigError("model.position_scale must hold three positive values")


@dataclass
class TrainerConfig:
    variant: str = "dgform-il"
    updates: int = 200
    horizon: int = 50
    epochs: int = 4
    lr: float = 3e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    c1: float = 0.5
    c2: float = 1.0
    c3: float = 0.01
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    tau: float = 1.0
    alpha_lr: float = 0.01
    alpha0: float = 1.0
    imitation_form: str = "log"
    demo_batch: int = 32
    checkpoint_every: int = 50

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"trainer.variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.updates < 0:
            raise ConfigError(f"trainer.updates must be >= 0, got {self.updates}")
        if self.horizon < 1:
            raise ConfigError(f"trainer.horizon must be >= 1, got {self.horizon}")
        if min(self.c1, self.c2, self.c3) < 0:
            raise ConfigError("trainer.c1, c2 and c3 must be non-negative")
        if not 0 < self.clip_eps < 1:
            raise ConfigError(f"trainer.clip_eps must lie in (0, 1), got {self.clip_eps}")
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ConfigError("trainer.gamma and trainer.lam must lie in [0, 1]")
        if self.alpha0 < 0 or self.alpha_lr < 0:
            raise ConfigError("trainer.alpha0 and trainer.alpha_lr must be non-negative")
        if self.imitation_form not in ("log", "likelihood"):
            raise ConfigError(f"trainer.imitation_form must be 'log' or 'likelihood', got {self.imitation_form!r}")
        if self.epochs < 1 or self.demo_batch < 1:
            raise ConfigError("trainer.epochs and trainer.demo_batch must be >= 1")


@dataclass
class PlannerConfig:
    n_components: int = 5
    order: int = 2
    control_weight: float = 1e-3
    total_time: float = 10.0
    points: int = 10000
    waypoint_var: float = 1e-4
    passthrough_var: float = 1e2
    coordination_weight: float = 1.0
    n_frames: int = 2
    max_acceleration: float = 50.0
    em_tol: float = 1e-8
    em_max_iter: int = 200
    reg: float = 1e-6

    @property
    def dt(self) -> float:
        return self.total_time / self.points

    def validate(self):
        if self.n_components < 1:
            raise ConfigError("planner.n_components must be >= 1")
        if self.order < 1:
            raise ConfigError("planner.order must be >= 1")
        if self.control_weight <= 0:
            raise ConfigError("planner.control_weight must be positive")
        if self.points < 2 or self.total_time <= 0:
            raise ConfigError("planner.points must be >= 2 and planner.total_time positive")
        if self.coordination_weight < 0:
            raise ConfigError("planner.coordination_weight must be non-negative")
        if self.n_frames < 1:
            raise ConfigError("planner.n_frames must be >= 1")


@dataclass
class AblationConfig:
    variants: List[str] = field(default_factory=lambda: ["ppo-full", "ppo-rgbd", "ppo-homo", "ppo-hetero",
                                                         "dgform", "dgform-i", "dgform-il"])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    updates: int = 200
    eval_seeds: int = 3
    workers: int = 1
    include_random: bool = True

    def validate(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"ablation.variants contains unknown variants: {unknown}")
        if not self.seeds or min(self.seeds) < 0:
            raise ConfigError("ablation.seeds must be a non-empty list of non-negative integers")
        if self.updates < 0 or self.eval_seeds < 1 or self.workers < 1:
            raise ConfigError("ablation.updates >= 0, ablation.eval_seeds >= 1 and ablation.workers >= 1 required")


SECTIONS = {
    "env": EnvConfig,
    "model": ModelConfig,
    "trainer": TrainerConfig,
    "planner": PlannerConfig,
    "ablation": AblationConfig,
}


def _build_section(cls, data: Dict[str, Any], name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"Section {name!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown keys in section {name!r}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list) and str(known[key].type).startswith(("Tuple", "typing.Tuple")):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    output_dir: Optional[str] = None

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        self.env.validate()
        self.model.validate()
        self.trainer.validate()
        self.planner.validate()
        self.ablation.validate()
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("Configuration root must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS) - {"seed", "output_dir"})
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {unknown}")
        sections = {name: _build_section(section_cls, data.get(name, {}), name)
                    for name, section_cls in SECTIONS.items()}
        config = cls(**sections, seed=data.get("seed", 0), output_dir=data.get("output_dir"))
        return config.validate()

    @classmethod
    def from_json(cls, filepath) -> "RunConfig":
        path = Path(filepath)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            data = read_json(path)
        except ValueError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)
