"""
Versioned JSON checkpoints: weights, log_std, alpha, hyperparameters and RNG states.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from src.config import RunConfig
from src.errors import CheckpointVersionError, ParseError
from src.tensor import DTYPE
from src.utils import read_json, write_json

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"


@dataclass
class Checkpoint:
    config: RunConfig
    variant: str
    update: int
    alpha: float
    weights: Dict[str, torch.Tensor]
    rng: Dict[str, Any] = field(default_factory=dict)

    def restore_rngs(self, generator: Optional[torch.Generator] = None,
                     rng: Optional[np.random.Generator] = None):
        if generator is not None and "torch" in self.rng:
            generator.set_state(torch.tensor(self.rng["torch"], dtype=torch.uint8))
        if rng is not None and "numpy" in self.rng:
            rng.bit_generator.state = self.rng["numpy"]


def rng_state(generator: Optional[torch.Generator] = None,
              rng: Optional[np.random.Generator] = None) -> Dict[str, Any]:
    state = {}
    if generator is not None:
        state["torch"] = generator.get_state().tolist()
    if rng is not None:
        state["numpy"] = rng.bit_generator.state
    return state


def save_checkpoint(filepath, model: torch.nn.Module, config: RunConfig, variant: str, update: int = 0,
                    alpha: float = 0.0, rng: Optional[Dict[str, Any]] = None) -> Path:
    weights = {name: value.detach().cpu().tolist() for name, value in model.state_dict().items()}
    data = {
        "version": CHECKPOINT_VERSION,
        "variant": variant,
        "update": int(update),
        "alpha": float(alpha),
        "log_std": model.log_std.detach().cpu().tolist(),
        "hyperparameters": config.to_dict(),
        "weights": weights,
        "rng": rng or {},
    }
    path = write_json(data, filepath)
    logger.info("Saved checkpoint %s (update %d)", path, update)
    return path


def load_checkpoint(filepath) -> Checkpoint:
    path = Path(filepath)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        data = read_json(path)
    except ValueError as e:
        raise ParseError(f"checkpoint {path} is not valid JSON: {e}") from e
    version = str(data.get("version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(version, CHECKPOINT_VERSION)
    try:
        config = RunConfig.from_dict(data["hyperparameters"])
        weights = {name: torch.tensor(value, dtype=DTYPE) for name, value in data["weights"].items()}
        return Checkpoint(config=config, variant=data["variant"], update=int(data["update"]),
                          alpha=float(data["alpha"]), weights=weights, rng=data.get("rng", {}))
    except (KeyError, TypeError) as e:
        raise ParseError(f"checkpoint {path} is missing {e}") from e
