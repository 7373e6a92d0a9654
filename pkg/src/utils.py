"""
Utility functions shared by the CLI and the library modules.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict

import numpy as np
import torch
from dotenv import load_dotenv

DEFAULT_OUTPUT_ROOT = "runs"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def load_environment_variables():
    load_dotenv()


def get_output_root(default: str = DEFAULT_OUTPUT_ROOT) -> Path:
    return Path(os.getenv("DGFORM_OUT") or default)


def setup_logging(level: str = "INFO"):
    root = logging.getLogger()
    if not any(getattr(h, "_dgform", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._dgform = True
        root.addHandler(handler)
    root.setLevel(level.upper())


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def write_json(data: Dict[str, Any], filepath: os.PathLike) -> Path:
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path


def read_json(filepath: os.PathLike) -> Dict[str, Any]:
    with open(filepath, "r", encoding="utf-8") as f:
        return json.load(f)
