"""
Ablation harness: train every enabled variant per seed under the same budget,
evaluate on unseen initial states and merge the per-job rows into one report.
"""

import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.config import RunConfig
from src.demos import DemoDataset
from src.dough_env import DoughEnv, random_action
from src.errors import TrainingError
from src.metrics import MetricReport
from src.trainer import EVAL_SEED_OFFSET, Trainer, evaluate_policy
from src.utils import read_json, write_json

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["variant", "seed", "reward", "iou", "sdf", "density", "wall_time_s"]
METRIC_NAMES = ["reward", "iou", "sdf", "density"]
RANDOM_VARIANT = "random"
ORDERING = ("ppo-hetero", "ppo-homo", "ppo-rgbd")


def eval_seeds(seed: int, count: int) -> List[int]:
    return [EVAL_SEED_OFFSET + 100 * seed + i for i in range(count)]


def job_config(config: RunConfig, variant: str, seed: int) -> RunConfig:
    trainer = dataclasses.replace(config.trainer, variant=variant, updates=config.ablation.updates)
    return dataclasses.replace(config, trainer=trainer, seed=seed)


def random_episodes(config: RunConfig, seeds) -> List[Dict[str, Any]]:
    """Uniform random pin poses; the floor every trained variant should clear."""
    env = DoughEnv(config.env)
    episodes = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        state, _ = env.reset(seed)
        initial = env.metrics(state)["iou"]
        total, done = 0.0, False
        while not done:
            state, _, reward, done, _ = env.step(state, random_action(rng, config.env))
            total += reward
        episodes.append({"reward": total, "initial_iou": initial, "steps": state.time_index, **env.metrics(state)})
    return episodes


def _row(variant: str, seed: int, report: Optional[MetricReport], wall: float) -> Dict[str, Any]:
    row = {"variant": variant, "seed": seed, "wall_time_s": round(wall, 3)}
    if report is None:
        row.update({name: float("nan") for name in METRIC_NAMES})
    else:
        row.update({"reward": report.reward_total, "iou": report.iou, "sdf": report.sdf, "density": report.density})
    return row


def run_job(config: RunConfig, variant: str, seed: int, output_dir: Optional[str] = None,
            demos: Optional[DemoDataset] = None) -> Dict[str, Any]:
    start = time.perf_counter()
    seeds = eval_seeds(seed, config.ablation.eval_seeds)
    report = None
    job_dir = Path(output_dir) / f"{variant}_seed{seed}" if output_dir is not None else None
    try:
        if variant == RANDOM_VARIANT:
            episodes = random_episodes(config, seeds)
        else:
            cfg = job_config(config, variant, seed)
            trainer = Trainer(cfg, demos=demos, output_dir=job_dir)
            trainer.train()
            episodes = evaluate_policy(trainer.model, variant, cfg, seeds)
        report = MetricReport.from_episodes(episodes)
    except TrainingError as e:
        logger.warning("Variant %s seed %d diverged: %s", variant, seed, e)
    row = _row(variant, seed, report, time.perf_counter() - start)
    if job_dir is not None:
        write_json(row, job_dir / "row.json")
    return row


def check_ordering(report: pd.DataFrame, metric: str = "reward") -> bool:
    means = report.groupby("variant")[metric].mean()
    present = [v for v in ORDERING if v in means.index]
    if len(present) < 2:
        return True
    values = [means[v] for v in present]
    return all(a >= b for a, b in zip(values, values[1:]))


def merge_rows(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    return frame.sort_values(["variant", "seed"], kind="stable").reset_index(drop=True)


def collect_rows(jobs_dir) -> List[Dict[str, Any]]:
    return [read_json(p) for p in sorted(Path(jobs_dir).glob("*/row.json"))]


def run_ablation(config: RunConfig, output_dir=None, demos: Optional[DemoDataset] = None) -> pd.DataFrame:
    config.validate()
    variants = list(config.ablation.variants)
    if config.ablation.include_random:
        variants.append(RANDOM_VARIANT)
    jobs = [(v, s) for v in variants for s in config.ablation.seeds]
    jobs_dir = str(Path(output_dir) / "jobs") if output_dir is not None else None
    logger.info("Running %d ablation jobs with %d worker(s)", len(jobs), config.ablation.workers)
    if config.ablation.workers > 1:
        with ProcessPoolExecutor(max_workers=config.ablation.workers) as pool:
            futures = [pool.submit(run_job, config, v, s, jobs_dir, demos) for v, s in jobs]
            rows = [f.result() for f in futures]
    else:
        rows = [run_job(config, v, s, jobs_dir, demos) for v, s in jobs]
    report = merge_rows(rows)
    ordered = check_ordering(report)
    if not ordered:
        logger.warning("Mean reward does not follow %s", " >= ".join(ORDERING))
    report.attrs["ordering_ok"] = ordered
    return report
