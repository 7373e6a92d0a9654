"""
Training loop for every policy variant.

Each update runs one H-step period: the pin is reset to its start pose, the
policy is conditioned on the current deformation and the goal, actions are
executed in the environment, and the period's losses drive one Adam phase
followed by the multiplier update.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from src.checkpoint import Checkpoint, rng_state, save_checkpoint
from src.config import EnvConfig, ModelConfig, RunConfig
from src.demos import DemoDataset, generate_scripted_demos
from src.dough_env import DoughEnv, DoughState, GoalSpec, RgbdObs, pin_to_ee_poses, render_topdown, start_pin_pose
from src.errors import ConfigError, EmptySegmentation, TrainingError
from src.graph import ObjectSubgraph, PixelFrame, abstract_observation, build_hetero_graph
from src.losses import LossWeights, RolloutBatch, compute_gae, lagrange_update, total_loss
from src.model import ActionCodec, DGformNet, VectorPolicyNet, model_rollout, sample_action
from src.tensor import AdamState, Tape, adam_step, backward
from src.utils import seed_everything, torch_generator

logger = logging.getLogger(__name__)

MODEL_BASED = ("dgform", "dgform-i", "dgform-il")
IMITATION = ("dgform-i", "dgform-il")
GRAPH_VARIANTS = MODEL_BASED + ("ppo-homo", "ppo-hetero")

METRIC_COLUMNS = ["update", "reward_mean", "loss_clip", "loss_vf", "loss_dyn", "entropy", "loss_imi", "alpha",
                  "iou", "sdf", "density"]
DEMO_ROLLOUTS = 10
HEIGHT_SCALE = 0.01
EVAL_SEED_OFFSET = 10_000


def block_mean(arr: np.ndarray, k: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if h % k or w % k:
        raise ConfigError(f"Observation of size {h}x{w} does not split into {k}x{k} blocks")
    rest = arr.shape[2:]
    return arr.reshape(k, h // k, k, w // k, *rest).mean(axis=(1, 3))


class Observer:
    """Turns environment output into the input each variant's network expects."""

    def __init__(self, variant: str, env_config: EnvConfig, model_config: ModelConfig):
        self.variant = variant
        self.env_config = env_config
        self.k = model_config.vector_downsample
        self.frame = PixelFrame(env_config.board_size, env_config.resolution)
        self.codec = ActionCodec(env_config, model_config)

    @property
    def uses_graph(self) -> bool:
        return self.variant in GRAPH_VARIANTS

    def subgraph(self, obs: RgbdObs, previous: Optional[ObjectSubgraph] = None) -> ObjectSubgraph:
        try:
            return abstract_observation(obs, self.frame)
        except EmptySegmentation:
            if previous is None:
                raise
            logger.warning("Segmentation failed; carrying the previous subgraph forward")
            return previous

    def _rgbd_vector(self, obs: RgbdObs) -> np.ndarray:
        rgb = block_mean(obs.rgb.astype(float) / 255.0, self.k)
        height = block_mean((self.env_config.camera_height - obs.depth) / HEIGHT_SCALE, self.k)
        return np.concatenate([rgb.reshape(-1), height.reshape(-1)])

    def policy_input(self, state: DoughState, obs: RgbdObs, sub: Optional[ObjectSubgraph], poses: np.ndarray):
        if self.uses_graph:
            return build_hetero_graph(sub, poses)
        if self.variant == "ppo-full":
            heights = block_mean(state.heights / HEIGHT_SCALE, self.k).reshape(-1)
            return np.concatenate([heights, self.codec.from_poses(poses)])
        return self._rgbd_vector(obs)

    def goal_input(self, goal: GoalSpec):
        if self.variant == "ppo-full":
            return block_mean(goal.goal_heights / HEIGHT_SCALE, self.k).reshape(-1)
        clean = dataclasses.replace(self.env_config, occlusion=False)
        goal_state = DoughState(heights=goal.goal_heights, cell_size=clean.cell_size, pin_pose=start_pin_pose(clean))
        obs = render_topdown(goal_state, clean)
        if self.uses_graph:
            return abstract_observation(obs, self.frame)
        return self._rgbd_vector(obs)

    def dims(self) -> Tuple[int, int]:
        if self.variant == "ppo-full":
            return self.k ** 2 + 14, self.k ** 2
        return 4 * self.k ** 2, 4 * self.k ** 2


def build_policy(variant: str, env_config: EnvConfig, model_config: ModelConfig) -> torch.nn.Module:
    if variant in GRAPH_VARIANTS:
        return DGformNet(dataclasses.replace(model_config, hetero=variant != "ppo-homo"))
    obs_dim, goal_dim = Observer(variant, env_config, model_config).dims()
    return VectorPolicyNet(obs_dim, goal_dim, model_config)


@dataclass
class PeriodResult:
    batch: RolloutBatch
    state: DoughState
    done: bool
    infos: List[Dict[str, Any]] = field(default_factory=list)
    truncated: bool = False


class PolicyRunner:
    """Runs a policy in the environment period by period."""

    def __init__(self, model: torch.nn.Module, variant: str, env: DoughEnv, model_config: ModelConfig):
        self.model = model
        self.variant = variant
        self.env = env
        self.observer = Observer(variant, env.config, model_config)
        self.codec = self.observer.codec
        self.start_poses = pin_to_ee_poses(start_pin_pose(env.config))
        self.goal_input = self.observer.goal_input(env.goal)

    @property
    def model_based(self) -> bool:
        return self.variant in MODEL_BASED

    def period(self, state: DoughState, horizon: int, generator: Optional[torch.Generator] = None,
               deterministic: bool = False) -> PeriodResult:
        state = self.env.reset_pin(state)
        obs = self.env.render(state)
        poses = self.start_poses
        sub = self.observer.subgraph(obs) if self.observer.uses_graph else None
        observations, actions, logprobs, values = [], [], [], []
        truncated = False
        with torch.no_grad():
            goal_emb = self.model.encode_goal(self.goal_input)
        if self.model_based:
            roll = model_rollout(build_hetero_graph(sub, poses), self.goal_input, horizon, self.model, self.codec,
                                 generator, deterministic)
            if len(roll) == 0:
                raise TrainingError("rollout", "model rollout produced no finite step")
            observations, actions, logprobs, values = roll.graphs, roll.actions, roll.logprobs, roll.values
            plan = roll.poses
            truncated = roll.truncated
            horizon = len(roll)

        rewards, dones, infos, real_graphs, next_subs = [], [], [], [], []
        done = False
        for t in range(horizon):
            if self.model_based:
                next_poses = plan[t]
            else:
                inp = self.observer.policy_input(state, obs, sub, poses)
                with torch.no_grad():
                    out = self.model.evaluate(inp, goal_emb)
                    u, logp = sample_action(out.dist, generator, deterministic)
                observations.append(inp)
                actions.append(u.numpy())
                logprobs.append(float(logp))
                values.append(float(out.value))
                next_poses = self.codec.to_poses(u)
            if sub is not None:
                real_graphs.append(build_hetero_graph(sub, poses))
            state, obs, reward, done, info = self.env.step(state, next_poses.reshape(-1))
            poses = next_poses
            if sub is not None:
                sub = self.observer.subgraph(obs, sub)
                next_subs.append(sub)
            rewards.append(reward)
            dones.append(done)
            infos.append(info)
            if done:
                break

        n = len(rewards)
        last_value = 0.0
        if not done:
            with torch.no_grad():
                last_value = float(self.model.evaluate(self.observer.policy_input(state, obs, sub, poses),
                                                       goal_emb).value)
        batch = RolloutBatch(observations=list(observations[:n]), goal=self.goal_input,
                             actions=np.asarray(actions[:n]), logprobs_old=np.asarray(logprobs[:n]),
                             rewards=np.asarray(rewards), values_old=np.asarray(values[:n]),
                             dones=np.asarray(dones), real_graphs=real_graphs, next_subgraphs=next_subs,
                             last_value=last_value)
        return PeriodResult(batch=batch, state=state, done=done, infos=infos, truncated=truncated)

    def episode(self, seed: int, horizon: int, generator: Optional[torch.Generator] = None,
                deterministic: bool = True, keep_states: bool = False) -> Dict[str, Any]:
        state, _ = self.env.reset(seed)
        initial = self.env.metrics(state)
        reward_total = 0.0
        states = [state] if keep_states else []
        actions = []
        done = False
        while not done:
            result = self.period(state, horizon, generator, deterministic)
            state, done = result.state, result.done
            reward_total += float(result.batch.rewards.sum())
            actions.extend(self.codec.to_poses(a) for a in result.batch.actions)
            if keep_states:
                states.append(state)
        final = self.env.metrics(state)
        return {"reward": reward_total, "initial_iou": initial["iou"], "steps": state.time_index,
                "actions": actions, "states": states, **final}


@dataclass
class TrainingResult:
    history: List[Dict[str, float]]
    alphas: List[float]
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None
    aborted: bool = False


class Trainer:
    def __init__(self, config: RunConfig, demos: Optional[DemoDataset] = None, output_dir=None):
        self.config = config.validate()
        t = config.trainer
        self.variant = t.variant
        self.rng = seed_everything(config.seed)
        self.generator = torch_generator(config.seed)
        self.env = DoughEnv(config.env)
        self.model = build_policy(self.variant, config.env, config.model)
        self.runner = PolicyRunner(self.model, self.variant, self.env, config.model)
        self.params = list(self.model.parameters())
        self.adam = AdamState(self.params, lr=t.lr, betas=t.betas, eps=t.adam_eps)
        self.alpha = t.alpha0 if self.variant in IMITATION else 0.0
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.demo_samples = []
        if self.variant in IMITATION:
            if demos is None:
                logger.info("No demonstrations given; generating %d scripted rollouts", DEMO_ROLLOUTS)
                demos = generate_scripted_demos(config.env, DEMO_ROLLOUTS, seed=config.seed)
            self.demo_samples = demos.imitation_samples(self.runner.codec, self.runner.start_poses)
        self.state = None
        self.episode = 0
        self._good_state = self._snapshot()

    def weights(self) -> LossWeights:
        t = self.config.trainer
        c2 = t.c2 if self.variant in MODEL_BASED else 0.0
        return LossWeights(c1=t.c1, c2=c2, c3=t.c3, clip_eps=t.clip_eps, tau=t.tau, alpha=self.alpha,
                           alpha_lr=t.alpha_lr)

    def _snapshot(self) -> Dict[str, Any]:
        return {"model": {k: v.clone() for k, v in self.model.state_dict().items()}, "alpha": self.alpha}

    def _demo_batch(self):
        if not self.demo_samples:
            return None
        size = min(self.config.trainer.demo_batch, len(self.demo_samples))
        idx = self.rng.choice(len(self.demo_samples), size=size, replace=False)
        return [self.demo_samples[i] for i in sorted(idx)]

    def _next_state(self) -> DoughState:
        if self.state is None:
            self.state, _ = self.env.reset(int(self.rng.integers(2 ** 31)))
            self.episode += 1
        return self.state

    def update(self, index: int) -> Dict[str, float]:
        t = self.config.trainer
        result = self.runner.period(self._next_state(), t.horizon, self.generator)
        batch = result.batch
        batch.advantages, batch.returns = compute_gae(batch.rewards, batch.values_old, t.gamma, t.lam,
                                                      last_value=batch.last_value, dones=batch.dones)
        demos = self._demo_batch()
        weights = self.weights()
        breakdown = None
        for _ in range(t.epochs):
            self.adam.zero_grad()
            tape = Tape()
            loss, breakdown = total_loss(self.model, batch, weights, demos, t.imitation_form, tape=tape)
            backward(tape, loss)
            # heads outside the loss (transition for c2 = 0) receive no gradient
            adam_step([p for p in self.params if p.grad is not None], self.adam)
        if not all(bool(torch.isfinite(p).all()) for p in self.params):
            raise TrainingError("params", "non-finite parameters after the Adam step")
        if self.variant == "dgform-il":
            self.alpha = lagrange_update(self.alpha, breakdown.imi, t.tau, t.alpha_lr)

        self.state = None if result.done else result.state
        metrics = self.env.metrics(result.state)
        row = {"update": index, "reward_mean": float(batch.rewards.mean()), "loss_clip": breakdown.clip,
               "loss_vf": breakdown.vf, "loss_dyn": breakdown.dyn, "entropy": breakdown.entropy,
               "loss_imi": breakdown.imi, "alpha": self.alpha, **metrics}
        logger.info("update %d: reward %.4f clip %.4f vf %.4f dyn %.6f ent %.3f imi %.3f alpha %.4f iou %.3f",
                    index, row["reward_mean"], row["loss_clip"], row["loss_vf"], row["loss_dyn"], row["entropy"],
                    row["loss_imi"], row["alpha"], row["iou"])
        return row

    def _save(self, path: Path, update: int) -> Path:
        return save_checkpoint(path, self.model, self.config, self.variant, update, self.alpha,
                               rng_state(self.generator, self.rng))

    def _append_metrics(self, row: Dict[str, float], path: Path):
        frame = pd.DataFrame([row], columns=METRIC_COLUMNS)
        frame.to_csv(path, mode="a", header=not path.exists(), index=False)

    def train(self, updates: Optional[int] = None) -> TrainingResult:
        updates = self.config.trainer.updates if updates is None else updates
        history, alphas = [], [self.alpha]
        metrics_path = checkpoint_path = None
        ckpt_dir = None
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = self.output_dir / "metrics.csv"
            if metrics_path.exists():
                metrics_path.unlink()
            ckpt_dir = self.output_dir / "checkpoints"
        logger.info("Training %s for %d updates (seed %d)", self.variant, updates, self.config.seed)
        for index in range(1, updates + 1):
            try:
                row = self.update(index)
            except TrainingError as e:
                logger.error("Training diverged at update %d (%s); restoring the last good parameters", index, e)
                self.model.load_state_dict(self._good_state["model"])
                self.alpha = self._good_state["alpha"]
                if self.output_dir is not None:
                    self._save(self.output_dir / "checkpoint.json", index - 1)
                raise
            history.append(row)
            alphas.append(self.alpha)
            self._good_state = self._snapshot()
            if metrics_path is not None:
                self._append_metrics(row, metrics_path)
                if index % self.config.trainer.checkpoint_every == 0:
                    self._save(ckpt_dir / f"checkpoint_{index:05d}.json", index)
        if self.output_dir is not None:
            checkpoint_path = self._save(self.output_dir / "checkpoint.json", updates)
        return TrainingResult(history=history, alphas=alphas, checkpoint_path=checkpoint_path,
                              metrics_path=metrics_path)


def policy_from_checkpoint(checkpoint: Checkpoint) -> torch.nn.Module:
    model = build_policy(checkpoint.variant, checkpoint.config.env, checkpoint.config.model)
    model.load_state_dict(checkpoint.weights)
    return model


def evaluate_policy(model: torch.nn.Module, variant: str, config: RunConfig, seeds) -> List[Dict[str, Any]]:
    env = DoughEnv(config.env)
    runner = PolicyRunner(model, variant, env, config.model)
    episodes = []
    for seed in seeds:
        result = runner.episode(int(seed), config.trainer.horizon, deterministic=True)
        episodes.append({k: result[k] for k in ("reward", "iou", "sdf", "density", "initial_iou", "steps")})
    return episodes
