"""
Training objective: GAE advantages, clipped surrogate, value, dynamics,
entropy and imitation terms, and the Lagrange multiplier update.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import torch

from src.config import TrainerConfig
from src.errors import ContractError, TrainingError
from src.graph import HeteroGraph, ObjectSubgraph
from src.model import ActionDistribution
from src.tensor import DTYPE, Tape, elementwise, tensor

logger = logging.getLogger(__name__)

IMITATION_FORMS = ("log", "likelihood")


@dataclass
class LossWeights:
    c1: float = 0.5
    c2: float = 1.0
    c3: float = 0.01
    clip_eps: float = 0.2
    tau: float = 1.0
    alpha: float = 1.0
    alpha_lr: float = 0.01

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3) < 0:
            raise ContractError("Loss weights c1, c2 and c3 must be non-negative")
        if not 0 < self.clip_eps < 1:
            raise ContractError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if self.alpha < 0:
            raise ContractError(f"alpha must be non-negative, got {self.alpha}")

    @classmethod
    def from_config(cls, config: TrainerConfig, alpha: Optional[float] = None) -> "LossWeights":
        return cls(c1=config.c1, c2=config.c2, c3=config.c3, clip_eps=config.clip_eps, tau=config.tau,
                   alpha=config.alpha0 if alpha is None else alpha, alpha_lr=config.alpha_lr)


@dataclass
class ImitationSample:
    """One demonstration state-action pair with the demo's goal."""

    graph: HeteroGraph
    goal: ObjectSubgraph
    action: np.ndarray


@dataclass
class RolloutBatch:
    """One H-step period.

    `observations` are the inputs the policy acted on (imagined graphs for the
    model-based variants, real observations otherwise); `real_graphs` and
    `next_subgraphs` pair each real graph with the subgraph observed after it.
    """

    observations: List[Any]
    goal: Any
    actions: np.ndarray
    logprobs_old: np.ndarray
    rewards: np.ndarray
    values_old: np.ndarray
    dones: np.ndarray
    real_graphs: List[HeteroGraph] = field(default_factory=list)
    next_subgraphs: List[ObjectSubgraph] = field(default_factory=list)
    predicted: List[ObjectSubgraph] = field(default_factory=list)
    last_value: float = 0.0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.observations)
        lengths = {len(self.actions), len(self.logprobs_old), len(self.rewards), len(self.values_old), len(self.dones)}
        if lengths != {n}:
            raise ContractError(f"Rollout batch sequences differ in length: {sorted(lengths | {n})}")
        if n == 0:
            raise ContractError("Rollout batch is empty")
        if len(self.real_graphs) != len(self.next_subgraphs):
            raise ContractError("Each real graph needs exactly one observed next subgraph")
        if not np.all(np.isfinite(self.logprobs_old)):
            raise ContractError("Old log-probabilities must be finite")

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class LossBreakdown:
    clip: float
    vf: float
    dyn: float
    entropy: float
    imi: float
    alpha: float
    total: float

    def to_dict(self):
        return asdict(self)


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float,
                last_value: float = 0.0, dones: Optional[Sequence[bool]] = None,
                normalize: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """GAE(lambda) advantages and discounted returns.

    `last_value` bootstraps the state after the final step. Advantages are
    standardised when the batch has at least two entries.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ContractError(f"rewards and values must be equal-length vectors, got {rewards.shape} and {values.shape}")
    if not (0 <= gamma <= 1 and 0 <= lam <= 1):
        raise ContractError("gamma and lambda must lie in [0, 1]")
    dones = np.zeros(len(rewards), dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    if dones.shape != rewards.shape:
        raise ContractError("dones must match rewards in length")
    advantages = np.zeros_like(rewards)
    running = 0.0
    next_value = float(last_value)
    for t in reversed(range(len(rewards))):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        advantages[t] = running
        next_value = values[t]
    returns = advantages + values
    if normalize and len(advantages) >= 2:
        std = advantages.std()
        advantages = advantages - advantages.mean()
        if std > 0:
            advantages = advantages / std
    return advantages, returns


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def loss_clip(logp_new, logp_old, advantages, clip_eps: float) -> torch.Tensor:
    logp_new, logp_old, advantages = _as_tensor(logp_new), _as_tensor(logp_old), _as_tensor(advantages)
    if not (logp_new.shape == logp_old.shape == advantages.shape):
        raise ContractError("Clip loss inputs must have equal lengths")
    ratio = torch.exp(logp_new - logp_old)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1 - clip_eps, 1 + clip_eps) * advantages
    return -torch.min(unclipped, clipped).mean()


def loss_value(values_new, returns) -> torch.Tensor:
    values_new, returns = _as_tensor(values_new), _as_tensor(returns)
    if values_new.shape != returns.shape:
        raise ContractError("Value loss inputs must have equal lengths")
    return ((values_new - returns) ** 2).mean()


def loss_dyn(predicted: Sequence, actual: Sequence) -> torch.Tensor:
    if len(predicted) != len(actual) or not predicted:
        raise ContractError(f"Dynamics loss needs aligned non-empty sequences, got {len(predicted)} and {len(actual)}")
    pred = torch.stack([_as_tensor(p.node_attrs if isinstance(p, ObjectSubgraph) else p) for p in predicted])
    true = torch.stack([_as_tensor(a.node_attrs if isinstance(a, ObjectSubgraph) else a) for a in actual])
    if pred.shape != true.shape:
        raise ContractError(f"Predicted attrs {tuple(pred.shape)} do not match actual attrs {tuple(true.shape)}")
    return ((pred - true) ** 2).mean()


def entropy_term(dists: Sequence[ActionDistribution]) -> torch.Tensor:
    if not dists:
        raise ContractError("Entropy needs at least one distribution")
    return torch.stack([d.entropy() for d in dists]).mean()


def imitation_from_log_probs(logps: torch.Tensor, form: str = "log") -> torch.Tensor:
    if form not in IMITATION_FORMS:
        raise ContractError(f"Unknown imitation form {form!r}")
    if form == "log":
        return -logps.mean()
    return -torch.exp(logps).mean()


def imitation_from_distributions(dists: Sequence[ActionDistribution], actions: Sequence,
                                 form: str = "log") -> torch.Tensor:
    if not dists:
        raise ContractError("Imitation loss needs a non-empty demo batch")
    if len(dists) != len(actions):
        raise ContractError("Each demo distribution needs exactly one demo action")
    logps = torch.stack([d.log_prob(_as_tensor(a)) for d, a in zip(dists, actions)])
    return imitation_from_log_probs(logps, form)


def loss_imitation(model, samples: Sequence[ImitationSample], form: str = "log") -> torch.Tensor:
    """Negative mean (log-)likelihood of demonstrated actions under the current policy."""
    if not samples:
        raise ContractError("Imitation loss needs a non-empty demo batch")
    goal_cache = {}
    for s in samples:
        if id(s.goal) not in goal_cache:
            goal_cache[id(s.goal)] = model.encode_goal(s.goal)
    goal_emb = torch.stack([goal_cache[id(s.goal)] for s in samples])
    dist = model.policy_head(model.encode_batch([s.graph for s in samples]), goal_emb)
    return imitation_from_log_probs(dist.log_prob(_as_tensor(np.stack([s.action for s in samples]))), form)


def lagrange_update(alpha: float, l_imi: float, tau: float, alpha_lr: float) -> float:
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    return max(0.0, alpha + alpha_lr * (float(l_imi) - tau))


def _check_finite(name: str, value: torch.Tensor):
    if not bool(torch.isfinite(value).all()):
        raise TrainingError(name)


def _scalar(value: torch.Tensor) -> float:
    return value.detach().item()


def total_loss(model, batch: RolloutBatch, weights: LossWeights,
               demos: Optional[Sequence[ImitationSample]] = None,
               imitation_form: str = "log", tape: Optional[Tape] = None) -> Tuple[torch.Tensor, LossBreakdown]:
    """Clip + c1 * value + c2 * dynamics - c3 * entropy + alpha * imitation, averaged over the period.

    The period is evaluated as one batch. The weighted combination is recorded on `tape`.
    """
    if batch.advantages is None or batch.returns is None:
        raise ContractError("Compute advantages and returns before the loss")
    goal_emb = model.encode_goal(batch.goal)
    out = model.evaluate_batch(batch.observations, goal_emb)
    logp_new = out.dist.log_prob(_as_tensor(np.asarray(batch.actions, dtype=float)))
    clip = loss_clip(logp_new, batch.logprobs_old, batch.advantages, weights.clip_eps)
    vf = loss_value(out.value, batch.returns)
    ent = entropy_term([out.dist])

    zero = torch.zeros((), dtype=DTYPE)
    dyn = zero
    if weights.c2 > 0 and batch.real_graphs:
        preds = model.transition_head(model.encode_batch(batch.real_graphs))
        dyn = loss_dyn(list(preds.unbind(0)), batch.next_subgraphs)
    imi = zero
    if demos:
        imi = loss_imitation(model, demos, imitation_form)

    for name, value in (("loss_clip", clip), ("loss_vf", vf), ("loss_dyn", dyn), ("entropy", ent), ("loss_imi", imi)):
        _check_finite(name, value)

    terms = [(weights.c1, vf), (weights.c2, dyn), (-weights.c3, ent)]
    if weights.alpha > 0:
        terms.append((weights.alpha, imi))
    total = clip
    for w, term in terms:
        total = elementwise("add", total, elementwise("mul", tensor(w), term, tape=tape), tape=tape)
    _check_finite("total", total)
    breakdown = LossBreakdown(clip=_scalar(clip), vf=_scalar(vf), dyn=_scalar(dyn), entropy=_scalar(ent),
                              imi=_scalar(imi), alpha=float(weights.alpha), total=_scalar(total))
    logger.debug("Loss breakdown: %s", breakdown)
    return total, breakdown
