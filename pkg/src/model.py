"""
Unified graph model: two-layer heterogeneous GCN encoder, goal encoder and
policy / transition / value heads, plus the model-based rollout.

A vector-observation network with the same head interface backs the
full-state and RGB-D baselines.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch_geometric.nn import HeteroConv, SAGEConv

from src.config import EnvConfig, ModelConfig
from src.dough_env import pin_to_ee_poses, start_pin_pose
from src.errors import ContractError
from src.graph import (MANIPULATOR_EDGES, N_MANIPULATORS, N_OBJECT_NODES, OBJECT_EDGES, HeteroGraph,
                       ObjectSubgraph, build_hetero_graph)
from src.tensor import DTYPE

logger = logging.getLogger(__name__)

MANIPULATOR = "manipulator"
OBJECT = "object"
REL_OO = (OBJECT, "touches", OBJECT)
REL_MO = (MANIPULATOR, "acts_on", OBJECT)
REL_OM = (OBJECT, "pushes", MANIPULATOR)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


def _directed(edges) -> torch.Tensor:
    pairs = list(edges) + [(b, a) for a, b in edges]
    return torch.tensor(pairs, dtype=torch.long).t().contiguous()


OO_INDEX = _directed(OBJECT_EDGES)
MO_INDEX = torch.tensor(MANIPULATOR_EDGES, dtype=torch.long).t().contiguous()
OM_INDEX = MO_INDEX.flip(0)


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.Tanh(), nn.Linear(hidden, out_dim))


@dataclass
class HiddenFeatures:
    h_m: Optional[torch.Tensor]
    h_o: torch.Tensor

    def all_nodes(self) -> torch.Tensor:
        return self.h_o if self.h_m is None else torch.cat([self.h_m, self.h_o], dim=-2)


@dataclass
class ActionDistribution:
    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    def normal(self) -> torch.distributions.Normal:
        return torch.distributions.Normal(self.mean, self.std)

    def log_prob(self, action: torch.Tensor) -> torch.Tensor:
        return self.normal().log_prob(action).sum(-1)

    def entropy(self) -> torch.Tensor:
        return self.normal().entropy().sum(-1)


@dataclass
class HeadOutputs:
    dist: ActionDistribution
    value: torch.Tensor
    next_attrs: Optional[torch.Tensor]
    hidden: Optional[HiddenFeatures] = None


def graph_inputs(g: HeteroGraph, hetero: bool = True) -> Tuple[Dict[str, torch.Tensor], Dict[tuple, torch.Tensor]]:
    x_dict = {OBJECT: torch.as_tensor(g.object.node_attrs, dtype=DTYPE)}
    edge_index_dict = {REL_OO: OO_INDEX}
    if hetero:
        x_dict[MANIPULATOR] = torch.as_tensor(g.manipulator_attrs, dtype=DTYPE)
        edge_index_dict[REL_MO] = MO_INDEX
        edge_index_dict[REL_OM] = OM_INDEX
    return x_dict, edge_index_dict


def batch_edges(index: torch.Tensor, copies: int, n_src: int, n_dst: int) -> torch.Tensor:
    """Repeat one graph's edge index over `copies` disjoint graphs."""
    shift = torch.arange(copies).repeat_interleave(index.shape[1])
    return torch.stack([index[0].repeat(copies) + shift * n_src, index[1].repeat(copies) + shift * n_dst])


def _check_graph(g: HeteroGraph):
    if not g.object.is_finite() or not np.all(np.isfinite(g.manipulator_attrs)):
        raise ContractError("Graph attributes must be finite")


class HeteroGCN(nn.Module):
    """Two rounds of typed message passing: mean per edge type, sum across types, tanh."""

    def __init__(self, attr_dim: int, pose_dim: int, hidden_dim: int, hetero: bool = True, layers: int = 2):
        super().__init__()
        self.hetero = hetero
        self.layers = nn.ModuleList()
        for layer in range(layers):
            in_o = attr_dim if layer == 0 else hidden_dim
            in_m = pose_dim if layer == 0 else hidden_dim
            convs = {REL_OO: SAGEConv(in_o, hidden_dim, aggr="mean")}
            if hetero:
                convs[REL_MO] = SAGEConv((in_m, in_o), hidden_dim, aggr="mean")
                convs[REL_OM] = SAGEConv((in_o, in_m), hidden_dim, aggr="mean")
            self.layers.append(HeteroConv(convs, aggr="sum"))

    def forward(self, x_dict: Dict[str, torch.Tensor],
                edge_index_dict: Dict[tuple, torch.Tensor]) -> Dict[str, torch.Tensor]:
        for conv in self.layers:
            x_dict = {k: torch.tanh(v) for k, v in conv(x_dict, edge_index_dict).items()}
        return x_dict


class DGformNet(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        self.hetero = c.hetero
        hidden = c.hidden_dim
        manip_width = 2 * hidden if c.hetero else 0
        self.encoder = HeteroGCN(c.attr_dim, c.pose_dim, hidden, hetero=c.hetero)
        self.goal_encoder = HeteroGCN(c.attr_dim, c.pose_dim, hidden, hetero=False)
        self.policy = mlp(manip_width + 2 * hidden, hidden, c.action_dim)
        self.transition = mlp(hidden + (hidden if c.hetero else 0), hidden, c.attr_dim)
        self.value = mlp(hidden, hidden, 1)
        self.log_std = nn.Parameter(torch.full((c.action_dim,), float(c.log_std_init)))
        self.double()

    def encode(self, g: HeteroGraph) -> HiddenFeatures:
        _check_graph(g)
        out = self.encoder(*graph_inputs(g, self.hetero))
        return HiddenFeatures(h_m=out.get(MANIPULATOR), h_o=out[OBJECT])

    def encode_batch(self, graphs: Sequence[HeteroGraph]) -> HiddenFeatures:
        """Encode graphs as one disjoint union; features come back as (batch, nodes, hidden)."""
        if not graphs:
            raise ContractError("Cannot encode an empty batch of graphs")
        for g in graphs:
            _check_graph(g)
        n = len(graphs)
        x_dict = {OBJECT: torch.as_tensor(np.concatenate([g.object.node_attrs for g in graphs]), dtype=DTYPE)}
        edge_index_dict = {REL_OO: batch_edges(OO_INDEX, n, N_OBJECT_NODES, N_OBJECT_NODES)}
        if self.hetero:
            x_dict[MANIPULATOR] = torch.as_tensor(np.concatenate([g.manipulator_attrs for g in graphs]), dtype=DTYPE)
            edge_index_dict[REL_MO] = batch_edges(MO_INDEX, n, N_MANIPULATORS, N_OBJECT_NODES)
            edge_index_dict[REL_OM] = batch_edges(OM_INDEX, n, N_OBJECT_NODES, N_MANIPULATORS)
        out = self.encoder(x_dict, edge_index_dict)
        h_m = out.get(MANIPULATOR)
        return HiddenFeatures(h_m=None if h_m is None else h_m.reshape(n, N_MANIPULATORS, -1),
                              h_o=out[OBJECT].reshape(n, N_OBJECT_NODES, -1))

    def encode_goal(self, goal: ObjectSubgraph) -> torch.Tensor:
        x_dict = {OBJECT: torch.as_tensor(goal.node_attrs, dtype=DTYPE)}
        out = self.goal_encoder(x_dict, {REL_OO: OO_INDEX})
        return out[OBJECT].mean(dim=0)

    # heads accept single-graph (nodes, hidden) or batched (batch, nodes, hidden) features

    def policy_head(self, h: HiddenFeatures, goal_emb: torch.Tensor) -> ActionDistribution:
        pooled = h.h_o.mean(dim=-2)
        parts = [pooled, goal_emb.expand(pooled.shape)]
        if self.hetero:
            parts.insert(0, h.h_m.flatten(-2))
        mean = self.policy(torch.cat(parts, dim=-1))
        return ActionDistribution(mean=mean, log_std=self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX))

    def transition_head(self, h: HiddenFeatures) -> torch.Tensor:
        x = h.h_o
        if self.hetero:
            x = torch.cat([x, h.h_m.mean(dim=-2, keepdim=True).expand_as(x)], dim=-1)
        return self.transition(x)

    def value_head(self, h: HiddenFeatures) -> torch.Tensor:
        return self.value(h.all_nodes().mean(dim=-2)).squeeze(-1)

    def _heads(self, h: HiddenFeatures, goal_emb: torch.Tensor) -> HeadOutputs:
        return HeadOutputs(dist=self.policy_head(h, goal_emb), value=self.value_head(h),
                           next_attrs=self.transition_head(h), hidden=h)

    def evaluate(self, g: HeteroGraph, goal_emb: torch.Tensor) -> HeadOutputs:
        return self._heads(self.encode(g), goal_emb)

    def evaluate_batch(self, graphs: Sequence[HeteroGraph], goal_emb: torch.Tensor) -> HeadOutputs:
        return self._heads(self.encode_batch(graphs), goal_emb)


class VectorPolicyNet(nn.Module):
    """Policy/value network over flat observation vectors (full state or RGB-D)."""

    def __init__(self, obs_dim: int, goal_dim: int, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        hidden = self.config.hidden_dim
        self.obs_dim = obs_dim
        self.goal_dim = goal_dim
        self.encoder = mlp(obs_dim, hidden, hidden)
        self.goal_encoder = mlp(goal_dim, hidden, hidden)
        self.policy = mlp(2 * hidden, hidden, self.config.action_dim)
        self.value = mlp(hidden, hidden, 1)
        self.log_std = nn.Parameter(torch.full((self.config.action_dim,), float(self.config.log_std_init)))
        self.double()

    def encode_goal(self, goal: np.ndarray) -> torch.Tensor:
        return torch.tanh(self.goal_encoder(torch.as_tensor(goal, dtype=DTYPE)))

    def evaluate(self, obs: np.ndarray, goal_emb: torch.Tensor) -> HeadOutputs:
        h = torch.tanh(self.encoder(torch.as_tensor(obs, dtype=DTYPE)))
        mean = self.policy(torch.cat([h, goal_emb.expand(h.shape)], dim=-1))
        dist = ActionDistribution(mean=mean, log_std=self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX))
        return HeadOutputs(dist=dist, value=self.value(h).squeeze(-1), next_attrs=None)

    def evaluate_batch(self, observations: Sequence[np.ndarray], goal_emb: torch.Tensor) -> HeadOutputs:
        if not len(observations):
            raise ContractError("Cannot evaluate an empty batch of observations")
        return self.evaluate(np.stack(observations), goal_emb)


def sample_action(dist: ActionDistribution, generator: Optional[torch.Generator] = None,
                  deterministic: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    if deterministic:
        action = dist.mean.detach().clone()
    else:
        noise = torch.randn(dist.mean.shape, generator=generator, dtype=DTYPE)
        action = (dist.mean + dist.std * noise).detach()
    return action, dist.log_prob(action)


class ActionCodec:
    """Normalised action u <-> dual end-effector poses (2 x [x, y, z, qw, qx, qy, qz])."""

    def __init__(self, env_config: Optional[EnvConfig] = None, model_config: Optional[ModelConfig] = None):
        env_config = env_config or EnvConfig()
        model_config = model_config or ModelConfig()
        self.offset = pin_to_ee_poses(start_pin_pose(env_config)).reshape(-1)
        pose_scale = np.concatenate([model_config.position_scale, np.ones(4)])
        self.scale = np.concatenate([pose_scale, pose_scale])

    def to_poses(self, u) -> np.ndarray:
        u = u.detach().numpy() if isinstance(u, torch.Tensor) else np.asarray(u, dtype=float)
        poses = (self.offset + self.scale * u).reshape(2, -1)
        for pose in poses:
            norm = np.linalg.norm(pose[3:7])
            pose[3:7] = pose[3:7] / norm if norm > 1e-8 else (1.0, 0.0, 0.0, 0.0)
        return poses

    def from_poses(self, poses) -> np.ndarray:
        return (np.asarray(poses, dtype=float).reshape(-1) - self.offset) / self.scale


@dataclass
class RolloutResult:
    actions: List[np.ndarray] = field(default_factory=list)
    poses: List[np.ndarray] = field(default_factory=list)
    graphs: List[HeteroGraph] = field(default_factory=list)
    subgraphs: List[ObjectSubgraph] = field(default_factory=list)
    logprobs: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.actions)


Transition = Callable[[HeteroGraph, np.ndarray], ObjectSubgraph]


def model_rollout(g0: HeteroGraph, goal: ObjectSubgraph, horizon: int, model: DGformNet, codec: ActionCodec,
                  generator: Optional[torch.Generator] = None, deterministic: bool = False,
                  transition: Optional[Transition] = None) -> RolloutResult:
    """Imagine `horizon` steps: act on the current graph, predict the next object state, repeat.

    `transition(graph, poses)` replaces the learned transition head when given.
    """
    if horizon < 1:
        raise ContractError(f"Rollout horizon must be >= 1, got {horizon}")
    result = RolloutResult()
    g = g0
    with torch.no_grad():
        goal_emb = model.encode_goal(goal)
        for t in range(horizon):
            out = model.evaluate(g, goal_emb)
            u, logp = sample_action(out.dist, generator, deterministic)
            poses = codec.to_poses(u)
            if transition is None:
                next_sub = g.object.with_attrs(out.next_attrs.numpy())
            else:
                next_sub = transition(g, poses)
            if not (next_sub.is_finite() and np.all(np.isfinite(poses))):
                logger.warning("Model rollout produced non-finite values at step %d; truncating", t)
                result.truncated = True
                break
            result.actions.append(u.numpy())
            result.poses.append(poses)
            result.graphs.append(g)
            result.subgraphs.append(next_sub)
            result.logprobs.append(float(logp))
            result.values.append(float(out.value))
            g = build_hetero_graph(next_sub, poses)
    return result
