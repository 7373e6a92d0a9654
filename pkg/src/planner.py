"""
Bimanual trajectory planning from a short dual-pose path.

GMMs are fitted on relative end-effector motion from demonstrations, mapped
into task frames, fused as a product of Gaussians and tracked by linear
quadratic tracking (LQT) over an integrator chain.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from src.config import PlannerConfig
from src.errors import ContractError, NumericalError, ParseError
from src.utils import write_json

logger = logging.getLogger(__name__)

POSE_DIM = 7
POSE_FIELDS = ("x", "y", "z", "qw", "qx", "qy", "qz")
POSE_COLUMNS = [f"l_{f}" for f in POSE_FIELDS] + [f"r_{f}" for f in POSE_FIELDS]
MAX_CONDITION = 1e12
BATCH_LIMIT = 500


@dataclass
class Gaussian:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.covariance.shape != (d, d):
            raise ContractError(f"Mean of shape {self.mean.shape} does not match covariance {self.covariance.shape}")
        if not np.all(np.isfinite(self.mean)):
            raise ContractError("Gaussian mean must be finite")
        # raises LinAlgError when not positive definite
        np.linalg.cholesky(self.covariance)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.covariance)


@dataclass
class GMM:
    weights: np.ndarray
    components: List[Gaussian]
    log_likelihoods: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.components) or not self.components:
            raise ContractError("A GMM needs one weight per component and at least one component")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-8:
            raise ContractError("GMM weights must be non-negative and sum to 1")
        if len({c.dim for c in self.components}) != 1:
            raise ContractError("GMM components differ in dimension")

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def log_likelihood(self, data: np.ndarray) -> float:
        return float(logsumexp(_log_densities(np.atleast_2d(data), self), axis=1).sum())


@dataclass
class TaskFrame:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if self.A.shape[0] != self.A.shape[1] or self.b.shape != (self.A.shape[0],):
            raise ContractError(f"Frame needs a square A and matching b, got {self.A.shape} and {self.b.shape}")

    @classmethod
    def identity(cls, dim: int) -> "TaskFrame":
        return cls(A=np.eye(dim), b=np.zeros(dim))


@dataclass
class StepReference:
    means: np.ndarray
    covariances: np.ndarray

    def __len__(self) -> int:
        return self.means.shape[0]


@dataclass
class LQTResult:
    states: np.ndarray
    controls: np.ndarray
    dim: int

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :self.dim]


@dataclass
class BimanualTrajectory:
    timestamps: np.ndarray
    left: np.ndarray
    right: np.ndarray
    order: int = 2
    dim: int = POSE_DIM

    def __post_init__(self):
        if not (len(self.timestamps) == len(self.left) == len(self.right)):
            raise ContractError("Timestamps and both arms must have equal lengths")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ContractError("Timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)

    @staticmethod
    def _poses(states: np.ndarray) -> np.ndarray:
        poses = states[:, :POSE_DIM].copy()
        norms = np.linalg.norm(poses[:, 3:7], axis=1, keepdims=True)
        poses[:, 3:7] = np.where(norms > 1e-8, poses[:, 3:7] / np.maximum(norms, 1e-12), [1.0, 0.0, 0.0, 0.0])
        return poses

    @property
    def left_pose(self) -> np.ndarray:
        return self._poses(self.left)

    @property
    def right_pose(self) -> np.ndarray:
        return self._poses(self.right)


@dataclass
class PlanResult:
    trajectory: BimanualTrajectory
    waypoint_steps: np.ndarray
    waypoints: np.ndarray
    coordination_mean: Optional[np.ndarray] = None
    coordination_gmm: Optional[GMM] = None


def _log_densities(data: np.ndarray, gmm: GMM) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    return np.column_stack([
        log_w[k] + multivariate_normal.logpdf(data, mean=c.mean, cov=c.covariance, allow_singular=False)
        for k, c in enumerate(gmm.components)
    ]).reshape(len(data), gmm.n_components)


def _segment_init(data: np.ndarray, k: int, reg: float) -> Tuple[np.ndarray, List[Gaussian]]:
    d = data.shape[1]
    parts = np.array_split(np.arange(len(data)), k)
    comps = []
    for idx in parts:
        seg = data[idx]
        cov = np.atleast_2d(np.cov(seg.T, bias=True)) if len(seg) > 1 else np.zeros((d, d))
        comps.append(Gaussian(seg.mean(axis=0), cov + reg * np.eye(d)))
    return np.array([len(p) for p in parts], dtype=float) / len(data), comps


def _kmeans_init(data: np.ndarray, k: int, reg: float, seed: int) -> Tuple[np.ndarray, List[Gaussian]]:
    _, labels = kmeans2(data, k, minit="++", seed=seed)
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        logger.warning("k-means left an empty cluster; falling back to segment initialisation")
        return _segment_init(data, k, reg)
    d = data.shape[1]
    comps = []
    for j in range(k):
        seg = data[labels == j]
        cov = np.atleast_2d(np.cov(seg.T, bias=True)) if len(seg) > 1 else np.zeros((d, d))
        comps.append(Gaussian(seg.mean(axis=0), cov + reg * np.eye(d)))
    return counts / len(data), comps


def fit_gmm_em(data, n_components: int, seed: int = 0, times: Optional[Sequence[float]] = None,
               tol: float = 1e-8, max_iter: int = 200, reg: float = 1e-6, init: str = "segments") -> GMM:
    """Fit a GMM by EM and order its components by their mean time.

    `times` gives each sample's phase for the ordering and the segment
    initialisation; the sample index is used when it is omitted.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n, d = data.shape
    if n_components < 1:
        raise ContractError(f"n_components must be >= 1, got {n_components}")
    if n_components > n:
        raise ContractError(f"Cannot fit {n_components} components to {n} samples")
    times = np.arange(n, dtype=float) if times is None else np.asarray(times, dtype=float)
    if times.shape != (n,):
        raise ContractError("times must hold one value per sample")
    order = np.argsort(times, kind="stable")
    data, times = data[order], times[order]

    if init == "kmeans":
        weights, comps = _kmeans_init(data, n_components, reg, seed)
    elif init == "segments":
        weights, comps = _segment_init(data, n_components, reg)
    else:
        raise ContractError(f"Unknown GMM initialisation {init!r}")

    gmm = GMM(weights, comps)
    history = []
    resp = None
    for it in range(max_iter):
        log_dens = _log_densities(data, gmm)
        norm = logsumexp(log_dens, axis=1)
        ll = float(norm.sum())
        history.append(ll)
        resp = np.exp(log_dens - norm[:, None])
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            break
        nk = resp.sum(axis=0)
        new_comps = []
        for j in range(n_components):
            if nk[j] < 1e-12:
                new_comps.append(gmm.components[j])
                continue
            mean = resp[:, j] @ data / nk[j]
            diff = data - mean
            cov = (resp[:, j, None] * diff).T @ diff / nk[j] + reg * np.eye(d)
            new_comps.append(Gaussian(mean, (cov + cov.T) / 2))
        gmm = GMM(nk / nk.sum(), new_comps)
    logger.debug("EM finished after %d iterations, log-likelihood %.6f", len(history), history[-1])

    centers = (resp * times[:, None]).sum(axis=0) / np.maximum(resp.sum(axis=0), 1e-300)
    rank = np.argsort(centers, kind="stable")
    return GMM(gmm.weights[rank] / gmm.weights[rank].sum(), [gmm.components[j] for j in rank], history)


def frame_transform(g: Gaussian, frame: TaskFrame) -> Gaussian:
    if frame.A.shape[1] != g.dim:
        raise ContractError(f"Frame of dimension {frame.A.shape[1]} does not match Gaussian of dimension {g.dim}")
    cov = frame.A @ g.covariance @ frame.A.T
    return Gaussian(frame.A @ g.mean + frame.b, (cov + cov.T) / 2)


def relative_trajectory(left, right, frame: TaskFrame) -> np.ndarray:
    left = np.atleast_2d(np.asarray(left, dtype=float))
    right = np.atleast_2d(np.asarray(right, dtype=float))
    if left.shape != right.shape:
        raise ContractError(f"Left {left.shape} and right {right.shape} sequences differ in shape")
    if left.shape[1] != frame.A.shape[0]:
        raise ContractError("Frame dimension does not match the pose dimension")
    return np.linalg.solve(frame.A, (left - right - frame.b).T).T


def product_of_gaussians(gaussians: Sequence[Gaussian]) -> Gaussian:
    if not gaussians:
        raise ContractError("Need at least one Gaussian to fuse")
    if len({g.dim for g in gaussians}) != 1:
        raise ContractError("Gaussians to fuse differ in dimension")
    precisions = [g.precision() for g in gaussians]
    lam = np.sum(precisions, axis=0)
    cov = np.linalg.inv(lam)
    cov = (cov + cov.T) / 2
    mean = cov @ np.sum([p @ g.mean for p, g in zip(precisions, gaussians)], axis=0)
    return Gaussian(mean, cov)


def fuse_steps(means: Sequence[np.ndarray], covariances: Sequence[np.ndarray]) -> StepReference:
    """Per-step product of Gaussians over stacked (T, d) means and (T, d, d) covariances."""
    precisions = [np.linalg.inv(c) for c in covariances]
    lam = np.sum(precisions, axis=0)
    cov = np.linalg.inv(lam)
    cov = (cov + np.swapaxes(cov, 1, 2)) / 2
    eta = np.sum([np.einsum("tij,tj->ti", p, m) for p, m in zip(precisions, means)], axis=0)
    return StepReference(means=np.einsum("tij,tj->ti", cov, eta), covariances=cov)


def segment_schedule(n_components: int, steps: int) -> np.ndarray:
    return np.minimum(np.arange(steps) * n_components // steps, n_components - 1)


def build_reference(gmms: Sequence[GMM], frames: Sequence[TaskFrame], steps: int) -> StepReference:
    if len(gmms) != len(frames) or not gmms:
        raise ContractError("Need one task frame per GMM")
    if len({g.n_components for g in gmms}) != 1:
        raise ContractError("All GMMs must share the same number of components")
    if steps < 1:
        raise ContractError("Reference needs at least one step")
    k = gmms[0].n_components
    fused = [product_of_gaussians([frame_transform(g.components[j], f) for g, f in zip(gmms, frames)])
             for j in range(k)]
    schedule = segment_schedule(k, steps)
    return StepReference(means=np.array([fused[j].mean for j in schedule]),
                         covariances=np.array([fused[j].covariance for j in schedule]))


def integrator_chain(dim: int, order: int, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    a1 = np.zeros((order, order))
    for i in range(order):
        for j in range(i, order):
            a1[i, j] = dt ** (j - i) / math.factorial(j - i)
    b1 = np.array([dt ** (order - i) / math.factorial(order - i) for i in range(order)])[:, None]
    return np.kron(a1, np.eye(dim)), np.kron(b1, np.eye(dim))


def _tracking_terms(reference: StepReference, order: int) -> Tuple[np.ndarray, np.ndarray]:
    t, d = reference.means.shape
    n = d * order
    q = np.zeros((t, n, n))
    q[:, :d, :d] = np.linalg.inv(reference.covariances)
    r = np.zeros((t, n))
    r[:, :d] = reference.means
    return q, r


def _check_condition(matrix: np.ndarray, where: str):
    cond = np.linalg.cond(matrix)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"{where} is ill-conditioned (cond {cond:.3g})")


def _lqt_batch(a, b, q, r, x0, control_weight) -> Tuple[np.ndarray, np.ndarray]:
    t, n = r.shape
    m = b.shape[1]
    sx = np.zeros((t * n, n))
    su = np.zeros((t * n, (t - 1) * m))
    power = np.eye(n)
    for i in range(t):
        sx[i * n:(i + 1) * n] = power
        power = a @ power
    for i in range(1, t):
        su[i * n:(i + 1) * n, :(i - 1) * m] = a @ su[(i - 1) * n:i * n, :(i - 1) * m]
        su[i * n:(i + 1) * n, (i - 1) * m:i * m] = b
    qbar = np.zeros((t * n, t * n))
    for i in range(t):
        qbar[i * n:(i + 1) * n, i * n:(i + 1) * n] = q[i]
    h = su.T @ qbar @ su + control_weight * np.eye((t - 1) * m)
    _check_condition(h, "LQT normal equations")
    u = np.linalg.solve(h, su.T @ qbar @ (r.reshape(-1) - sx @ x0))
    x = (sx @ x0 + su @ u).reshape(t, n)
    return x, u.reshape(t - 1, m)


def _lqt_riccati(a, b, q, r, x0, control_weight) -> Tuple[np.ndarray, np.ndarray]:
    t, n = r.shape
    m = b.shape[1]
    rm = control_weight * np.eye(m)
    gains = np.zeros((t - 1, m, n))
    offsets = np.zeros((t - 1, m))
    p_mat = q[-1]
    p_vec = q[-1] @ r[-1]
    for i in range(t - 2, -1, -1):
        pb = p_mat @ b
        mm = rm + b.T @ pb
        _check_condition(mm, f"Riccati step {i}")
        gains[i] = np.linalg.solve(mm, pb.T @ a)
        offsets[i] = np.linalg.solve(mm, b.T @ p_vec)
        p_vec = q[i] @ r[i] + a.T @ (p_vec - pb @ offsets[i])
        p_mat = q[i] + a.T @ p_mat @ a - a.T @ pb @ gains[i]
        p_mat = (p_mat + p_mat.T) / 2
    x = np.zeros((t, n))
    u = np.zeros((t - 1, m))
    x[0] = x0
    for i in range(t - 1):
        u[i] = offsets[i] - gains[i] @ x[i]
        x[i + 1] = a @ x[i] + b @ u[i]
    return x, u


def lqt_solve(reference: StepReference, order: int, dt: float, control_weight: float,
              x0: Optional[np.ndarray] = None, method: str = "auto") -> LQTResult:
    """Track a stepwise Gaussian reference with an integrator chain of the given order.

    `method` is "batch" (dense least squares), "riccati" (backward recursion)
    or "auto", which picks batch for short horizons.
    """
    if order < 1:
        raise ContractError(f"order must be >= 1, got {order}")
    if control_weight <= 0:
        raise ContractError(f"control_weight must be positive, got {control_weight}")
    t, d = reference.means.shape
    if t < 2:
        raise ContractError("LQT needs at least two steps")
    for cov in (reference.covariances[0], reference.covariances[-1]):
        np.linalg.cholesky(cov)
    a, b = integrator_chain(d, order, dt)
    q, r = _tracking_terms(reference, order)
    if x0 is None:
        x0 = np.concatenate([reference.means[0], np.zeros(d * (order - 1))])
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (d * order,):
        raise ContractError(f"Initial state must have {d * order} entries, got {x0.shape}")
    if method == "auto":
        method = "batch" if t <= BATCH_LIMIT else "riccati"
    if method == "batch":
        x, u = _lqt_batch(a, b, q, r, x0, control_weight)
    elif method == "riccati":
        x, u = _lqt_riccati(a, b, q, r, x0, control_weight)
    else:
        raise ContractError(f"Unknown LQT method {method!r}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise NumericalError("LQT produced non-finite states")
    return LQTResult(states=x, controls=u, dim=d)


def waypoint_steps(n_waypoints: int, steps: int) -> np.ndarray:
    return np.rint(np.linspace(0, steps - 1, n_waypoints)).astype(int)


def waypoint_reference(waypoints: np.ndarray, steps: int, waypoint_var: float,
                       passthrough_var: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Linearly interpolated means with tight covariance at waypoint steps and loose covariance between."""
    idx = waypoint_steps(len(waypoints), steps)
    grid = np.arange(steps)
    means = np.column_stack([np.interp(grid, idx, waypoints[:, j]) for j in range(waypoints.shape[1])])
    var = np.full(steps, passthrough_var)
    var[idx] = waypoint_var
    covs = var[:, None, None] * np.eye(waypoints.shape[1])[None]
    return means, covs, idx


def coordination_data(demos) -> Tuple[np.ndarray, np.ndarray]:
    """Relative left-right poses of every demo step with each step's phase in [0, 1]."""
    frame = TaskFrame.identity(POSE_DIM)
    rel, phase = [], []
    for rollout in demos.rollouts:
        zetas = np.array([s.zeta for s in rollout])
        rel.append(relative_trajectory(zetas[:, 0], zetas[:, 1], frame))
        phase.append(np.linspace(0.0, 1.0, len(rollout)) if len(rollout) > 1 else np.zeros(1))
    return np.vstack(rel), np.concatenate(phase)


def plan_bimanual(waypoints, demos, config: Optional[PlannerConfig] = None, seed: int = 0,
                  method: str = "auto") -> PlanResult:
    config = config or PlannerConfig()
    config.validate()
    wp = np.asarray(waypoints, dtype=float).reshape(-1, 2, POSE_DIM)
    if len(wp) < 2:
        raise ContractError("Need at least two waypoints")
    if not np.all(np.isfinite(wp)):
        raise ContractError("Waypoints must be finite")
    steps = config.points
    if steps < len(wp):
        raise ContractError(f"Cannot expand {len(wp)} waypoints into {steps} points")
    left_mean, left_cov, idx = waypoint_reference(wp[:, 0], steps, config.waypoint_var, config.passthrough_var)
    right_mean, right_cov, _ = waypoint_reference(wp[:, 1], steps, config.waypoint_var, config.passthrough_var)

    coordination = config.n_frames >= 2 and config.coordination_weight > 0
    coord_mean = gmm = None
    left_ref = StepReference(left_mean, left_cov)
    right_ref = StepReference(right_mean, right_cov)
    if coordination:
        data, phase = coordination_data(demos)
        k = min(config.n_components, len(data))
        gmm = fit_gmm_em(data, k, seed=seed, times=phase, tol=config.em_tol, max_iter=config.em_max_iter,
                         reg=config.reg)
        coord = build_reference([gmm], [TaskFrame.identity(POSE_DIM)], steps)
        coord_mean = coord.means
        coord_cov = coord.covariances / config.coordination_weight
        # left = right + relative; right = left - relative
        left_ref = fuse_steps([left_mean, right_mean + coord_mean], [left_cov, coord_cov])
        right_ref = fuse_steps([right_mean, left_mean - coord_mean], [right_cov, coord_cov])

    dim = POSE_DIM * config.order
    arms = []
    for ref, start in ((left_ref, wp[0, 0]), (right_ref, wp[0, 1])):
        x0 = np.concatenate([start, np.zeros(dim - POSE_DIM)])
        arms.append(lqt_solve(ref, config.order, config.dt, config.control_weight, x0=x0, method=method))
    timestamps = np.arange(steps) * config.dt
    traj = BimanualTrajectory(timestamps=timestamps, left=arms[0].states, right=arms[1].states, order=config.order)
    logger.info("Planned %d-point bimanual trajectory from %d waypoints (coordination %s)", steps, len(wp),
                "on" if coordination else "off")
    return PlanResult(trajectory=traj, waypoint_steps=idx, waypoints=wp, coordination_mean=coord_mean,
                      coordination_gmm=gmm)


def smoothness_report(plan: PlanResult) -> Dict[str, float]:
    traj = plan.trajectory
    dt = float(traj.timestamps[1] - traj.timestamps[0])
    report = {}
    for side, states, target in (("left", traj.left, plan.waypoints[:, 0]), ("right", traj.right, plan.waypoints[:, 1])):
        pos = states[:, :3]
        vel = np.diff(pos, axis=0) / dt
        acc = np.diff(pos, n=2, axis=0) / dt ** 2
        report[f"{side}_max_velocity"] = float(np.abs(vel).max())
        report[f"{side}_max_acceleration"] = float(np.abs(acc).max()) if len(acc) else 0.0
        err = np.linalg.norm(states[plan.waypoint_steps, :POSE_DIM] - target, axis=1)
        report[f"{side}_waypoint_error_max"] = float(err.max())
    if plan.coordination_mean is not None:
        report["relative_pose_error_mean"] = relative_pose_error(plan)
    return report


def relative_pose_error(plan: PlanResult, coordination_mean: Optional[np.ndarray] = None) -> float:
    target = plan.coordination_mean if coordination_mean is None else coordination_mean
    traj = plan.trajectory
    rel = traj.left[:, :POSE_DIM] - traj.right[:, :POSE_DIM]
    return float(np.linalg.norm(rel - target, axis=1).mean())


def save_trajectory(traj: BimanualTrajectory, csv_path, header_path=None) -> Path:
    path = Path(csv_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(np.hstack([traj.left_pose, traj.right_pose]), columns=POSE_COLUMNS)
    frame.insert(0, "t", traj.timestamps)
    frame.to_csv(path, index=False)
    header_path = path.with_suffix(".json") if header_path is None else Path(header_path)
    dt = float(traj.timestamps[1] - traj.timestamps[0]) if len(traj) > 1 else 0.0
    write_json({"dt": dt, "order": traj.order, "dim": traj.dim, "points": len(traj),
                "columns": ["t"] + POSE_COLUMNS}, header_path)
    return path


def _parser_line(message: str) -> Optional[int]:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else None


def load_waypoints(filepath) -> np.ndarray:
    """Read a dual-pose path (one row per waypoint, 14 pose columns) into a (W, 2, 7) array."""
    path = Path(filepath)
    if not path.is_file():
        raise FileNotFoundError(f"Waypoint file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise ParseError("waypoint file is empty", line=1) from e
    except pd.errors.ParserError as e:
        raise ParseError(str(e).strip(), line=_parser_line(str(e))) from e
    missing = [c for c in POSE_COLUMNS if c not in frame.columns]
    if missing:
        raise ParseError(f"missing columns {missing}", line=1)
    values = frame[POSE_COLUMNS].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = np.nonzero(~np.all(np.isfinite(values), axis=1))[0]
    if len(bad):
        # header is line 1
        raise ParseError("non-numeric or non-finite pose value", line=int(bad[0]) + 2)
    if len(values) < 2:
        raise ParseError("need at least two waypoints", line=len(values) + 1)
    return values.reshape(-1, 2, POSE_DIM)


def save_waypoints(waypoints, filepath) -> Path:
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(np.asarray(waypoints, dtype=float).reshape(-1, 2 * POSE_DIM), columns=POSE_COLUMNS).to_csv(
        path, index=False)
    return path
