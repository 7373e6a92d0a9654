"""
Graph abstraction of a top-down RGB-D observation.

Segmentation -> contour centre -> eight ray/boundary points -> 9-node object
subgraph (star + ring) -> heterogeneous graph with two manipulator nodes.
Pixel coordinates are (x, y) = (column, row).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from src.errors import ContractError, EmptySegmentation, ParseError

logger = logging.getLogger(__name__)

N_OBJECT_NODES = 9
N_BOUNDARY = 8
N_MANIPULATORS = 2
ATTR_NAMES = ("x", "y", "depth")

STAR_EDGES = tuple((0, i) for i in range(1, N_BOUNDARY + 1))
RING_EDGES = tuple((i, i % N_BOUNDARY + 1) for i in range(1, N_BOUNDARY + 1))
OBJECT_EDGES = STAR_EDGES + RING_EDGES
MANIPULATOR_EDGES = tuple((m, o) for m in range(N_MANIPULATORS) for o in range(N_OBJECT_NODES))

E_MO = "E_mo"
E_OO = "E_oo"


@dataclass(frozen=True)
class ColorBounds:
    lower: Tuple[int, int, int]
    upper: Tuple[int, int, int]


DOUGH_BOUNDS = ColorBounds(lower=(210, 180, 130), upper=(250, 220, 170))


@dataclass(frozen=True)
class PixelFrame:
    """Pixel <-> board transform for a square top-down camera covering the board."""

    board_size: float
    resolution: int

    @property
    def pixel_size(self) -> float:
        return self.board_size / self.resolution

    def to_board(self, px: float, py: float) -> Tuple[float, float]:
        s = self.pixel_size
        return -self.board_size / 2 + (px + 0.5) * s, -self.board_size / 2 + (py + 0.5) * s

    def to_pixel(self, x: float, y: float) -> Tuple[float, float]:
        s = self.pixel_size
        return (x + self.board_size / 2) / s - 0.5, (y + self.board_size / 2) / s - 0.5


@dataclass
class RayPoints:
    points: np.ndarray
    clipped: List[bool]


@dataclass
class ObjectSubgraph:
    node_attrs: np.ndarray
    pixels: Optional[np.ndarray] = None
    edges: Tuple[Tuple[int, int], ...] = OBJECT_EDGES

    def __post_init__(self):
        self.node_attrs = np.asarray(self.node_attrs, dtype=float)
        if self.node_attrs.ndim != 2 or self.node_attrs.shape[0] != N_OBJECT_NODES:
            raise ContractError(f"Object subgraph needs {N_OBJECT_NODES} nodes, got attrs of shape {self.node_attrs.shape}")
        if len(self.edges) != len(OBJECT_EDGES):
            raise ContractError(f"Object subgraph needs {len(OBJECT_EDGES)} edges, got {len(self.edges)}")

    @property
    def attr_dim(self) -> int:
        return self.node_attrs.shape[1]

    def with_attrs(self, node_attrs: np.ndarray) -> "ObjectSubgraph":
        return ObjectSubgraph(node_attrs=np.array(node_attrs, dtype=float), edges=self.edges)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.node_attrs)))

    def to_dict(self) -> Dict[str, Any]:
        return {"nodes": [dict(zip(ATTR_NAMES, map(float, row))) for row in self.node_attrs]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ObjectSubgraph":
        try:
            nodes = data["nodes"]
            attrs = [[float(node[name]) for name in ATTR_NAMES] for node in nodes]
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"malformed subgraph: {e}") from e
        if len(attrs) != N_OBJECT_NODES:
            raise ParseError(f"subgraph must have {N_OBJECT_NODES} nodes, got {len(attrs)}")
        return cls(node_attrs=np.array(attrs))


@dataclass
class HeteroGraph:
    object: ObjectSubgraph
    manipulator_attrs: np.ndarray
    e_mo: Tuple[Tuple[int, int], ...] = MANIPULATOR_EDGES
    node_types: Tuple[str, ...] = field(default=("manipulator",) * N_MANIPULATORS + ("object",) * N_OBJECT_NODES)

    @property
    def e_oo(self) -> Tuple[Tuple[int, int], ...]:
        return self.object.edges

    def edges(self) -> List[Tuple[str, Tuple[int, int]]]:
        """All edges with global node indices (manipulators first, then object nodes)."""
        off = N_MANIPULATORS
        typed = [(E_MO, (m, off + o)) for m, o in self.e_mo]
        typed += [(E_OO, (off + a, off + b)) for a, b in self.e_oo]
        return typed

    def to_dict(self) -> Dict[str, Any]:
        nodes = [{"type": "manipulator", "attrs": [float(v) for v in row]} for row in self.manipulator_attrs]
        nodes += [{"type": "object", "attrs": [float(v) for v in row]} for row in self.object.node_attrs]
        edges = [{"type": t, "endpoints": list(ends)} for t, ends in self.edges()]
        return {"nodes": nodes, "edges": edges}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HeteroGraph":
        try:
            manip = [n["attrs"] for n in data["nodes"] if n["type"] == "manipulator"]
            obj = [n["attrs"] for n in data["nodes"] if n["type"] == "object"]
        except (KeyError, TypeError) as e:
            raise ParseError(f"malformed graph: {e}") from e
        return build_hetero_graph(ObjectSubgraph(node_attrs=np.array(obj, dtype=float)), np.array(manip, dtype=float))


def segment(obs, threshold: ColorBounds = DOUGH_BOUNDS) -> np.ndarray:
    rgb = np.asarray(obs.rgb)
    lower = np.asarray(threshold.lower)
    upper = np.asarray(threshold.upper)
    raw = np.all((rgb >= lower) & (rgb <= upper), axis=-1)
    labels, count = ndimage.label(raw)
    if count == 0:
        raise EmptySegmentation("No pixel falls inside the dough color bounds")
    sizes = ndimage.sum_labels(raw, labels, index=np.arange(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def contour_center(mask: np.ndarray) -> Tuple[float, float]:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("Cannot take the centre of an empty mask")
    rows, cols = np.nonzero(mask)
    return float(cols.mean()), float(rows.mean())


def ray_boundary_points(mask: np.ndarray, center: Tuple[float, float], step: float = 0.25) -> RayPoints:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    cx, cy = center
    ci, cj = int(round(cy)), int(round(cx))
    if not (0 <= ci < h and 0 <= cj < w and mask[ci, cj]):
        raise ContractError(f"Ray centre ({cx:.1f}, {cy:.1f}) lies outside the mask")
    ts = np.arange(0.0, math.hypot(h, w) + step, step)
    points, clipped = [], []
    for k in range(N_BOUNDARY):
        theta = k * math.pi / 4
        xs = np.rint(cx + ts * math.cos(theta)).astype(int)
        ys = np.rint(cy + ts * math.sin(theta)).astype(int)
        inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        n_in = int(np.argmin(inside)) if not inside.all() else len(ts)
        hits = np.nonzero(mask[ys[:n_in], xs[:n_in]])[0]
        last = int(hits[-1])
        hit_border = bool(mask[ys[n_in - 1], xs[n_in - 1]])
        if hit_border:
            logger.warning("Ray at %d deg leaves the image inside the mask; point clipped to the border", k * 45)
        points.append((float(xs[last]), float(ys[last])))
        clipped.append(hit_border)
    return RayPoints(points=np.array(points), clipped=clipped)


def sample_depth(depth: np.ndarray, px: float, py: float) -> float:
    h, w = depth.shape
    i, j = int(np.clip(round(py), 0, h - 1)), int(np.clip(round(px), 0, w - 1))
    window = depth[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
    return float(np.median(window))


def build_object_subgraph(center: Tuple[float, float], points: np.ndarray, depth: np.ndarray,
                          frame: PixelFrame) -> ObjectSubgraph:
    points = np.asarray(points, dtype=float)
    if points.shape != (N_BOUNDARY, 2):
        raise ContractError(f"Expected {N_BOUNDARY} boundary points, got shape {points.shape}")
    pixels = np.vstack([np.asarray(center, dtype=float)[None, :], points])
    attrs = []
    for px, py in pixels:
        x, y = frame.to_board(px, py)
        attrs.append((x, y, sample_depth(depth, px, py)))
    return ObjectSubgraph(node_attrs=np.array(attrs), pixels=pixels)


def build_hetero_graph(sub: ObjectSubgraph, ee_poses: np.ndarray) -> HeteroGraph:
    poses = np.asarray(ee_poses, dtype=float)
    if poses.size % N_MANIPULATORS != 0:
        raise ContractError("End-effector poses must split into two equal parts")
    poses = poses.reshape(N_MANIPULATORS, -1)
    if not np.all(np.isfinite(poses)):
        raise ContractError("End-effector poses must be finite")
    if not sub.is_finite():
        raise ContractError("Object subgraph attributes must be finite")
    return HeteroGraph(object=sub, manipulator_attrs=poses.copy())


def abstract_observation(obs, frame: PixelFrame, threshold: ColorBounds = DOUGH_BOUNDS) -> ObjectSubgraph:
    mask = segment(obs, threshold)
    center = contour_center(mask)
    ci, cj = int(round(center[1])), int(round(center[0]))
    if not mask[ci, cj]:
        # non-convex silhouette: cast rays from the nearest dough pixel instead
        _, (ri, rj) = ndimage.distance_transform_edt(~mask, return_indices=True)
        center = (float(rj[ci, cj]), float(ri[ci, cj]))
    rays = ray_boundary_points(mask, center)
    return build_object_subgraph(center, rays.points, obs.depth, frame)
