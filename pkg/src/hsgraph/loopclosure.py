"""Loop-closure candidates, point-to-point ICP and LOOP edge commits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import lie
from .graph import EdgeKind, SituationalGraph
from .metrics import align_rigid


class InsufficientPoints(ValueError):
    pass


@dataclass
class LoopConfig:
    search_radius: float = 5.0
    skip_recent: int = 15
    fitness_max: float = 0.05
    min_inlier: float = 0.6
    max_iterations: int = 30
    max_corr: float = 1.0
    min_points: int = 50
    # nearest candidates registered per query until one is accepted
    max_tries: int = 3
    info_min: float = 10.0
    info_max: float = 1e4
    gate: str = "floor"
    # accept every registered candidate regardless of fitness (collapse baseline)
    force: bool = False

    def __post_init__(self):
        if self.gate not in ("floor", "off"):
            raise ValueError("gate must be 'floor' or 'off'")
        if self.search_radius <= 0 or self.max_corr <= 0 or self.fitness_max <= 0:
            raise ValueError("radii and fitness threshold must be positive")
        if not 0 < self.min_inlier <= 1:
            raise ValueError("min_inlier must lie in (0, 1]")
        if self.skip_recent < 0 or self.max_iterations < 1 or self.max_tries < 1:
            raise ValueError("skip_recent >= 0, max_iterations >= 1 and max_tries >= 1 required")


@dataclass
class Registration:
    transform: np.ndarray
    fitness: float
    inlier_fraction: float
    iterations: int


@dataclass
class LoopCandidate:
    query: int
    match: int
    registration: Registration | None = None

    def accepted(self, config: LoopConfig) -> bool:
        r = self.registration
        if r is not None and config.force:
            return True
        return r is not None and r.fitness < config.fitness_max and r.inlier_fraction >= config.min_inlier


@dataclass
class Proxy:
    """A keyframe removed by marginalization that still serves as a loop candidate.

    Its pose is ``anchor_pose @ offset`` where ``anchor`` is a live keyframe;
    a LOOP edge to the proxy is committed on the anchor instead.
    """

    pose: np.ndarray
    floor_id: int | None
    points: np.ndarray
    anchor: int
    offset: np.ndarray
    is_stair: bool = False

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]


def _node(graph: SituationalGraph, k: int, proxies: dict | None):
    node = graph.keyframes.get(k)
    return node if node is not None else proxies[k]


def find_candidates(
    graph: SituationalGraph, kf: int, config: LoopConfig | None = None, gate_open: bool = True, proxies: dict | None = None
) -> list[int]:
    """Earlier keyframes near ``kf``, nearest first.

    With the floor gate, candidates share the query's floor label and are not
    stair keyframes; nothing is returned while ``gate_open`` is False or the
    query is unlabelled. The ``off`` gate drops both filters. ``proxies``
    maps marginalized keyframe ids to :class:`Proxy` records.
    """
    config = config or LoopConfig()
    q = graph.keyframes[kf]
    gated = config.gate == "floor"
    if gated and (not gate_open or q.floor_id is None or q.is_stair):
        return []
    earlier = sorted(k for k in [*graph.keyframes, *(proxies or {})] if k < kf)
    pool = earlier[: max(0, len(earlier) - config.skip_recent)]
    out = []
    for k in pool:
        c = _node(graph, k, proxies)
        if gated and (c.floor_id != q.floor_id or c.is_stair):
            continue
        dist = float(np.linalg.norm(c.position - q.position))
        if dist <= config.search_radius:
            out.append((dist, k))
    return [k for _, k in sorted(out)]


def register(points_a: np.ndarray, points_b: np.ndarray, init: np.ndarray | None = None, config: LoopConfig | None = None) -> Registration:
    """Estimate ``T_ab`` with ``points_a ~ T_ab * points_b`` by point-to-point ICP.

    Correspondences beyond ``min(max_corr, 3 * median)`` are rejected at
    every iteration. Fitness is the mean squared distance over the final
    inliers; the inlier fraction is relative to ``points_b``.
    """
    config = config or LoopConfig()
    A = np.asarray(points_a, dtype=float).reshape(-1, 3)
    B = np.asarray(points_b, dtype=float).reshape(-1, 3)
    if len(A) < config.min_points or len(B) < config.min_points:
        raise InsufficientPoints(f"need {config.min_points} points per cloud, got {len(A)} and {len(B)}")
    T = np.eye(4) if init is None else np.array(init, dtype=float)
    tree = cKDTree(A)
    it = 0
    for it in range(1, config.max_iterations + 1):
        Bt = lie.transform_points(T, B)
        d, idx = tree.query(Bt)
        cap = min(config.max_corr, max(3.0 * float(np.median(d)), 1e-6))
        ok = d <= cap
        if np.count_nonzero(ok) < 3:
            break
        R, t = align_rigid(Bt[ok], A[idx[ok]])
        step = lie.make_pose(R, t)
        T = lie.orthonormalize_pose(step @ T)
        if np.linalg.norm(t) < 1e-10 and np.linalg.norm(R - np.eye(3)) < 1e-10:
            break
    d, _ = tree.query(lie.transform_points(T, B))
    cap = min(config.max_corr, max(3.0 * float(np.median(d)), 1e-6))
    ok = d <= cap
    fitness = float(np.mean(d[ok] ** 2)) if np.any(ok) else float("inf")
    return Registration(T, fitness, float(np.mean(ok)), it)


def loop_information(fitness: float, config: LoopConfig | None = None) -> np.ndarray:
    config = config or LoopConfig()
    s = config.info_max if fitness <= 0 else float(np.clip(1.0 / fitness, config.info_min, config.info_max))
    return s * np.eye(6)


def seed_transform(graph: SituationalGraph, a: int, b: int, proxies: dict | None = None) -> np.ndarray:
    """Relative estimate ``T_a^-1 T_b`` with the vertical offset dropped."""
    T = lie.relative(_node(graph, a, proxies).pose, _node(graph, b, proxies).pose)
    T[2, 3] = 0.0
    return T


def try_closure(
    graph: SituationalGraph, kf: int, config: LoopConfig | None = None, gate_open: bool = True, proxies: dict | None = None
) -> LoopCandidate | None:
    """Register the nearest candidates against ``kf`` until one is accepted.

    Returns the accepted candidate, else the last one tried, else None.
    """
    config = config or LoopConfig()
    cand = None
    for match in find_candidates(graph, kf, config, gate_open, proxies)[: config.max_tries]:
        cand = LoopCandidate(kf, match)
        try:
            cand.registration = register(
                _node(graph, match, proxies).points, graph.keyframes[kf].points, seed_transform(graph, match, kf, proxies), config
            )
        except InsufficientPoints:
            cand.registration = None
        if cand.accepted(config):
            break
    return cand


def commit_closure(graph: SituationalGraph, cand: LoopCandidate, config: LoopConfig | None = None, proxies: dict | None = None) -> int:
    """Add the LOOP edge for an accepted candidate and return its id.

    A proxy match is re-expressed on its live anchor keyframe.
    """
    config = config or LoopConfig()
    if not cand.accepted(config):
        raise ValueError("candidate was not accepted")
    r = cand.registration
    info = loop_information(r.fitness, config)
    if cand.match not in graph.keyframes:
        p = proxies[cand.match]
        return graph.add_edge(EdgeKind.LOOP, (p.anchor, cand.query), p.offset @ r.transform, info)
    return graph.add_edge(EdgeKind.LOOP, (cand.match, cand.query), r.transform, info)
