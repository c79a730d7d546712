"""Glue between run outputs, simulator ground truth and the metrics bundle."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lie
from .metrics import MetricsBundle, StampMismatch, ate_rmse, map_rmse, mean_map_entropy, z_histogram_iou
from .simulator import World, read_world


@dataclass
class GroundTruth:
    world: World
    stamps: np.ndarray
    poses: np.ndarray
    floors: np.ndarray

    @classmethod
    def from_frames(cls, world: World, frames) -> "GroundTruth":
        return cls(
            world,
            np.array([f.stamp for f in frames]),
            np.array([f.true_pose for f in frames]).reshape(-1, 4, 4),
            np.array([f.true_floor for f in frames], dtype=int),
        )

    @classmethod
    def load(cls, dataset) -> "GroundTruth":
        p = Path(dataset)
        world, raw = read_world(p / "world.json" if p.is_dir() else p)
        traj = raw.get("trajectory") or []
        return cls(
            world,
            np.array([t["stamp"] for t in traj], dtype=float),
            np.array([lie.orthonormalize_pose(np.asarray(t["pose"], float)) for t in traj]).reshape(-1, 4, 4),
            np.array([t["floor"] for t in traj], dtype=int),
        )

    def trajectory(self) -> dict[float, np.ndarray]:
        return dict(zip(self.stamps.tolist(), self.poses))

    def floor_of(self) -> dict[float, int]:
        return dict(zip(self.stamps.tolist(), self.floors.tolist()))

    def time_fractions(self, stamps=None) -> np.ndarray:
        """Share of ground-truth time per floor bin, sampled at ``stamps`` (default: every frame)."""
        if stamps is None:
            z = self.poses[:, 2, 3]
        else:
            traj = self.trajectory()
            z = np.array([traj[s][2, 3] for s in stamps if s in traj])
        counts = np.array([np.count_nonzero((z >= lo) & (z < hi)) for lo, hi in self.world.floor_bins()], float)
        if counts.sum() == 0:
            raise StampMismatch("no ground-truth pose inside the floor bins at the given stamps")
        return counts / counts.sum()


def evaluate(
    trajectory: dict,
    truth: GroundTruth,
    cloud: np.ndarray | None = None,
    loops=(),
    timing_ms: dict | None = None,
    timing_counts: dict | None = None,
    mme_radius: float = 0.3,
) -> MetricsBundle:
    """Metrics for one run.

    ``loops`` holds ``(query_stamp, match_stamp)`` pairs of committed closures.
    z-IoU bins the estimated keyframe heights against the true heights at the
    same stamps; the map-point variant is kept under ``extra`` since wall
    area, not time, sets its floor shares.
    """
    bins = truth.world.floor_bins()
    gt = truth.time_fractions(list(trajectory))
    z = np.array([T[2, 3] for T in trajectory.values()])
    iou, detail = z_histogram_iou(z, gt, bins)
    extra = {"z_histogram": detail, "keyframes": len(trajectory)}
    map_err = mme = float("nan")
    if cloud is not None and len(cloud):
        map_err, extra["map_excluded"] = map_rmse(cloud, truth.world.reference_cloud())
        mme, extra["mme_skipped"] = mean_map_entropy(cloud, mme_radius)
        extra["z_iou_points"] = z_histogram_iou(cloud[:, 2], gt, bins)[0]
    floor = truth.floor_of()
    false_loops = sum(floor.get(q) != floor.get(m) for q, m in loops)
    return MetricsBundle(
        ate_rmse(trajectory, truth.trajectory()),
        float(map_err),
        float(mme),
        float(iou),
        dict(timing_ms or {}),
        dict(timing_counts or {}),
        int(false_loops),
        extra,
    )


def loop_pairs(events) -> list[tuple[float, float]]:
    return [(e.stamp, e.data["match_stamp"]) for e in events if e.kind == "LOOP_CLOSURE"]


def evaluate_run(result, truth: GroundTruth, with_map: bool = True, mme_radius: float = 0.3) -> MetricsBundle:
    """Metrics for an in-memory :class:`~hsgraph.pipeline.RunResult`."""
    ms, counts = result.pipeline.timing()
    cloud = result.pipeline.map_cloud() if with_map else None
    return evaluate(result.trajectory(), truth, cloud, loop_pairs(result.events), ms, counts, mme_radius)
