"""Trajectory and map quality metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class StampMismatch(ValueError):
    pass


class EmptyCloud(ValueError):
    pass


class BinOverlap(ValueError):
    pass


def align_rigid(est: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation minimizing ``sum |R est + t - ref|^2`` (Horn/Umeyama, no scale)."""
    mu_e, mu_r = est.mean(axis=0), ref.mean(axis=0)
    C = (ref - mu_r).T @ (est - mu_e)
    U, _, Vt = np.linalg.svd(C)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ S @ Vt
    return R, mu_r - R @ mu_e


def ate_rmse(estimated, truth) -> float:
    """RMSE of translation error after rigid alignment.

    Inputs are ``{stamp: 4x4 pose}`` dicts (matched on stamps) or equal-length
    position/pose arrays.
    """
    if isinstance(estimated, dict):
        common = sorted(set(estimated) & set(truth))
        if len(common) < 2:
            raise StampMismatch("fewer than two common stamps")
        est = np.array([np.asarray(estimated[s])[:3, 3] if np.ndim(estimated[s]) == 2 else estimated[s] for s in common])
        ref = np.array([np.asarray(truth[s])[:3, 3] if np.ndim(truth[s]) == 2 else truth[s] for s in common])
    else:
        est, ref = _positions(estimated), _positions(truth)
        if len(est) != len(ref) or len(est) < 2:
            raise StampMismatch("trajectories must pair up with at least two poses")
    R, t = align_rigid(est, ref)
    err = est @ R.T + t - ref
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def _positions(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 3:
        return a[:, :3, 3]
    return a.reshape(-1, 3)


def map_rmse(estimated: np.ndarray, reference: np.ndarray, max_corr: float = 1.0) -> tuple[float, int]:
    """Nearest-neighbour RMSE from ``estimated`` to ``reference``.

    Returns ``(rmse, n_excluded)``; correspondences beyond ``max_corr`` are
    left out of the RMSE and counted.
    """
    est = np.asarray(estimated, dtype=float).reshape(-1, 3)
    ref = np.asarray(reference, dtype=float).reshape(-1, 3)
    if len(est) == 0 or len(ref) == 0:
        raise EmptyCloud("map RMSE needs two non-empty clouds")
    d, _ = cKDTree(ref).query(est)
    ok = d <= max_corr
    n_out = int((~ok).sum())
    if not np.any(ok):
        return float("inf"), n_out
    return float(np.sqrt(np.mean(d[ok] ** 2))), n_out


def mean_map_entropy(cloud: np.ndarray, radius: float = 0.3, min_neighbors: int = 5, k_min: int = 50) -> tuple[float, int]:
    """Mean differential entropy of local neighbourhood covariances.

    Returns ``(mme, n_skipped)``: points with too few neighbours or a singular
    covariance are skipped and counted.
    """
    P = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise EmptyCloud("empty cloud")
    if len(P) < k_min:
        raise EmptyCloud(f"cloud has {len(P)} points, need {k_min}")
    tree = cKDTree(P)
    hoods = tree.query_ball_point(P, radius)
    const = (2 * np.pi * np.e) ** 3
    vals = []
    skipped = 0
    for nb in hoods:
        if len(nb) < min_neighbors:
            skipped += 1
            continue
        Q = P[nb]
        C = np.cov(Q, rowvar=False)
        det = np.linalg.det(C)
        if not np.isfinite(det) or det <= 0:
            skipped += 1
            continue
        vals.append(0.5 * np.log(const * det))
    if not vals:
        return float("nan"), skipped
    return float(np.mean(vals)), skipped


def z_histogram_iou(z_values, gt_fractions, bins) -> tuple[float, dict]:
    """Overlap between per-floor map height mass and ground-truth time fractions.

    ``bins`` are half-open ``[z_min, z_max)`` intervals, one per floor; mass
    outside every bin goes to a discard bucket reported alongside.
    """
    gt = np.asarray(gt_fractions, dtype=float)
    if abs(gt.sum() - 1.0) > 1e-6:
        raise ValueError("ground-truth fractions must sum to 1")
    bins = [tuple(map(float, b)) for b in bins]
    if len(bins) != len(gt):
        raise ValueError("one bin per floor is required")
    order = sorted(bins)
    for (a0, a1), (b0, b1) in zip(order[:-1], order[1:]):
        if b0 < a1:
            raise BinOverlap(f"bins [{a0}, {a1}) and [{b0}, {b1}) overlap")
    z = np.asarray(z_values, dtype=float).ravel()
    if len(z) == 0:
        est = np.zeros(len(gt))
    else:
        est = np.array([np.mean((z >= lo) & (z < hi)) for lo, hi in bins])
    discard = float(1.0 - est.sum()) if len(z) else 0.0
    num = np.minimum(est, gt).sum()
    den = np.maximum(est, gt).sum()
    iou = float(num / den) if den > 0 else 1.0
    return iou, {"estimated": est.tolist(), "ground_truth": gt.tolist(), "discard": discard}


@dataclass
class MetricsBundle:
    ate_rmse: float
    map_rmse: float
    mme: float
    z_iou: float
    timing_ms: dict = field(default_factory=dict)
    timing_counts: dict = field(default_factory=dict)
    false_cross_floor_closures: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.z_iou <= 1.0) and not np.isnan(self.z_iou):
            raise ValueError("z_iou must lie in [0, 1]")
        if self.false_cross_floor_closures < 0 or any(v < 0 for v in self.timing_counts.values()):
            raise ValueError("counts must be non-negative")

    def to_json(self) -> str:
        """JSON document; NaN (metric not computable) is written as null."""
        return json.dumps(_finite(asdict(self)), sort_keys=True, indent=2, allow_nan=False)


def _finite(x):
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x
