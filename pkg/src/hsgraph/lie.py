"""SO(3)/SE(3) helpers.

Poses are 4x4 homogeneous matrices. Tangent vectors of a pose are ordered
``[rotation(3), translation(3)]`` and applied with the decoupled retraction
``R <- R Exp(dtheta)``, ``t <- t + dt``. Most functions accept a leading
batch dimension.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        return Rotation.from_rotvec(phi).as_matrix()
    return Rotation.from_rotvec(phi.reshape(-1, 3)).as_matrix().reshape(phi.shape[:-1] + (3, 3))


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    Rs = R.reshape(-1, 3, 3)
    # atan2 form is accurate near identity; angles near pi go through scipy
    w = 0.5 * np.stack([Rs[:, 2, 1] - Rs[:, 1, 2], Rs[:, 0, 2] - Rs[:, 2, 0], Rs[:, 1, 0] - Rs[:, 0, 1]], axis=1)
    s = np.sqrt(np.einsum("ni,ni->n", w, w))
    c = 0.5 * (Rs[:, 0, 0] + Rs[:, 1, 1] + Rs[:, 2, 2] - 1.0)
    theta = np.arctan2(s, c)
    small = s < 1e-8
    scale = np.where(small, 1.0 + s**2 / 6.0, theta / np.where(small, 1.0, s))
    out = scale[:, None] * w
    far = (theta > 3.0) | (small & (c < 0))
    if np.any(far):
        out[far] = Rotation.from_matrix(Rs[far]).as_rotvec()
    return out[0] if R.ndim == 2 else out.reshape(R.shape[:-2] + (3,))


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3), batched."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    W = skew(phi)
    W2 = W @ W
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    coef = 1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe))
    coef = np.where(small, 1.0 / 12.0 + theta**2 / 720.0, coef)
    return np.eye(3) + 0.5 * W + coef[..., None, None] * W2


def make_pose(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def translation(t) -> np.ndarray:
    return make_pose(t=np.asarray(t, dtype=float))


def inverse(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    R = T[..., :3, :3]
    t = T[..., :3, 3]
    Rt = np.swapaxes(R, -1, -2)
    out = np.zeros_like(T)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, t)
    out[..., 3, 3] = 1.0
    return out


def relative(Ta: np.ndarray, Tb: np.ndarray) -> np.ndarray:
    """``Ta^-1 Tb``."""
    return inverse(Ta) @ Tb


def is_valid_pose(T, tol: float = ORTHO_TOL) -> bool:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        return False
    R = T[:3, :3]
    if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=tol, rtol=0.0):
        return False
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(R) - 1.0) <= tol


def retract(T: np.ndarray, delta: np.ndarray) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    out = np.array(T, dtype=float, copy=True)
    out[..., :3, :3] = T[..., :3, :3] @ so3_exp(delta[..., :3])
    out[..., :3, 3] = T[..., :3, 3] + delta[..., 3:]
    return out


def exp_pose(xi: np.ndarray) -> np.ndarray:
    """Pose from a decoupled tangent ``[rotvec, translation]``."""
    xi = np.asarray(xi, dtype=float)
    return make_pose(so3_exp(xi[:3]), xi[3:])


def transform_points(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    return pts @ T[:3, :3].T + T[:3, 3]


def transform_plane(T: np.ndarray, normal, distance):
    """Express plane ``n.x = d`` given in the frame of ``T`` in the parent frame."""
    n = T[:3, :3] @ np.asarray(normal, dtype=float)
    return n, float(distance + n @ T[:3, 3])


def pose_to_vec7(T: np.ndarray) -> np.ndarray:
    q = Rotation.from_matrix(T[:3, :3]).as_quat()
    if q[3] < 0:
        q = -q
    return np.concatenate([T[:3, 3], q])


def vec7_to_pose(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return make_pose(Rotation.from_quat(v[3:7]).as_matrix(), v[:3])


def yaw_pose(x: float, y: float, z: float, yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return make_pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), [x, y, z])


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def orthonormalize_pose(T: np.ndarray) -> np.ndarray:
    out = np.array(T, dtype=float, copy=True)
    out[:3, :3] = orthonormalize(out[:3, :3])
    out[3] = [0.0, 0.0, 0.0, 1.0]
    return out


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product of ``(..., 3)`` arrays; cheaper than ``np.cross`` on small batches."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def tangent_basis(n: np.ndarray) -> np.ndarray:
    """Orthonormal 3x2 basis of the plane perpendicular to unit vector(s) ``n``."""
    n = np.asarray(n, dtype=float)
    single = n.ndim == 1
    n = n.reshape(-1, 3)
    # helper axis: the world axis least aligned with n
    idx = np.argmin(np.abs(n), axis=1)
    helper = np.eye(3)[idx]
    b1 = cross(n, helper)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = cross(n, b1)
    B = np.stack([b1, b2], axis=-1)
    return B[0] if single else B
