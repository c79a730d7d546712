"""Residuals and analytic Jacobians for every edge kind.

Tangent parameterizations
-------------------------
* keyframe pose: 6 = ``[dtheta, dt]`` (see :mod:`hsgraph.lie`)
* wall plane: 3 = 2-dim normal step in ``tangent_basis(n)`` + 1-dim distance,
  retracted as ``n <- normalize(n + B dn)``, ``d <- d + dd``
* room / floor centers: 3, additive

Every ``*_batch`` kernel works on a leading edge axis and returns
``(r, jacobians)``; the scalar functions wrap them and return a
:class:`Residual`. Plane residuals are evaluated through the closest-point map
``tau(n, d) = d * n``, which is unchanged by ``(n, d) -> (-n, -d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lie


class DegeneratePlane(ValueError):
    pass


class NotOpposing(ValueError):
    pass


PARALLEL_MIN = 0.5


@dataclass
class Residual:
    value: np.ndarray
    jacobians: list[np.ndarray] = field(default_factory=list)


def tau(n, d) -> np.ndarray:
    return np.asarray(d, dtype=float)[..., None] * np.asarray(n, dtype=float)


def retract_plane(n: np.ndarray, d: float, delta: np.ndarray):
    B = lie.tangent_basis(n)
    m = n + B @ delta[:2]
    return m / np.linalg.norm(m), float(d + delta[2])


# -- relative pose ------------------------------------------------------------


def odom_batch(Ta: np.ndarray, Tb: np.ndarray, Z: np.ndarray, jac: bool = True):
    Ra, ta = Ta[:, :3, :3], Ta[:, :3, 3]
    Rb, tb = Tb[:, :3, :3], Tb[:, :3, 3]
    Zr, zt = Z[:, :3, :3], Z[:, :3, 3]
    ZrT = np.swapaxes(Zr, 1, 2)
    RaT = np.swapaxes(Ra, 1, 2)
    E = ZrT @ RaT @ Rb
    phi = lie.so3_log(E)
    u = np.einsum("nij,nj->ni", RaT, tb - ta)
    r_t = np.einsum("nij,nj->ni", ZrT, u - zt)
    r = np.concatenate([phi, r_t], axis=1)
    if not jac:
        return r, []

    Jinv = lie.right_jacobian_inv(phi)
    ZRa = ZrT @ RaT
    n = len(Ta)
    Ja = np.zeros((n, 6, 6))
    Jb = np.zeros((n, 6, 6))
    Ja[:, :3, :3] = -Jinv @ np.swapaxes(E, 1, 2) @ ZrT
    Ja[:, 3:, :3] = ZrT @ lie.skew(u)
    Ja[:, 3:, 3:] = -ZRa
    Jb[:, :3, :3] = Jinv
    Jb[:, 3:, 3:] = ZRa
    return r, [Ja, Jb]


def odom_residual(Ta, Tb, Z) -> Residual:
    """Relative-pose residual ``log(Z^-1 Ta^-1 Tb)`` (rotation log + translation).

    Serves both odometry and loop-closure edges.
    """
    r, J = odom_batch(np.asarray(Ta)[None], np.asarray(Tb)[None], np.asarray(Z)[None])
    return Residual(r[0], [J[0][0], J[1][0]])


# -- keyframe to plane --------------------------------------------------------


def kf_plane_batch(T: np.ndarray, n: np.ndarray, d: np.ndarray, n_obs: np.ndarray, d_obs: np.ndarray, jac: bool = True, basis=None):
    R, t = T[:, :3, :3], T[:, :3, 3]
    RT = np.swapaxes(R, 1, 2)
    n_loc = np.einsum("nij,nj->ni", RT, n)
    d_loc = d - np.einsum("ni,ni->n", n, t)
    degenerate = (np.abs(d_loc) < 1e-9) & (np.abs(d_obs) < 1e-9) & (np.einsum("ni,ni->n", n_loc, n_obs) < 0)
    if np.any(degenerate):
        raise DegeneratePlane("closest-point parameterization is not injective at the origin")
    r = d_loc[:, None] * n_loc - d_obs[:, None] * n_obs
    if not jac:
        return r, []

    B = lie.tangent_basis(n).reshape(-1, 3, 2) if basis is None else basis
    m = len(T)
    JT = np.zeros((m, 3, 6))
    JT[:, :, :3] = d_loc[:, None, None] * lie.skew(n_loc)
    JT[:, :, 3:] = -n_loc[:, :, None] * n[:, None, :]
    JP = np.zeros((m, 3, 3))
    tB = np.einsum("ni,nij->nj", t, B)
    JP[:, :, :2] = d_loc[:, None, None] * (RT @ B) - n_loc[:, :, None] * tB[:, None, :]
    JP[:, :, 2] = n_loc
    return r, [JT, JP]


def kf_plane_residual(T, plane_map, plane_obs) -> Residual:
    """Map plane seen from keyframe ``T`` against its observation in that frame."""
    (n, d), (no, do) = plane_map, plane_obs
    r, J = kf_plane_batch(
        np.asarray(T, dtype=float)[None],
        np.asarray(n, dtype=float)[None],
        np.array([d], dtype=float),
        np.asarray(no, dtype=float)[None],
        np.array([do], dtype=float),
    )
    return Residual(r[0], [J[0][0], J[1][0]])


# -- rooms and floors ---------------------------------------------------------


def _check_pairs(normals: np.ndarray, pairs) -> None:
    for a, b in pairs:
        dots = np.abs(np.einsum("ni,ni->n", normals[:, a], normals[:, b]))
        if np.any(dots < PARALLEL_MIN):
            raise NotOpposing("wall pair is not parallel")


def _pair_center(n: np.ndarray, d: np.ndarray, a: int, b: int, axis: int, jac: bool = True, basis=None):
    """Midpoint coordinate of walls a, b along ``axis`` plus wall Jacobian rows."""
    c = 0.5 * (d[:, a] * n[:, a, axis] + d[:, b] * n[:, b, axis])
    rows = []
    if not jac:
        return c, rows
    for w in (a, b):
        B = lie.tangent_basis(n[:, w]).reshape(-1, 3, 2) if basis is None else basis[:, w]
        row = np.zeros((len(n), 3))
        row[:, :2] = 0.5 * d[:, w, None] * B[:, axis, :]
        row[:, 2] = 0.5 * n[:, w, axis]
        rows.append(row)
    return c, rows


def center_batch(center: np.ndarray, n: np.ndarray, d: np.ndarray, height: np.ndarray, jac: bool = True, basis=None):
    """Four-wall construction shared by rooms and floors.

    Walls are ordered ``[x_a, x_b, y_a, y_b]``; returns ``r = center - c_hat``
    and Jacobians ``[J_center, J_xa, J_xb, J_ya, J_yb]``.
    """
    _check_pairs(n, [(0, 1), (2, 3)])
    m = len(center)
    cx, rx = _pair_center(n, d, 0, 1, 0, jac, basis)
    cy, ry = _pair_center(n, d, 2, 3, 1, jac, basis)
    c_hat = np.stack([cx, cy, height], axis=1)
    r = center - c_hat
    if not jac:
        return r, []
    rxa, rxb = rx
    rya, ryb = ry
    Jc = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    jac = [Jc]
    for row, axis in ((rxa, 0), (rxb, 0), (rya, 1), (ryb, 1)):
        J = np.zeros((m, 3, 3))
        J[:, axis, :] = -row
        jac.append(J)
    return r, jac


def two_wall_batch(center: np.ndarray, n: np.ndarray, d: np.ndarray, anchor: np.ndarray, axis: np.ndarray, height: np.ndarray, jac: bool = True, basis=None):
    """Corridor residual: midpoint across the pair, anchored along the corridor."""
    _check_pairs(n, [(0, 1)])
    m = len(center)
    c_hat = np.array(anchor, dtype=float, copy=True)
    c_hat[:, 2] = height
    Ja = np.zeros((m, 3, 3))
    Jb = np.zeros((m, 3, 3))
    for ax in (0, 1):
        sel = axis == ax
        if not np.any(sel):
            continue
        c, rows = _pair_center(n[sel], d[sel], 0, 1, ax, jac, None if basis is None else basis[sel])
        c_hat[sel, ax] = c
        if jac:
            Ja[sel, ax, :] = -rows[0]
            Jb[sel, ax, :] = -rows[1]
    r = center - c_hat
    if not jac:
        return r, []
    return r, [np.broadcast_to(np.eye(3), (m, 3, 3)).copy(), Ja, Jb]


def _walls(walls):
    n = np.array([w[0] for w in walls], dtype=float)[None]
    d = np.array([w[1] for w in walls], dtype=float)[None]
    return n, d


def four_wall_room_residual(rho, walls, height: float = 0.0) -> Residual:
    """``rho - c_hat`` with walls ``[x_a, x_b, y_a, y_b]`` given as ``(n, d)``."""
    n, d = _walls(walls)
    r, J = center_batch(np.asarray(rho, dtype=float)[None], n, d, np.array([height], dtype=float))
    return Residual(r[0], [j[0] for j in J])


def two_wall_room_residual(kappa, walls, anchor, height: float = 0.0, axis: int | None = None) -> Residual:
    n, d = _walls(walls)
    if axis is None:
        axis = int(np.argmax(np.abs(n[0, 0, :2])))
    r, J = two_wall_batch(
        np.asarray(kappa, dtype=float)[None],
        n,
        d,
        np.asarray(anchor, dtype=float).reshape(1, 3),
        np.array([axis]),
        np.array([height], dtype=float),
    )
    return Residual(r[0], [j[0] for j in J])


def floor_residual(xi, widest_pairs, height: float = 0.0) -> Residual:
    """Floor center against the widest x-pair and y-pair, ``[x_a, x_b, y_a, y_b]``."""
    return four_wall_room_residual(xi, widest_pairs, height)
