"""Independent numerical oracles shared by the tests."""

from __future__ import annotations

import numpy as np

import itertools

from hsgraph import factors, lie
from hsgraph.graph import EdgeKind, RoomKind, SituationalGraph, SubgraphView

FD_STEP = 1e-6
X, Y = 0, 1


def random_pose(rng, scale=3.0, rot=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(-rot, rot)
    return lie.make_pose(lie.so3_exp(axis * ang), rng.normal(scale=scale, size=3))


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def retract_pose(T, d):
    return lie.retract(T, d)


def retract_plane(plane, d):
    n, dist = plane
    return factors.retract_plane(np.asarray(n, float), float(dist), d)


def retract_vec(c, d):
    return np.asarray(c, float) + d


def numeric_jacobian(fn, x, retract, dim, h=FD_STEP):
    cols = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        cols.append((fn(retract(x, e)) - fn(retract(x, -e))) / (2 * h))
    return np.stack(cols, axis=1)


def rel_err(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12)


# -- dense reference solver ------------------------------------------------------
#
# Written against the residual definitions only: poses are perturbed on the left
# with a matrix exponential, planes are parameterized by their closest point
# tau = d * n, and Jacobians are numerical. Nothing here calls the sparse solver.


def _hat6(xi):
    M = np.zeros((4, 4))
    w, v = xi[:3], xi[3:]
    M[:3, :3] = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    M[:3, 3] = v
    return M


def _rot_log(R):
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(R).as_rotvec()


def _odom_r(Ta, Tb, Z):
    Ra, ta, Rb, tb = Ta[:3, :3], Ta[:3, 3], Tb[:3, :3], Tb[:3, 3]
    ZR, Zt = Z[:3, :3], Z[:3, 3]
    return np.r_[_rot_log(ZR.T @ Ra.T @ Rb), ZR.T @ (Ra.T @ (tb - ta) - Zt)]


def _kfp_r(T, tau_map, obs):
    R, t = T[:3, :3], T[:3, 3]
    local = R.T @ (tau_map - (tau_map @ t) * tau_map / (tau_map @ tau_map))
    return local - obs[3] * obs[:3]


def dense_reference_solve(graph, fixed, huber=1.0, iters=200):
    """Minimize the full robust cost of ``graph`` with a dense damped Gauss-Newton loop.

    Returns ``(poses, taus, centers)`` dicts keyed by node id.
    """
    from scipy.linalg import expm

    from hsgraph.graph import EdgeKind, RoomKind

    kfs = sorted(graph.keyframes)
    walls = sorted(graph.walls)
    ctrs = sorted(set(graph.rooms) | {f for f in graph.floors if graph.node_edges(f)})
    poses = {k: graph.keyframes[k].pose.copy() for k in kfs}
    taus = {w: graph.walls[w].distance * graph.walls[w].normal for w in walls}
    centers = {c: graph.node(c).center.astype(float).copy() for c in ctrs}
    layout = []
    for k in kfs:
        if k not in fixed:
            layout.append(("kf", k, 6))
    for w in walls:
        layout.append(("wall", w, 3))
    for c in ctrs:
        layout.append(("ctr", c, 3))
    dim = sum(s for _, _, s in layout)

    def apply(state, delta):
        P, Tm, C = ({k: v.copy() for k, v in s.items()} for s in state)
        o = 0
        for kind, nid, s in layout:
            dx = delta[o : o + s]
            if kind == "kf":
                P[nid] = expm(_hat6(dx)) @ P[nid]
            elif kind == "wall":
                Tm[nid] = Tm[nid] + dx
            else:
                C[nid] = C[nid] + dx
            o += s
        return P, Tm, C

    def residuals(state):
        P, Tm, C = state
        out = []
        for e in (graph.edges[i] for i in sorted(graph.edges)):
            robust = e.kind in (EdgeKind.LOOP, EdgeKind.KF_PLANE)
            if e.kind in (EdgeKind.ODOM, EdgeKind.LOOP):
                r = _odom_r(P[e.endpoints[0]], P[e.endpoints[1]], e.measurement)
            elif e.kind is EdgeKind.KF_PLANE:
                r = _kfp_r(P[e.endpoints[0]], Tm[e.endpoints[1]], e.measurement)
            else:
                c = C[e.endpoints[0]]
                ws = [Tm[w] for w in e.endpoints[1:]]
                if e.kind is EdgeKind.ROOM_WALL and graph.rooms[e.endpoints[0]].kind is RoomKind.TWO_WALL:
                    anchor, axis, h = e.measurement[:3], int(e.measurement[3]), e.measurement[4]
                    hat = np.array(anchor, float)
                    hat[axis] = 0.5 * (ws[0][axis] + ws[1][axis])
                    hat[2] = h
                else:
                    hat = np.array([0.5 * (ws[0][0] + ws[1][0]), 0.5 * (ws[2][1] + ws[3][1]), e.measurement[-1]])
                r = c - hat
            out.append((r, e.information, robust))
        return out

    def cost_and_whitened(state, weights=None):
        total = 0.0
        rows, ws = [], []
        for r, info, robust in residuals(state):
            s2 = float(r @ info @ r)
            s = np.sqrt(s2)
            if robust and s > huber:
                total += 2 * huber * s - huber**2
                w = huber / s
            else:
                total += s2
                w = 1.0
            ws.append(w)
        if weights is None:
            weights = ws
        for (r, info, _), w in zip(residuals(state), weights):
            L = np.linalg.cholesky(info + 1e-300 * np.eye(len(info)))
            rows.append(np.sqrt(w) * (L.T @ r))
        return total, np.concatenate(rows), ws

    state = (poses, taus, centers)
    lam = 1e-6
    cost, _, _ = cost_and_whitened(state)
    for _ in range(iters):
        _, f0, w = cost_and_whitened(state)
        J = np.zeros((len(f0), dim))
        h = 1e-7
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = h
            fp = cost_and_whitened(apply(state, e), w)[1]
            fm = cost_and_whitened(apply(state, -e), w)[1]
            J[:, i] = (fp - fm) / (2 * h)
        H = J.T @ J
        g = J.T @ f0
        while True:
            step = np.linalg.solve(H + lam * np.eye(dim), -g)
            cand = apply(state, step)
            c2 = cost_and_whitened(cand)[0]
            if c2 <= cost:
                state, lam = cand, max(lam / 10, 1e-12)
                break
            lam *= 10
            if lam > 1e8:
                break
        if np.linalg.norm(step) < 1e-12 or lam > 1e8:
            break
        cost = c2
    return state


# -- geometry builders and oracles ---------------------------------------------


def floor_graph(h=0.0):
    g = SituationalGraph()
    f = g.add_floor([0, 0, h], h - 0.5, h + 0.5, 0, h)
    return g, f


def face(g, f, axis, coord, facing, extent):
    """Wall at ``coord`` along ``axis`` whose normal points to ``facing`` (+1 / -1)."""
    n = np.zeros(3)
    n[axis] = facing
    return g.add_wall(n, facing * coord, f, extent)


def box(g, f, x0, x1, y0, y1):
    return [
        face(g, f, X, x0, +1, (y0, y1)),
        face(g, f, X, x1, -1, (y0, y1)),
        face(g, f, Y, y0, +1, (x0, x1)),
        face(g, f, Y, y1, -1, (x0, x1)),
    ]


def oracle_floor_pair(walls, axis):
    """Exhaustive enumeration: lower face looks up the axis, upper face looks down."""
    best = None
    for (ia, a), (ib, b) in itertools.combinations(walls, 2):
        (il, lo), (ih, hi) = sorted([(ia, a), (ib, b)], key=lambda t: t[1][0])
        if lo[1] != +1 or hi[1] != -1 or hi[0] <= lo[0]:
            continue
        key = (-(hi[0] - lo[0]), tuple(sorted((ia, ib))))
        if best is None or key < best[0]:
            best = (key, (il, ih), 0.5 * (lo[0] + hi[0]))
    return best


# -- factor and optimizer fixtures ----------------------------------------------


def room_walls(x0, x1, y0, y1):
    return [
        (np.array([1.0, 0, 0]), x0),
        (np.array([-1.0, 0, 0]), -x1),
        (np.array([0, 1.0, 0]), y0),
        (np.array([0, -1.0, 0]), -y1),
    ]


def noisy_walls(rng, walls, sigma_n=0.01, sigma_d=0.02):
    out = []
    for n, d in walls:
        m = lie.so3_exp(rng.normal(scale=sigma_n, size=3)) @ n
        out.append((m, d + rng.normal(scale=sigma_d)))
    return out


I6 = np.eye(6)

# room x in [0, 6], y in [0, 4]
ROOM_WALLS = [([1.0, 0, 0], 0.0), ([-1.0, 0, 0], -6.0), ([0, 1.0, 0], 0.0), ([0, -1.0, 0], -4.0)]


def perturb(T, rng, sr, st_):
    return T @ lie.exp_pose(np.r_[rng.normal(scale=sr, size=3), rng.normal(scale=st_, size=3)])


def build_world(n=20, seed=0, noise=0.02, loops=True, room=True, floor=None):
    """Keyframes circling inside one room, with plane observations and loops.

    Initial estimates are dead-reckoned from noisy odometry, so the problem is
    far from its optimum but well conditioned.
    """
    rng = np.random.default_rng(seed)
    truth = []
    for i in range(n):
        a = 2 * np.pi * i / n
        truth.append(lie.yaw_pose(3 + 1.8 * np.cos(a), 2 + 1.2 * np.sin(a), 0.0, a + np.pi / 2))
    g = SituationalGraph()
    fid = g.add_floor([3, 2, 0], -0.5, 0.5, height=0.0) if floor is None else floor
    est = truth[0].copy()
    ids = []
    for i, T in enumerate(truth):
        if i:
            Z = perturb(lie.relative(truth[i - 1], T), rng, noise / 4, noise)
            est = est @ Z
        k = g.add_keyframe(est.copy(), float(i))
        g.assign_floor(k, fid)
        if ids:
            g.add_edge(EdgeKind.ODOM, (ids[-1], k), Z, 100 * I6)
        ids.append(k)
    walls = []
    for nvec, d in ROOM_WALLS:
        nvec = np.array(nvec)
        w = g.add_wall(lie.so3_exp(rng.normal(scale=0.02, size=3)) @ nvec, d + rng.normal(scale=0.05), fid)
        walls.append(w)
        for k, T in zip(ids, truth):
            nl = T[:3, :3].T @ nvec
            dl = d - nvec @ T[:3, 3]
            obs_n = lie.so3_exp(rng.normal(scale=noise / 4, size=3)) @ nl
            g.add_edge(EdgeKind.KF_PLANE, (k, w), np.r_[obs_n, dl + rng.normal(scale=noise)], 50 * np.eye(3))
    if loops:
        for a, b in ((0, n - 1), (0, n // 2), (n // 4, 3 * n // 4)):
            Z = perturb(lie.relative(truth[a], truth[b]), rng, noise / 4, noise)
            g.add_edge(EdgeKind.LOOP, (ids[a], ids[b]), Z, 100 * I6)
    rid = None
    if room:
        rid = g.add_room(RoomKind.FOUR_WALL, [3.1, 1.9, 0.0], walls, fid)
        g.add_edge(EdgeKind.ROOM_WALL, (rid, *walls), np.array([0.0]), 10 * np.eye(3))
        g.rooms[rid].member_keyframes = set(ids)
    return g, ids, walls, rid, truth


def full_view(g):
    used = {n for e in g.edges.values() for n in e.endpoints}
    nodes = set(g.keyframes) | set(g.walls) | set(g.rooms) | (set(g.floors) & used)
    return SubgraphView(nodes, set(), sorted(g.edges))


def snapshot(g):
    return (
        {k: v.pose.copy() for k, v in g.keyframes.items()},
        {k: (v.normal.copy(), v.distance) for k, v in g.walls.items()},
        {k: v.center.copy() for k, v in g.rooms.items()},
        {k: v.center.copy() for k, v in g.floors.items()},
    )


def transform_graph(g, G):
    R, t = G[:3, :3], G[:3, 3]
    for kf in g.keyframes.values():
        kf.pose = G @ kf.pose
    for w in g.walls.values():
        n = R @ w.normal
        w.normal = n
        w.distance = w.distance + n @ t
    for node in list(g.rooms.values()) + list(g.floors.values()):
        node.center = R @ node.center + t
