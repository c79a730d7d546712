"""Sparse Levenberg-Marquardt and the three hierarchical optimization levels."""

from __future__ import annotations

import enum
import json
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import factors, lie
from .graph import (
    POSE_EDGES,
    EdgeKind,
    GraphError,
    RoomKind,
    SituationalGraph,
    SubgraphView,
)


class SingularSystem(GraphError):
    pass


class Level(str, enum.Enum):
    LOCAL = "LOCAL"
    FLOOR_GLOBAL = "FLOOR_GLOBAL"
    ROOM_LOCAL = "ROOM_LOCAL"
    BATCH = "BATCH"


@dataclass
class OptimizationConfig:
    max_iterations: int = 30
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    rel_tol: float = 1e-6
    grad_tol: float = 1e-8
    window_size: int = 10
    huber_delta: float = 1.0
    # below this total cost nothing measurable is left to gain
    abs_cost_tol: float = 1e-24

    def __post_init__(self):
        for name in ("max_iterations", "initial_lambda", "lambda_up", "lambda_down", "rel_tol", "grad_tol", "huber_delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")


@dataclass
class OptimizationReport:
    level: str
    iterations: int
    initial_cost: float
    final_cost: float
    wall_ms: float
    nodes: int
    edges: int
    fixed: int
    converged: bool = True
    marginalized: int = 0
    marginalization_skipped: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# -- problem assembly -----------------------------------------------------------


class _Problem:
    """Flattened copy of a subgraph's states with edge index tables."""

    def __init__(self, graph: SituationalGraph, node_ids, free_ids, edge_ids, huber_delta: float):
        self.graph = graph
        self.huber = huber_delta
        self.kf_ids = sorted(n for n in node_ids if n in graph.keyframes)
        self.wall_ids = sorted(n for n in node_ids if n in graph.walls)
        self.ctr_ids = sorted(n for n in node_ids if n in graph.rooms or n in graph.floors)
        self.kf_pos = {k: i for i, k in enumerate(self.kf_ids)}
        self.wall_pos = {k: i for i, k in enumerate(self.wall_ids)}
        self.ctr_pos = {k: i for i, k in enumerate(self.ctr_ids)}

        self.poses = np.array([graph.keyframes[k].pose for k in self.kf_ids]).reshape(-1, 4, 4)
        self.normals = np.array([graph.walls[w].normal for w in self.wall_ids]).reshape(-1, 3)
        self.dists = np.array([graph.walls[w].distance for w in self.wall_ids], dtype=float)
        self.centers = np.array([graph.node(c).center for c in self.ctr_ids]).reshape(-1, 3)

        free = set(free_ids)
        off = 0
        self.kf_off = np.full(len(self.kf_ids), -1)
        self.wall_off = np.full(len(self.wall_ids), -1)
        self.ctr_off = np.full(len(self.ctr_ids), -1)
        self.normal_blocks: list[int] = []
        self.trans_blocks: list[int] = []
        for i, k in enumerate(self.kf_ids):
            if k in free:
                self.kf_off[i] = off
                self.trans_blocks.append(off + 3)
                off += 6
        for i, w in enumerate(self.wall_ids):
            if w in free:
                self.wall_off[i] = off
                self.normal_blocks.append(off)
                off += 3
        for i, c in enumerate(self.ctr_ids):
            if c in free:
                self.ctr_off[i] = off
                off += 3
        self.dim = off
        self._trans_idx = np.array(self.trans_blocks, dtype=int).reshape(-1, 1) + np.arange(3)
        self._normal_idx = np.array(self.normal_blocks, dtype=int).reshape(-1, 1) + np.arange(2)
        self._build_groups(edge_ids)

    def _build_groups(self, edge_ids) -> None:
        g = self.graph
        odom, kfp, four, two = [], [], [], []
        for eid in edge_ids:
            e = g.edges[eid]
            if e.kind in POSE_EDGES:
                odom.append(e)
            elif e.kind is EdgeKind.KF_PLANE:
                kfp.append(e)
            elif e.kind is EdgeKind.ROOM_WALL and g.rooms[e.endpoints[0]].kind is RoomKind.TWO_WALL:
                two.append(e)
            else:
                four.append(e)
        self.n_edges = len(edge_ids)
        self.odom = None
        if odom:
            self.odom = dict(
                ia=np.array([self.kf_pos[e.endpoints[0]] for e in odom]),
                ib=np.array([self.kf_pos[e.endpoints[1]] for e in odom]),
                Z=np.array([e.measurement for e in odom]),
                info=np.array([e.information for e in odom]),
                robust=np.array([e.kind is EdgeKind.LOOP for e in odom]),
            )
        self.kfp = None
        if kfp:
            m = np.array([e.measurement for e in kfp])
            self.kfp = dict(
                ik=np.array([self.kf_pos[e.endpoints[0]] for e in kfp]),
                ip=np.array([self.wall_pos[e.endpoints[1]] for e in kfp]),
                n_obs=m[:, :3],
                d_obs=m[:, 3],
                info=np.array([e.information for e in kfp]),
            )
        self.four = None
        if four:
            self.four = dict(
                ic=np.array([self.ctr_pos[e.endpoints[0]] for e in four]),
                iw=np.array([[self.wall_pos[w] for w in e.endpoints[1:5]] for e in four]),
                height=np.array([e.measurement[-1] for e in four]),
                info=np.array([e.information for e in four]),
            )
        self.two = None
        if two:
            self.two = dict(
                ic=np.array([self.ctr_pos[e.endpoints[0]] for e in two]),
                iw=np.array([[self.wall_pos[w] for w in e.endpoints[1:3]] for e in two]),
                anchor=np.array([e.measurement[:3] for e in two]),
                axis=np.array([int(e.measurement[3]) for e in two]),
                height=np.array([e.measurement[4] for e in two]),
                info=np.array([e.information for e in two]),
            )

    # residual groups: (r, jacobians, endpoint offsets, dims, info, robust-mask)
    def _groups(self, poses, normals, dists, centers, jac: bool = True):
        out = []
        # tangent bases are shared by every factor touching a wall
        B = lie.tangent_basis(normals).reshape(-1, 3, 2) if jac and len(normals) else None
        if self.odom is not None:
            o = self.odom
            r, J = factors.odom_batch(poses[o["ia"]], poses[o["ib"]], o["Z"], jac)
            out.append((r, J, [self.kf_off[o["ia"]], self.kf_off[o["ib"]]], o["info"], o["robust"]))
        if self.kfp is not None:
            o = self.kfp
            r, J = factors.kf_plane_batch(poses[o["ik"]], normals[o["ip"]], dists[o["ip"]], o["n_obs"], o["d_obs"], jac, None if B is None else B[o["ip"]])
            out.append((r, J, [self.kf_off[o["ik"]], self.wall_off[o["ip"]]], o["info"], np.ones(len(r), bool)))
        if self.four is not None:
            o = self.four
            r, J = factors.center_batch(centers[o["ic"]], normals[o["iw"]], dists[o["iw"]], o["height"], jac, None if B is None else B[o["iw"]])
            offs = [self.ctr_off[o["ic"]]] + [self.wall_off[o["iw"][:, j]] for j in range(4)]
            out.append((r, J, offs, o["info"], np.zeros(len(r), bool)))
        if self.two is not None:
            o = self.two
            r, J = factors.two_wall_batch(centers[o["ic"]], normals[o["iw"]], dists[o["iw"]], o["anchor"], o["axis"], o["height"], jac, None if B is None else B[o["iw"]])
            offs = [self.ctr_off[o["ic"]]] + [self.wall_off[o["iw"][:, j]] for j in range(2)]
            out.append((r, J, offs, o["info"], np.zeros(len(r), bool)))
        return out

    def _robust(self, s2: np.ndarray, robust: np.ndarray):
        s = np.sqrt(s2)
        big = robust & (s > self.huber)
        rho = np.where(big, 2.0 * self.huber * s - self.huber**2, s2)
        w = np.where(big, self.huber / np.where(big, s, 1.0), 1.0)
        return rho, w

    def cost(self, state) -> float:
        total = 0.0
        for r, _, _, info, robust in self._groups(*state, jac=False):
            s2 = np.einsum("ni,nij,nj->n", r, info, r)
            rho, _ = self._robust(s2, robust)
            total += float(rho.sum())
        return total

    def _structure(self, groups):
        """Global parameter indices per edge and the CSC pattern of H (cached)."""
        if getattr(self, "_pattern", None) is not None:
            return self._pattern
        sink = self.dim
        idx_list, lin = [], []
        for _, J, offs, _, _ in groups:
            cols = []
            for Jp, op in zip(J, offs):
                ar = np.arange(Jp.shape[2])
                cols.append(np.where(op[:, None] >= 0, op[:, None] + ar[None, :], sink))
            idx = np.concatenate(cols, axis=1)
            idx_list.append(idx)
            D = idx.shape[1]
            rr = np.broadcast_to(idx[:, :, None], (len(idx), D, D)).ravel()
            cc = np.broadcast_to(idx[:, None, :], (len(idx), D, D)).ravel()
            lin.append(cc * (sink + 1) + rr)
        lin = np.concatenate(lin) if lin else np.zeros(0, int)
        keep = lin % (sink + 1) != sink
        keep &= lin // (sink + 1) != sink
        uniq, inv = np.unique(lin[keep], return_inverse=True)
        rows = uniq % (sink + 1)
        cols = uniq // (sink + 1)
        indptr = np.searchsorted(cols, np.arange(self.dim + 1))
        self._pattern = (idx_list, keep, inv, rows, indptr, len(uniq))
        return self._pattern

    def linearize(self, state):
        groups = self._groups(*state)
        idx_list, keep, inv, rows, indptr, nnz = self._structure(groups)
        total = 0.0
        g = np.zeros(self.dim + 1)
        vals = []
        for (r, J, _, info, robust), idx in zip(groups, idx_list):
            s2 = np.einsum("ni,nij,nj->n", r, info, r)
            rho, w = self._robust(s2, robust)
            total += float(rho.sum())
            Jc = np.concatenate(J, axis=2)
            JtW = np.matmul(Jc.transpose(0, 2, 1), info * w[:, None, None])
            g += np.bincount(idx.ravel(), weights=np.matmul(JtW, r[:, :, None]).ravel(), minlength=self.dim + 1)
            vals.append(np.matmul(JtW, Jc).ravel())
        data = np.bincount(inv, weights=np.concatenate(vals)[keep], minlength=nnz) if vals else np.zeros(0)
        H = sp.csc_matrix((data, rows, indptr), shape=(self.dim, self.dim))
        return total, H, g[: self.dim]

    def state(self):
        return (self.poses, self.normals, self.dists, self.centers)

    def retract(self, state, delta):
        poses, normals, dists, centers = state
        poses = poses.copy()
        normals = normals.copy()
        dists = dists.copy()
        centers = centers.copy()
        sel = np.nonzero(self.kf_off >= 0)[0]
        if len(sel):
            idx = self.kf_off[sel][:, None] + np.arange(6)
            poses[sel] = lie.retract(poses[sel], delta[idx])
        sel = np.nonzero(self.wall_off >= 0)[0]
        if len(sel):
            idx = self.wall_off[sel][:, None] + np.arange(3)
            dw = delta[idx]
            B = lie.tangent_basis(normals[sel]).reshape(-1, 3, 2)
            m = normals[sel] + np.einsum("nij,nj->ni", B, dw[:, :2])
            normals[sel] = m / np.linalg.norm(m, axis=1, keepdims=True)
            dists[sel] = dists[sel] + dw[:, 2]
        sel = np.nonzero(self.ctr_off >= 0)[0]
        if len(sel):
            idx = self.ctr_off[sel][:, None] + np.arange(3)
            centers[sel] = centers[sel] + delta[idx]
        return (poses, normals, dists, centers)

    def damping(self, H) -> np.ndarray:
        D = np.array(H.diagonal())
        # isotropic damping on world-frame translation and on plane normals keeps
        # steps independent of the map frame orientation and of the tangent basis
        for idx in (self._trans_idx, self._normal_idx):
            if idx.size:
                D[idx] = D[idx].mean(axis=1, keepdims=True)
        return D

    def write_back(self, state) -> None:
        poses, normals, dists, centers = state
        g = self.graph
        for i, k in enumerate(self.kf_ids):
            if self.kf_off[i] >= 0:
                g.keyframes[k].pose = poses[i].copy()
        for i, w in enumerate(self.wall_ids):
            if self.wall_off[i] >= 0:
                g.walls[w].normal = normals[i].copy()
                g.walls[w].distance = float(dists[i])
        for i, c in enumerate(self.ctr_ids):
            if self.ctr_off[i] >= 0:
                g.node(c).center = centers[i].copy()


DENSE_MAX = 400


def solve(graph: SituationalGraph, view: SubgraphView, fixed, config: OptimizationConfig | None = None, level: Level | str = Level.BATCH) -> OptimizationReport:
    """Levenberg-Marquardt over a subgraph; fixed nodes are removed from the parameter vector."""
    config = config or OptimizationConfig()
    t0 = time.perf_counter()
    fixed = set(fixed) | set(view.fixed) | set(view.constants)
    node_ids = view.node_set() | fixed
    free = sorted(set(view.nodes) - fixed)
    prob = _Problem(graph, node_ids, free, view.edges, config.huber_delta)
    state = prob.state()
    cost0 = prob.cost(state)
    cost = cost0
    lam = config.initial_lambda
    it = 0
    converged = prob.dim == 0
    first = True
    while not converged and it < config.max_iterations:
        cost, H, g = prob.linearize(state)
        D = prob.damping(H)
        if first:
            if np.any(D <= 0.0):
                raise SingularSystem("unconstrained variable in normal equations")
            _check_rank(H)
            first = False
        if cost <= config.abs_cost_tol or np.max(np.abs(g)) < config.grad_tol:
            converged = True
            break
        it += 1
        accepted = False
        # small systems solve faster densely than through SuperLU setup
        Hd = H.toarray() if prob.dim <= DENSE_MAX else None
        while not accepted:
            try:
                if Hd is not None:
                    A = Hd.copy()
                    A[np.diag_indices_from(A)] += lam * D
                    delta = np.linalg.solve(A, -g)
                else:
                    A = (H + sp.diags(lam * D)).tocsc()
                    delta = spla.splu(A, permc_spec="MMD_AT_PLUS_A").solve(-g)
            except (RuntimeError, np.linalg.LinAlgError) as exc:
                raise SingularSystem(str(exc)) from exc
            cand = prob.retract(state, delta)
            new_cost = prob.cost(cand)
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                rel = (cost - new_cost) / cost
                state, cost = cand, new_cost
                lam = max(lam * config.lambda_down, 1e-12)
                if rel < config.rel_tol or cost <= config.abs_cost_tol:
                    converged = True
            else:
                lam *= config.lambda_up
                if lam > 1e12:
                    break
        if not accepted:
            # no descent direction left at machine precision
            converged = True
            break
    prob.write_back(state)
    return OptimizationReport(
        level=Level(level).value,
        iterations=it,
        initial_cost=float(cost0),
        final_cost=float(cost),
        wall_ms=1e3 * (time.perf_counter() - t0),
        nodes=len(node_ids),
        edges=prob.n_edges,
        fixed=len(fixed & node_ids),
        converged=bool(converged),
    )


def _check_rank(H) -> None:
    n = H.shape[0]
    if n == 0:
        return
    d = np.abs(H.diagonal())
    scale = np.sqrt(d)
    if n <= DENSE_MAX:
        Hn = H.toarray() / scale[:, None] / scale[None, :]
        with warnings.catch_warnings():
            # an exactly singular pivot is reported through the check below
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            piv = np.abs(np.diag(sla.lu_factor(Hn, check_finite=False)[0]))
    else:
        S = sp.diags(1.0 / scale)
        Hn = (S @ H @ S).tocsc()
        try:
            lu = spla.splu(Hn, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from exc
        piv = np.abs(lu.U.diagonal())
    if piv.min() < 1e-11 * max(piv.max(), 1.0):
        raise SingularSystem("normal equations are rank deficient after gauge fixing")


# -- hierarchical levels -----------------------------------------------------


def _pose_linked(graph: SituationalGraph, view: SubgraphView, fixed) -> bool:
    fixed = set(fixed)
    for eid in view.edges:
        e = graph.edges[eid]
        if e.kind in POSE_EDGES and (e.endpoints[0] in fixed) != (e.endpoints[1] in fixed):
            return True
    return False


def local_optimize(graph: SituationalGraph, config: OptimizationConfig | None = None) -> OptimizationReport:
    config = config or OptimizationConfig()
    kfs = graph.keyframe_ids()
    if not kfs:
        raise GraphError("no keyframes")
    window = kfs[-config.window_size :]
    view = graph.window_subgraph(window)
    fixed = set(view.fixed)
    if not _pose_linked(graph, view, fixed):
        fixed.add(window[0])
    return solve(graph, view, fixed, config, Level.LOCAL)


def floor_gauge(graph: SituationalGraph, view: SubgraphView) -> int:
    """Keyframe frozen for a floor-level solve; may extend ``view`` with one boundary edge."""
    init = graph.initial_keyframe()
    kfs = sorted(k for k in view.nodes if k in graph.keyframes)
    if init in view.nodes or not kfs:
        return init
    first = kfs[0]
    prev = graph.predecessor(first)
    if prev is not None and prev in view.boundary:
        view.edges = sorted(set(view.edges) | set(graph.edges_between(prev, first, POSE_EDGES)))
        view.fixed = view.fixed | {prev}
        return prev
    return first


def floor_global_optimize(graph: SituationalGraph, floor_id: int, revisit: bool = False, config: OptimizationConfig | None = None) -> OptimizationReport:
    config = config or OptimizationConfig()
    view = graph.floor_subgraph(floor_id, include_previous=revisit)
    gauge = floor_gauge(graph, view)
    return solve(graph, view, {gauge}, config, Level.FLOOR_GLOBAL)


def batch_optimize(graph: SituationalGraph, config: OptimizationConfig | None = None) -> OptimizationReport:
    config = config or OptimizationConfig()
    nodes = set(graph.keyframes) | set(graph.walls) | set(graph.rooms)
    edges = sorted(graph.edges)
    used = {n for eid in edges for n in graph.edges[eid].endpoints}
    nodes |= {f for f in graph.floors if f in used}
    view = SubgraphView(nodes, set(), edges)
    return solve(graph, view, {graph.initial_keyframe()}, config, Level.BATCH)


def marginalization_plan(graph: SituationalGraph, room_id: int) -> list[tuple[int, list[int]]]:
    """``(keep, drop)`` segments that compress a room to its first member keyframe.

    Keyframes holding loop edges that leave the dropped set are exempt, and the
    newest keyframe of the graph is never dropped.
    """
    members = sorted(k for k in graph.rooms[room_id].member_keyframes if k in graph.keyframes)
    if len(members) < 2:
        return []
    newest = max(graph.keyframes)
    cand = set(members[1:]) - {newest}
    while True:
        exempt = set()
        for k in cand:
            for e in graph.pose_edges(k):
                if e.kind is EdgeKind.LOOP and not set(e.endpoints) <= cand:
                    exempt.add(k)
        # every wall keeps at least one observing keyframe
        kfp = [graph.edges[eid] for k in cand for eid in graph.node_edges(k)]
        for w in sorted({e.endpoints[1] for e in kfp if e.kind is EdgeKind.KF_PLANE}):
            obs = graph.observers([w])
            if obs <= cand:
                exempt.add(min(obs))
        if not exempt:
            break
        cand -= exempt
    plan = []
    run: list[int] = []
    for k in sorted(cand):
        if run and graph.successor(run[-1]) == k:
            run.append(k)
            continue
        if run:
            plan.append(run)
        run = [k]
    if run:
        plan.append(run)
    out = []
    for seg in plan:
        keep = graph.predecessor(seg[0])
        while seg and graph.successor(seg[-1]) is None:
            seg = seg[:-1]
        if keep is not None and seg:
            out.append((keep, seg))
    return out


def room_local_optimize(graph: SituationalGraph, room_id: int, config: OptimizationConfig | None = None, marginalize: bool = True, before_drop=None) -> OptimizationReport:
    """Optimize a room's subgraph, then compress its keyframes.

    ``before_drop(keep, segment)`` is called ahead of each marginalized segment.
    """
    config = config or OptimizationConfig()
    view = graph.room_subgraph(room_id)
    members = sorted(k for k in graph.rooms[room_id].member_keyframes if k in graph.keyframes)
    # chain neighbours just outside the room hold the gauge, so every member can settle on the walls
    edges = set(view.edges)
    for k in members:
        for nb in (graph.predecessor(k), graph.successor(k)):
            if nb is not None and nb not in view.nodes:
                view.fixed = view.fixed | {nb}
                edges |= set(graph.edges_between(k, nb, POSE_EDGES))
    view.edges = sorted(edges)
    fixed = set(view.fixed)
    if not _pose_linked(graph, view, fixed):
        fixed.add(members[0])
    report = solve(graph, view, fixed, config, Level.ROOM_LOCAL)
    if marginalize:
        t0 = time.perf_counter()
        dropped = 0
        try:
            for keep, seg in marginalization_plan(graph, room_id):
                if before_drop is not None:
                    before_drop(keep, seg)
                graph.marginalize_keyframes(keep, seg)
                dropped += len(seg)
        except GraphError:
            report.marginalization_skipped = True
        report.marginalized = dropped
        report.wall_ms += 1e3 * (time.perf_counter() - t0)
    return report
