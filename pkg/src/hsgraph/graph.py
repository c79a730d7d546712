"""Situational graph: keyframes, walls, rooms and floors plus typed factor edges.

All nodes share one id counter and edges have their own; ids are never reused
inside a graph. Subgraph views are plain id sets that the optimizer reads and
writes back through the graph.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import lie


class GraphError(Exception):
    pass


class UnknownNode(GraphError, KeyError):
    pass


class UnknownFloor(GraphError, KeyError):
    pass


class DimensionMismatch(GraphError, ValueError):
    pass


class NonPSDInformation(GraphError, ValueError):
    pass


class InvalidPose(GraphError, ValueError):
    pass


class NotFourWallRoom(GraphError, ValueError):
    pass


class EmptyRoom(GraphError, ValueError):
    pass


class NonContiguousDrop(GraphError, ValueError):
    pass


class WouldDisconnect(GraphError, ValueError):
    pass


class AxisClass(enum.Enum):
    X_FACING = "X"
    Y_FACING = "Y"
    OTHER = "O"


class RoomKind(enum.Enum):
    FOUR_WALL = "FOUR_WALL"
    TWO_WALL = "TWO_WALL"


class EdgeKind(enum.Enum):
    ODOM = "ODOM"
    LOOP = "LOOP"
    KF_PLANE = "KF_PLANE"
    ROOM_WALL = "ROOM_WALL"
    FLOOR_WALLPAIR = "FLOOR_WALLPAIR"


RESIDUAL_DIM = {
    EdgeKind.ODOM: 6,
    EdgeKind.LOOP: 6,
    EdgeKind.KF_PLANE: 3,
    EdgeKind.ROOM_WALL: 3,
    EdgeKind.FLOOR_WALLPAIR: 3,
}
POSE_EDGES = (EdgeKind.ODOM, EdgeKind.LOOP)

DEFAULT_AXIS_TOL = np.deg2rad(15.0)


def classify_axis(normal, axis_tol: float = DEFAULT_AXIS_TOL) -> AxisClass:
    c = np.cos(axis_tol)
    if abs(normal[0]) >= c:
        return AxisClass.X_FACING
    if abs(normal[1]) >= c:
        return AxisClass.Y_FACING
    return AxisClass.OTHER


@dataclass
class KeyframeNode:
    id: int
    pose: np.ndarray
    stamp: float
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    floor_id: int | None = None
    is_stair: bool = False
    odom: np.ndarray | None = None

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]


@dataclass
class WallPlaneNode:
    id: int
    normal: np.ndarray
    distance: float
    axis_class: AxisClass
    floor_id: int | None = None
    # lateral extent along the wall (y for X_FACING, x for Y_FACING), map frame
    extent: tuple[float, float] | None = None

    @property
    def tau(self) -> np.ndarray:
        return self.distance * self.normal

    @property
    def lateral_axis(self) -> int:
        return 1 if self.axis_class is AxisClass.X_FACING else 0

    @property
    def axis(self) -> int:
        return 0 if self.axis_class is AxisClass.X_FACING else 1

    def position(self) -> float:
        """Coordinate of the wall along its facing axis."""
        return float(self.distance * self.normal[self.axis])

    def grow_extent(self, lo: float, hi: float) -> None:
        if self.extent is None:
            self.extent = (lo, hi)
        else:
            self.extent = (min(self.extent[0], lo), max(self.extent[1], hi))


@dataclass
class RoomNode:
    id: int
    kind: RoomKind
    center: np.ndarray
    wall_ids: list[int]
    floor_id: int
    member_keyframes: set[int] = field(default_factory=set)
    anchor: np.ndarray | None = None


@dataclass
class FloorNode:
    id: int
    center: np.ndarray
    z_min: float
    z_max: float
    sequence_index: int
    height: float = 0.0


@dataclass
class FactorEdge:
    """Measurement layouts: ODOM/LOOP a 4x4 relative pose; KF_PLANE ``[n, d]``;
    ROOM_WALL ``[height]`` for four-wall rooms and ``[anchor(3), axis, height]``
    for two-wall rooms; FLOOR_WALLPAIR ``[height]``."""

    id: int
    kind: EdgeKind
    endpoints: tuple[int, ...]
    measurement: np.ndarray
    information: np.ndarray


@dataclass
class MapOdomTransform:
    transform: np.ndarray = field(default_factory=lambda: np.eye(4))


@dataclass
class FloorIndex:
    keyframes: set[int] = field(default_factory=set)
    walls: set[int] = field(default_factory=set)
    rooms: set[int] = field(default_factory=set)


@dataclass
class SubgraphView:
    """Optimizable nodes, fixed keyframes, constant non-keyframe nodes and edges."""

    nodes: set[int]
    fixed: set[int]
    edges: list[int]
    constants: set[int] = field(default_factory=set)
    boundary: dict[int, list[int]] = field(default_factory=dict)

    def node_set(self) -> set[int]:
        return self.nodes | self.fixed | self.constants


def check_information(info: np.ndarray, dim: int) -> np.ndarray:
    info = np.asarray(info, dtype=float)
    if info.shape != (dim, dim):
        raise DimensionMismatch(f"information must be {dim}x{dim}, got {info.shape}")
    if np.max(np.abs(info - info.T)) > 1e-12:
        raise NonPSDInformation("information matrix is not symmetric")
    if np.min(np.linalg.eigvalsh(info)) < -1e-12:
        raise NonPSDInformation("information matrix has a negative eigenvalue")
    return info


class SituationalGraph:
    def __init__(self, axis_tol: float = DEFAULT_AXIS_TOL):
        self.axis_tol = axis_tol
        self.keyframes: dict[int, KeyframeNode] = {}
        self.walls: dict[int, WallPlaneNode] = {}
        self.rooms: dict[int, RoomNode] = {}
        self.floors: dict[int, FloorNode] = {}
        self.edges: dict[int, FactorEdge] = {}
        self.floor_index: dict[int, FloorIndex] = {}
        self.map_odom = MapOdomTransform()
        self._node_edges: dict[int, set[int]] = {}
        self._succ: dict[int, int] = {}
        self._pred: dict[int, int] = {}
        self._next_node = 0
        self._next_edge = 0
        self.keyframes_created = 0

    # -- bookkeeping ---------------------------------------------------------

    def _new_node_id(self) -> int:
        i = self._next_node
        self._next_node += 1
        self._node_edges[i] = set()
        return i

    def has_node(self, nid: int) -> bool:
        return nid in self.keyframes or nid in self.walls or nid in self.rooms or nid in self.floors

    def node(self, nid: int):
        for store in (self.keyframes, self.walls, self.rooms, self.floors):
            if nid in store:
                return store[nid]
        raise UnknownNode(nid)

    def node_edges(self, nid: int) -> set[int]:
        if not self.has_node(nid):
            raise UnknownNode(nid)
        return self._node_edges[nid]

    def degree(self, nid: int) -> int:
        return len(self.node_edges(nid))

    def edges_between(self, a: int, b: int, kinds=None) -> list[int]:
        out = []
        for eid in self._node_edges.get(a, ()):
            e = self.edges[eid]
            if b in e.endpoints and (kinds is None or e.kind in kinds):
                out.append(eid)
        return sorted(out)

    def successor(self, kf: int) -> int | None:
        return self._succ.get(kf)

    def predecessor(self, kf: int) -> int | None:
        return self._pred.get(kf)

    def chain(self) -> list[int]:
        """Keyframes in ODOM-chain order starting from the chain head(s)."""
        heads = sorted(k for k in self.keyframes if k not in self._pred)
        order: list[int] = []
        for h in heads:
            k: int | None = h
            while k is not None:
                order.append(k)
                k = self._succ.get(k)
        return order

    def _floor_idx(self, fid: int) -> FloorIndex:
        return self.floor_index.setdefault(fid, FloorIndex())

    # -- insertion -----------------------------------------------------------

    def add_keyframe(self, pose, stamp: float, points=None, odom=None) -> int:
        pose = np.array(pose, dtype=float)
        if not lie.is_valid_pose(pose):
            raise InvalidPose("keyframe pose is not a valid SE(3) element")
        pts = np.zeros((0, 3)) if points is None else np.asarray(points, dtype=float).reshape(-1, 3)
        kid = self._new_node_id()
        self.keyframes[kid] = KeyframeNode(kid, pose, float(stamp), pts, odom=None if odom is None else np.array(odom, dtype=float))
        self.keyframes_created += 1
        return kid

    def add_wall(self, normal, distance: float, floor_id: int | None = None, extent=None) -> int:
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        wid = self._new_node_id()
        self.walls[wid] = WallPlaneNode(wid, n, float(distance), classify_axis(n, self.axis_tol), None, extent)
        if floor_id is not None:
            self.assign_floor(wid, floor_id)
        return wid

    def add_room(self, kind: RoomKind, center, wall_ids, floor_id: int, anchor=None) -> int:
        for w in wall_ids:
            if w not in self.walls:
                raise UnknownNode(w)
        rid = self._new_node_id()
        self.rooms[rid] = RoomNode(
            rid, kind, np.asarray(center, dtype=float).copy(), list(wall_ids), floor_id,
            anchor=None if anchor is None else np.asarray(anchor, dtype=float).copy(),
        )
        self._floor_idx(floor_id).rooms.add(rid)
        return rid

    def add_floor(self, center, z_min: float, z_max: float, sequence_index: int | None = None, height: float | None = None) -> int:
        fid = self._new_node_id()
        if sequence_index is None:
            sequence_index = 1 + max((f.sequence_index for f in self.floors.values()), default=-1)
        c = np.asarray(center, dtype=float).copy()
        self.floors[fid] = FloorNode(fid, c, float(z_min), float(z_max), sequence_index, float(c[2] if height is None else height))
        self._floor_idx(fid)
        return fid

    def add_edge(self, kind: EdgeKind, endpoints, measurement, information) -> int:
        kind = EdgeKind(kind)
        endpoints = tuple(int(e) for e in endpoints)
        for nid in endpoints:
            if not self.has_node(nid):
                raise UnknownNode(nid)
        info = check_information(information, RESIDUAL_DIM[kind])
        eid = self._next_edge
        self._next_edge += 1
        self.edges[eid] = FactorEdge(eid, kind, endpoints, np.array(measurement, dtype=float), info.copy())
        for nid in endpoints:
            self._node_edges[nid].add(eid)
        if kind is EdgeKind.ODOM:
            a, b = endpoints
            self._succ[a] = b
            self._pred[b] = a
        return eid

    def remove_edge(self, eid: int) -> None:
        e = self.edges.pop(eid)
        for nid in e.endpoints:
            self._node_edges[nid].discard(eid)
        if e.kind is EdgeKind.ODOM:
            a, b = e.endpoints
            if self._succ.get(a) == b:
                del self._succ[a]
            if self._pred.get(b) == a:
                del self._pred[b]

    def _remove_node(self, nid: int) -> None:
        for eid in sorted(self._node_edges.get(nid, ())):
            self.remove_edge(eid)
        self._node_edges.pop(nid, None)
        for idx in self.floor_index.values():
            idx.keyframes.discard(nid)
            idx.walls.discard(nid)
            idx.rooms.discard(nid)

    def remove_keyframe(self, kid: int) -> None:
        if kid not in self.keyframes:
            raise UnknownNode(kid)
        self._remove_node(kid)
        del self.keyframes[kid]
        for room in self.rooms.values():
            room.member_keyframes.discard(kid)

    def remove_room(self, rid: int) -> None:
        if rid not in self.rooms:
            raise UnknownNode(rid)
        self._remove_node(rid)
        del self.rooms[rid]

    def remove_wall(self, wid: int) -> None:
        if wid not in self.walls:
            raise UnknownNode(wid)
        self._remove_node(wid)
        del self.walls[wid]

    def assign_floor(self, nid: int, fid: int) -> None:
        if fid not in self.floors:
            raise UnknownNode(fid)
        if nid in self.keyframes:
            node, attr = self.keyframes[nid], "keyframes"
        elif nid in self.walls:
            node, attr = self.walls[nid], "walls"
        elif nid in self.rooms:
            node, attr = self.rooms[nid], "rooms"
        else:
            raise UnknownNode(nid)
        if node.floor_id is not None and node.floor_id in self.floor_index:
            getattr(self.floor_index[node.floor_id], attr).discard(nid)
        node.floor_id = fid
        getattr(self._floor_idx(fid), attr).add(nid)

    def clear_floor(self, nid: int) -> None:
        """Remove a keyframe's floor label (stair keyframes while the stairway is open)."""
        node = self.keyframes[nid]
        if node.floor_id is not None and node.floor_id in self.floor_index:
            self.floor_index[node.floor_id].keyframes.discard(nid)
        node.floor_id = None

    def merge_walls(self, keep: int, drop: int) -> list[int]:
        """Redirect observations of ``drop`` onto ``keep`` and delete ``drop``.

        Room and floor edges touching ``drop`` are removed; rooms referencing it
        are repointed to ``keep`` (callers rebuild their edges). Returns new
        KF_PLANE edge ids.
        """
        if keep not in self.walls or drop not in self.walls:
            raise UnknownNode(keep if keep not in self.walls else drop)
        new = []
        for eid in sorted(self._node_edges[drop]):
            e = self.edges[eid]
            if e.kind is EdgeKind.KF_PLANE:
                kf = e.endpoints[0]
                if not self.edges_between(kf, keep, (EdgeKind.KF_PLANE,)):
                    new.append(self.add_edge(EdgeKind.KF_PLANE, (kf, keep), e.measurement, e.information))
        kw, dw = self.walls[keep], self.walls[drop]
        if dw.extent is not None:
            kw.grow_extent(*dw.extent)
        for room in self.rooms.values():
            room.wall_ids = [keep if w == drop else w for w in room.wall_ids]
        self.remove_wall(drop)
        return new

    # -- queries -------------------------------------------------------------

    def keyframe_ids(self) -> list[int]:
        return sorted(self.keyframes)

    def initial_keyframe(self) -> int | None:
        return min(self.keyframes) if self.keyframes else None

    def observers(self, wall_ids) -> set[int]:
        wall_ids = set(wall_ids)
        out = set()
        for w in wall_ids:
            for eid in self._node_edges.get(w, ()):
                e = self.edges[eid]
                if e.kind is EdgeKind.KF_PLANE:
                    out.add(e.endpoints[0])
        return out

    def pose_edges(self, kf: int) -> list[FactorEdge]:
        return [self.edges[e] for e in sorted(self._node_edges[kf]) if self.edges[e].kind in POSE_EDGES]

    def keyframe_components(self) -> int:
        """Connected components of the keyframe graph over ODOM/LOOP edges."""
        parent = {k: k for k in self.keyframes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges.values():
            if e.kind in POSE_EDGES:
                a, b = find(e.endpoints[0]), find(e.endpoints[1])
                if a != b:
                    parent[a] = b
        return len({find(k) for k in self.keyframes})

    def node_count(self) -> int:
        return len(self.keyframes) + len(self.walls) + len(self.rooms) + len(self.floors)

    # -- subgraph views ------------------------------------------------------

    def _attach_rooms_and_floors(self, walls: set[int], rooms: set[int], floors: set[int], edges: set[int], constants: set[int], full_floor: bool) -> set[int]:
        nodes = set(rooms)
        for rid in rooms:
            for eid in self._node_edges[rid]:
                e = self.edges[eid]
                if e.kind is EdgeKind.ROOM_WALL:
                    edges.add(eid)
                    constants.update(w for w in e.endpoints[1:] if w not in walls)
        for fid in floors:
            fe = [eid for eid in self._node_edges[fid] if self.edges[eid].kind is EdgeKind.FLOOR_WALLPAIR]
            usable = [eid for eid in fe if full_floor or set(self.edges[eid].endpoints[1:]) <= walls]
            if usable:
                nodes.add(fid)
                for eid in usable:
                    edges.add(eid)
                    constants.update(w for w in self.edges[eid].endpoints[1:] if w not in walls)
            elif fe:
                constants.add(fid)
        return nodes

    def window_subgraph(self, window) -> SubgraphView:
        window = [int(k) for k in window]
        if not window:
            raise GraphError("empty window")
        for k in window:
            if k not in self.keyframes:
                raise UnknownNode(k)
        W = set(window)
        walls: set[int] = set()
        for k in W:
            for eid in self._node_edges[k]:
                e = self.edges[eid]
                if e.kind is EdgeKind.KF_PLANE:
                    walls.add(e.endpoints[1])
        fixed = self.observers(walls) - W
        inside = W | fixed
        edges: set[int] = set()
        for k in W:
            for eid in self._node_edges[k]:
                e = self.edges[eid]
                if e.kind in POSE_EDGES and set(e.endpoints) <= inside:
                    edges.add(eid)
        for w in walls:
            for eid in self._node_edges[w]:
                e = self.edges[eid]
                if e.kind is EdgeKind.KF_PLANE and e.endpoints[0] in inside:
                    edges.add(eid)
        rooms = {r.id for r in self.rooms.values() if walls.intersection(r.wall_ids)}
        newest = self.keyframes[max(W)]
        floor = newest.floor_id if newest.floor_id is not None else self.current_floor()
        constants: set[int] = set()
        extra = self._attach_rooms_and_floors(walls, rooms, {floor} if floor is not None else set(), edges, constants, full_floor=False)
        return SubgraphView(W | walls | extra, fixed, sorted(edges), constants)

    def current_floor(self) -> int | None:
        if not self.floors:
            return None
        return max(self.floors.values(), key=lambda f: (f.sequence_index, f.id)).id

    def floor_subgraph(self, floor_id: int, include_previous: bool = False) -> SubgraphView:
        if floor_id not in self.floors:
            raise UnknownFloor(floor_id)
        if include_previous:
            seq = self.floors[floor_id].sequence_index
            F = {f.id for f in self.floors.values() if f.sequence_index <= seq}
        else:
            F = {floor_id}
        kfs: set[int] = set()
        walls: set[int] = set()
        rooms: set[int] = set()
        for f in F:
            idx = self._floor_idx(f)
            kfs |= idx.keyframes
            walls |= idx.walls
            rooms |= idx.rooms
        edges: set[int] = set()
        boundary: dict[int, list[int]] = {}
        for k in kfs:
            for eid in self._node_edges[k]:
                e = self.edges[eid]
                if e.kind in POSE_EDGES:
                    other = e.endpoints[1] if e.endpoints[0] == k else e.endpoints[0]
                    if other in kfs:
                        edges.add(eid)
                    else:
                        boundary.setdefault(other, []).append(eid)
                elif e.kind is EdgeKind.KF_PLANE and e.endpoints[1] in walls:
                    edges.add(eid)
        constants: set[int] = set()
        extra = self._attach_rooms_and_floors(walls, rooms, F, edges, constants, full_floor=True)
        boundary = {k: sorted(v) for k, v in sorted(boundary.items())}
        return SubgraphView(kfs | walls | extra, set(), sorted(edges), constants, boundary)

    def room_subgraph(self, room_id: int) -> SubgraphView:
        if room_id not in self.rooms:
            raise UnknownNode(room_id)
        room = self.rooms[room_id]
        if room.kind is not RoomKind.FOUR_WALL:
            raise NotFourWallRoom(room_id)
        members = {k for k in room.member_keyframes if k in self.keyframes}
        if not members:
            raise EmptyRoom(room_id)
        walls = set(room.wall_ids)
        fixed = self.observers(walls) - members
        inside = members | fixed
        edges: set[int] = set()
        for k in members:
            for eid in self._node_edges[k]:
                e = self.edges[eid]
                if e.kind in POSE_EDGES and set(e.endpoints) <= inside:
                    edges.add(eid)
        for w in walls:
            for eid in self._node_edges[w]:
                e = self.edges[eid]
                if e.kind is EdgeKind.KF_PLANE and e.endpoints[0] in inside:
                    edges.add(eid)
                elif e.kind is EdgeKind.ROOM_WALL and e.endpoints[0] == room_id:
                    edges.add(eid)
        return SubgraphView(members | walls | {room_id}, fixed, sorted(edges))

    # -- marginalization -----------------------------------------------------

    def marginalize_keyframes(self, keep: int, drop) -> int:
        """Remove a contiguous chain segment after ``keep`` and bridge the gap.

        The bridging ODOM edge carries the current relative estimate between
        ``keep`` and the first surviving successor, with information equal to
        the sum of the removed chain edges (plus LOOP edges internal to the
        dropped set).
        """
        drop = [int(k) for k in drop]
        for k in [keep, *drop]:
            if k not in self.keyframes:
                raise UnknownNode(k)
        if not drop:
            raise NonContiguousDrop("nothing to drop")
        prev = keep
        for k in drop:
            if self._succ.get(prev) != k:
                raise NonContiguousDrop(f"keyframe {k} does not follow {prev} in the odometry chain")
            prev = k
        after = self._succ.get(prev)
        if after is None:
            raise NonContiguousDrop("dropped segment has no surviving successor")
        dset = set(drop)
        removed: list[int] = []
        for k in drop:
            for eid in self._node_edges[k]:
                e = self.edges[eid]
                if e.kind is EdgeKind.LOOP:
                    if not set(e.endpoints) <= dset:
                        raise WouldDisconnect(f"keyframe {k} holds loop edge {eid} leaving the dropped set")
                    removed.append(eid)
        seen = {self.edges[eid].endpoints[1] for k in drop for eid in self._node_edges[k] if self.edges[eid].kind is EdgeKind.KF_PLANE}
        for w in sorted(seen):
            if self.observers([w]) <= dset:
                raise WouldDisconnect(f"wall {w} would lose every observing keyframe")
        removed = sorted(set(removed))
        chain = [keep, *drop, after]
        for a, b in zip(chain[:-1], chain[1:]):
            removed.extend(self.edges_between(a, b, (EdgeKind.ODOM,)))
        info = np.zeros((6, 6))
        for eid in removed:
            info = info + self.edges[eid].information
        meas = lie.relative(self.keyframes[keep].pose, self.keyframes[after].pose)
        for k in drop:
            self.remove_keyframe(k)
        return self.add_edge(EdgeKind.ODOM, (keep, after), meas, info)
