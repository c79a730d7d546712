"""Scene interpretation on top of the graph: walls, floors, stairways and rooms."""

from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import lie
from .graph import AxisClass, EdgeKind, RoomKind, SituationalGraph


class InsufficientWalls(ValueError):
    pass


class NoValidPair(ValueError):
    pass


@dataclass
class FrontendConfig:
    assoc_angle_deg: float = 10.0
    assoc_distance: float = 0.35
    plane_sigma_normal: float = 0.005
    plane_sigma_distance: float = 0.01
    # inflates the plane noise model to absorb unmodelled errors
    plane_sigma_scale: float = 1.0
    extent_tol: float = 0.15
    # coplanar faces further apart than this along the wall stay separate walls
    assoc_gap: float = 1.0
    t_n: float = 0.1
    stair_queue: int = 8
    stair_slope: float = 0.25
    stair_overlap_tol: float = 0.3
    floor_half_height: float = 0.5
    min_overlap: float = 1.0
    room_min: float = 1.0
    room_max: float = 12.0
    dedup_radius: float = 0.5
    room_sigma: float = 0.1
    floor_sigma: float = 0.1

    def __post_init__(self):
        if self.stair_queue < 3:
            raise ValueError("stair_queue must be >= 3")
        for name in ("assoc_angle_deg", "assoc_distance", "plane_sigma_normal", "plane_sigma_distance", "plane_sigma_scale", "assoc_gap", "t_n", "stair_slope", "min_overlap", "room_min", "room_max", "room_sigma", "floor_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# -- wall association -------------------------------------------------------------


def canonical_observation(normal, distance) -> tuple[np.ndarray, float]:
    """Sensor-frame plane with its normal facing the sensor (``d <= 0``)."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    d = float(distance)
    if d > 0:
        return -n, -d
    return n, d


def associate_plane(graph: SituationalGraph, pose: np.ndarray, kf: int | None, observation, floor_id, config: FrontendConfig | None = None, points=None) -> tuple[int, bool]:
    """Match a sensor-frame plane to a wall of the floor, or create one.

    Adds the KF_PLANE edge when ``kf`` is given. Returns ``(wall id, created)``.
    """
    config = config or FrontendConfig()
    n_s, d_s = canonical_observation(*observation)
    n, d = lie.transform_plane(pose, n_s, d_s)
    cos_gate = np.cos(np.deg2rad(config.assoc_angle_deg))
    seen = None
    if points is not None and len(points):
        P = lie.transform_points(pose, points)
        seen = P[np.abs(P @ n - d) < config.extent_tol]
        if len(seen) < 2:
            seen = None
    best, best_score = None, np.inf
    for w in graph.walls.values():
        if w.floor_id != floor_id:
            continue
        c = float(w.normal @ n)
        if c < cos_gate:
            continue
        dd = abs(w.distance - d)
        if dd >= config.assoc_distance:
            continue
        if seen is not None and w.extent is not None and w.axis_class is not AxisClass.OTHER:
            lat = seen[:, w.lateral_axis]
            if max(w.extent[0] - lat.max(), lat.min() - w.extent[1]) > config.assoc_gap:
                continue
        score = dd + (1.0 - c)
        if score < best_score:
            best, best_score = w.id, score
    created = best is None
    if created:
        best = graph.add_wall(n, d, floor_id)
    wall = graph.walls[best]
    if seen is not None and wall.axis_class is not AxisClass.OTHER:
        lat = seen[:, wall.lateral_axis]
        wall.grow_extent(float(lat.min()), float(lat.max()))
    if kf is not None and not graph.edges_between(kf, best, (EdgeKind.KF_PLANE,)):
        graph.add_edge(EdgeKind.KF_PLANE, (kf, best), np.r_[n_s, d_s], plane_information(n_s, d_s, config))
    return best, created


def plane_information(n, d: float, config: FrontendConfig) -> np.ndarray:
    """Information of the ``d*n`` residual: distance noise along n, tilt noise across it."""
    k = config.plane_sigma_scale
    P = np.outer(n, n)
    var_n = (k * config.plane_sigma_distance) ** 2
    var_t = (k * config.plane_sigma_normal * d) ** 2 + var_n
    return P / var_n + (np.eye(3) - P) / var_t


# -- opposing pairs -------------------------------------------------------------


def _in_front(a, b) -> float:
    """Signed distance of plane ``b``'s closest point in front of plane ``a``."""
    return float(a.normal @ (b.distance * b.normal) - a.distance)


def pair_valid(a, b, t_n: float) -> bool:
    """Facing normals anti-parallel within ``t_n`` and each plane in front of the other."""
    return bool(a.normal @ b.normal <= -(1.0 - t_n) and _in_front(a, b) > 0 and _in_front(b, a) > 0)


def pair_width(a, b) -> float:
    return 0.5 * (_in_front(a, b) + _in_front(b, a))


def _ordered(graph, a: int, b: int) -> tuple[int, int]:
    """Order a pair as (lower coordinate, higher coordinate) along its axis."""
    wa, wb = graph.walls[a], graph.walls[b]
    return (a, b) if wa.position() <= wb.position() else (b, a)


def _pairs(graph: SituationalGraph, walls: list[int], t_n: float):
    out = []
    for a, b in itertools.combinations(sorted(walls), 2):
        if pair_valid(graph.walls[a], graph.walls[b], t_n):
            out.append(_ordered(graph, a, b))
    return out


def _midpoint(graph, pair, axis: int) -> float:
    a, b = graph.walls[pair[0]], graph.walls[pair[1]]
    return 0.5 * (a.distance * a.normal[axis] + b.distance * b.normal[axis])


@dataclass
class FloorCandidate:
    x_pair: tuple[int, int]
    y_pair: tuple[int, int]
    w_x: float
    w_y: float
    center: np.ndarray


def floor_walls(graph: SituationalGraph, floor_id: int, axis_class: AxisClass) -> list[int]:
    idx = graph.floor_index.get(floor_id)
    if idx is None:
        return []
    return sorted(w for w in idx.walls if graph.walls[w].axis_class is axis_class)


def detect_floor_center(graph: SituationalGraph, floor_id: int, t_n: float = 0.1) -> FloorCandidate:
    xs = floor_walls(graph, floor_id, AxisClass.X_FACING)
    ys = floor_walls(graph, floor_id, AxisClass.Y_FACING)
    if len(xs) < 2 or len(ys) < 2:
        raise InsufficientWalls(f"floor {floor_id} has {len(xs)} x-facing and {len(ys)} y-facing walls")
    best = []
    for ws in (xs, ys):
        pairs = _pairs(graph, ws, t_n)
        if not pairs:
            raise NoValidPair("no opposing wall pair passes the normal check")
        # widest first, ties to the lowest id pair
        pairs.sort(key=lambda p: (-pair_width(graph.walls[p[0]], graph.walls[p[1]]), tuple(sorted(p))))
        best.append(pairs[0])
    xp, yp = best
    height = graph.floors[floor_id].height
    center = np.array([_midpoint(graph, xp, 0), _midpoint(graph, yp, 1), height])
    return FloorCandidate(
        xp, yp, pair_width(graph.walls[xp[0]], graph.walls[xp[1]]), pair_width(graph.walls[yp[0]], graph.walls[yp[1]]), center
    )


def update_floor_node(graph: SituationalGraph, floor_id: int, cand: FloorCandidate, config: FrontendConfig | None = None) -> bool:
    """Point the floor's FLOOR_WALLPAIR edge at the candidate's walls; True when changed."""
    config = config or FrontendConfig()
    walls = (*cand.x_pair, *cand.y_pair)
    current = [e for e in graph.node_edges(floor_id) if graph.edges[e].kind is EdgeKind.FLOOR_WALLPAIR]
    if len(current) == 1 and graph.edges[current[0]].endpoints[1:] == walls:
        return False
    for e in current:
        graph.remove_edge(e)
    graph.floors[floor_id].center = cand.center.copy()
    info = np.eye(3) / config.floor_sigma**2
    graph.add_edge(EdgeKind.FLOOR_WALLPAIR, (floor_id, *walls), np.array([graph.floors[floor_id].height]), info)
    return True


# -- stairways --------------------------------------------------------------------


class StairEvent(str, enum.Enum):
    NONE = "NONE"
    STAIR_START = "STAIR_START"
    STAIR_CONTINUE = "STAIR_CONTINUE"
    FLOOR_CHANGE = "FLOOR_CHANGE"


@dataclass
class StairwayState:
    queue_len: int = 8
    slope_threshold: float = 0.25
    queue: deque = field(default_factory=deque)
    slope: float = 0.0
    active: bool = False
    stair_keyframes: list[int] = field(default_factory=list)
    travel: float = 0.0
    last_xy: np.ndarray | None = None
    direction: int = 0


@dataclass
class StairUpdate:
    event: StairEvent
    floor_id: int | None = None
    direction: int = 0
    reentered: bool = False


def regression_slope(s: np.ndarray, z: np.ndarray) -> float:
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    ds = s - s.mean()
    den = float(ds @ ds)
    if den < 1e-12:
        return 0.0
    return float(ds @ (z - z.mean()) / den)


def find_floor_at(graph: SituationalGraph, z: float, tol: float) -> int | None:
    best, gap = None, np.inf
    for f in graph.floors.values():
        if f.z_min - tol <= z <= f.z_max + tol:
            g = abs(z - f.height)
            if g < gap:
                best, gap = f.id, g
    return best


def update_stairway(state: StairwayState, graph: SituationalGraph, kf: int, config: FrontendConfig | None = None) -> StairUpdate:
    """Advance the stair detector with a new keyframe (in stamp order)."""
    config = config or FrontendConfig()
    p = graph.keyframes[kf].position
    if state.last_xy is not None:
        state.travel += float(np.linalg.norm(p[:2] - state.last_xy))
    state.last_xy = p[:2].copy()
    state.queue.append((kf, float(p[2]), state.travel))
    while len(state.queue) > state.queue_len:
        state.queue.popleft()
    if len(state.queue) < state.queue_len:
        return StairUpdate(StairEvent.STAIR_CONTINUE if state.active else StairEvent.NONE)
    _, z, s = zip(*state.queue)
    state.slope = regression_slope(np.array(s), np.array(z))
    steep = abs(state.slope) > state.slope_threshold
    if not state.active:
        if not steep:
            return StairUpdate(StairEvent.NONE)
        state.active = True
        state.direction = int(np.sign(state.slope))
        state.stair_keyframes = [kf]
        _mark_stair(graph, kf)
        return StairUpdate(StairEvent.STAIR_START, direction=int(np.sign(state.slope)))
    if steep:
        state.stair_keyframes.append(kf)
        _mark_stair(graph, kf)
        return StairUpdate(StairEvent.STAIR_CONTINUE, direction=int(np.sign(state.slope)))
    # flattened out: settle on a floor at the last stair keyframe's height
    last = state.stair_keyframes[-1]
    h = float(graph.keyframes[last].position[2])
    direction = state.direction
    fid = find_floor_at(graph, h, config.stair_overlap_tol)
    reentered = fid is not None
    next_seq = 1 + max((f.sequence_index for f in graph.floors.values()), default=-1)
    if fid is None:
        xy = graph.keyframes[last].position[:2]
        fid = graph.add_floor([xy[0], xy[1], h], h - config.floor_half_height, h + config.floor_half_height, next_seq, h)
    else:
        graph.floors[fid].sequence_index = next_seq
    for k in state.stair_keyframes:
        if k in graph.keyframes:
            graph.assign_floor(k, fid)
    graph.assign_floor(kf, fid)
    state.active = False
    state.stair_keyframes = []
    return StairUpdate(StairEvent.FLOOR_CHANGE, fid, direction, reentered)


def _mark_stair(graph: SituationalGraph, kf: int) -> None:
    node = graph.keyframes[kf]
    node.is_stair = True
    if node.floor_id is not None:
        graph.clear_floor(kf)


# -- rooms ----------------------------------------------------------------------


def _overlap(a: tuple[float, float] | None, lo: float, hi: float) -> float:
    if a is None:
        return 0.0
    return max(0.0, min(a[1], hi) - max(a[0], lo))


def _span(graph, pair, axis: int) -> tuple[float, float]:
    a, b = graph.walls[pair[0]], graph.walls[pair[1]]
    pa, pb = a.distance * a.normal[axis], b.distance * b.normal[axis]
    return (min(pa, pb), max(pa, pb))


def _common_extent(graph, pair):
    ea, eb = graph.walls[pair[0]].extent, graph.walls[pair[1]].extent
    if ea is None or eb is None:
        return None
    lo, hi = max(ea[0], eb[0]), min(ea[1], eb[1])
    return (lo, hi) if hi > lo else None


def room_pairs(graph: SituationalGraph, floor_id: int, axis_class: AxisClass, config: FrontendConfig) -> list[tuple[int, int]]:
    """Adjacent opposing pairs whose width is a plausible room size."""
    walls = floor_walls(graph, floor_id, axis_class)
    axis = 0 if axis_class is AxisClass.X_FACING else 1
    out = []
    for pair in _pairs(graph, walls, config.t_n):
        a, b = graph.walls[pair[0]], graph.walls[pair[1]]
        w = pair_width(a, b)
        if not config.room_min <= w <= config.room_max:
            continue
        common = _common_extent(graph, pair)
        if common is None or common[1] - common[0] < config.min_overlap:
            continue
        lo, hi = _span(graph, pair, axis)
        blocked = False
        for c in walls:
            if c in pair:
                continue
            wc = graph.walls[c]
            pc = wc.distance * wc.normal[axis]
            if lo + 1e-6 < pc < hi - 1e-6 and _overlap(wc.extent, *common) >= config.min_overlap:
                blocked = True
                break
        if not blocked:
            out.append(pair)
    return out


@dataclass
class RoomDetection:
    new_rooms: list[int] = field(default_factory=list)
    merged_walls: list[tuple[int, int]] = field(default_factory=list)
    removed_rooms: list[int] = field(default_factory=list)


def _add_room_edge(graph: SituationalGraph, rid: int, config: FrontendConfig) -> None:
    room = graph.rooms[rid]
    for e in [e for e in graph.node_edges(rid) if graph.edges[e].kind is EdgeKind.ROOM_WALL]:
        graph.remove_edge(e)
    h = graph.floors[room.floor_id].height
    info = np.eye(3) / config.room_sigma**2
    if room.kind is RoomKind.FOUR_WALL:
        graph.add_edge(EdgeKind.ROOM_WALL, (rid, *room.wall_ids), np.array([h]), info)
    else:
        axis = graph.walls[room.wall_ids[0]].axis
        graph.add_edge(EdgeKind.ROOM_WALL, (rid, *room.wall_ids), np.r_[room.anchor, axis, h], info)


def detect_rooms(graph: SituationalGraph, floor_id: int, config: FrontendConfig | None = None) -> RoomDetection:
    config = config or FrontendConfig()
    out = RoomDetection()
    h = graph.floors[floor_id].height
    xp = room_pairs(graph, floor_id, AxisClass.X_FACING, config)
    yp = room_pairs(graph, floor_id, AxisClass.Y_FACING, config)
    used: set[tuple[int, int]] = set()
    for r in graph.rooms.values():
        if r.kind is RoomKind.FOUR_WALL and r.floor_id == floor_id:
            used.add(tuple(r.wall_ids[:2]))
            used.add(tuple(r.wall_ids[2:]))
    for px, py in itertools.product(xp, yp):
        xs, ys = _span(graph, px, 0), _span(graph, py, 1)
        if any(_overlap(graph.walls[w].extent, *ys) < config.min_overlap for w in px):
            continue
        if any(_overlap(graph.walls[w].extent, *xs) < config.min_overlap for w in py):
            continue
        walls = [*px, *py]
        center = np.array([_midpoint(graph, px, 0), _midpoint(graph, py, 1), h])
        same = [r for r in graph.rooms.values() if r.kind is RoomKind.FOUR_WALL and r.floor_id == floor_id and r.wall_ids == walls]
        if same:
            continue
        dup = [
            r for r in graph.rooms.values()
            if r.kind is RoomKind.FOUR_WALL and r.floor_id == floor_id and np.linalg.norm(r.center[:2] - center[:2]) < config.dedup_radius
        ]
        if dup:
            room = min(dup, key=lambda r: r.id)
            for keep, drop in zip(list(room.wall_ids), walls):
                if keep != drop and keep in graph.walls and drop in graph.walls:
                    keep_, drop_ = min(keep, drop), max(keep, drop)
                    graph.merge_walls(keep_, drop_)
                    out.merged_walls.append((keep_, drop_))
            _rebuild_after_merge(graph, config)
            # wall ids changed under us: rescan with the merged walls
            again = detect_rooms(graph, floor_id, config)
            out.new_rooms += again.new_rooms
            out.merged_walls += again.merged_walls
            out.removed_rooms += again.removed_rooms
            return out
        rid = graph.add_room(RoomKind.FOUR_WALL, center, walls, floor_id)
        _add_room_edge(graph, rid, config)
        out.new_rooms.append(rid)
        used.add(tuple(px))
        used.add(tuple(py))
    # a bounded room supersedes a corridor hypothesis on one of its pairs
    for r in list(graph.rooms.values()):
        if r.kind is RoomKind.TWO_WALL and r.floor_id == floor_id and tuple(r.wall_ids) in used:
            graph.remove_room(r.id)
            out.removed_rooms.append(r.id)
    for pair, axis in [(p, 0) for p in xp] + [(p, 1) for p in yp]:
        if pair in used:
            continue
        common = _common_extent(graph, pair)
        width = pair_width(graph.walls[pair[0]], graph.walls[pair[1]])
        if common is None or common[1] - common[0] < 2 * width:
            continue
        if any(r.kind is RoomKind.TWO_WALL and tuple(r.wall_ids) == pair for r in graph.rooms.values()):
            continue
        anchor = np.zeros(3)
        anchor[axis] = _midpoint(graph, pair, axis)
        anchor[1 - axis] = 0.5 * (common[0] + common[1])
        anchor[2] = h
        rid = graph.add_room(RoomKind.TWO_WALL, anchor, list(pair), floor_id, anchor=anchor)
        _add_room_edge(graph, rid, config)
        out.new_rooms.append(rid)
    return out


def _rebuild_after_merge(graph: SituationalGraph, config: FrontendConfig) -> None:
    """Restore room and floor edges lost when walls were merged."""
    for r in list(graph.rooms.values()):
        if len(set(r.wall_ids)) < len(r.wall_ids):
            graph.remove_room(r.id)
            continue
        if not any(graph.edges[e].kind is EdgeKind.ROOM_WALL for e in graph.node_edges(r.id)):
            _add_room_edge(graph, r.id, config)


def segment_room_keyframes(graph: SituationalGraph, room_id: int) -> set[int]:
    """Keyframes of the room's floor lying strictly inside its four walls."""
    room = graph.rooms[room_id]
    idx = graph.floor_index.get(room.floor_id)
    kfs = sorted(idx.keyframes) if idx is not None else []
    members = set()
    if kfs:
        P = np.array([graph.keyframes[k].position for k in kfs])
        inside = np.ones(len(kfs), dtype=bool)
        for w in room.wall_ids:
            wall = graph.walls[w]
            q = wall.distance * wall.normal
            inside &= (P - q) @ wall.normal > 0
        members = {k for k, ok in zip(kfs, inside) if ok}
    room.member_keyframes = members
    return members


def room_containing(graph: SituationalGraph, p: np.ndarray, floor_id) -> int | None:
    for r in sorted(graph.rooms.values(), key=lambda r: r.id):
        if r.kind is not RoomKind.FOUR_WALL or r.floor_id != floor_id:
            continue
        if all(graph.walls[w].normal @ p - graph.walls[w].distance > 0 for w in r.wall_ids):
            return r.id
    return None
