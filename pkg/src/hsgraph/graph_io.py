"""Line-oriented g2o-style text export and import of a situational graph.

Vertex records come first, ordered by id, then edge records ordered by id:

    VERTEX_SE3:KF    id x y z qx qy qz qw stamp floor is_stair
    VERTEX_PLANE     id nx ny nz d floor ext_lo ext_hi
    VERTEX_ROOM      id kind floor cx cy cz n_walls walls... n_members members... [ax ay az]
    VERTEX_FLOOR     id cx cy cz z_min z_max sequence_index height
    EDGE_<KIND>      id endpoints... measurement... information(upper triangle, row-major)
    MAP_ODOM         x y z qx qy qz qw

Missing floors are written as -1 and missing extents as ``nan``.
"""

from __future__ import annotations

import numpy as np

from . import lie
from .graph import (
    RESIDUAL_DIM,
    EdgeKind,
    FloorNode,
    KeyframeNode,
    RoomKind,
    RoomNode,
    SituationalGraph,
    WallPlaneNode,
    classify_axis,
)


class FormatError(ValueError):
    pass


def _f(x) -> str:
    return format(float(x), ".9g")


def _fs(xs) -> str:
    return " ".join(_f(x) for x in np.ravel(xs))


def _upper(info: np.ndarray) -> np.ndarray:
    return info[np.triu_indices(len(info))]


def _from_upper(vals, dim: int) -> np.ndarray:
    M = np.zeros((dim, dim))
    M[np.triu_indices(dim)] = vals
    return M + np.triu(M, 1).T


def _edge_layout(graph: SituationalGraph, kind: EdgeKind, first: int) -> tuple[int, int]:
    """(endpoint count, measurement length) of an edge kind."""
    if kind in (EdgeKind.ODOM, EdgeKind.LOOP):
        return 2, 7
    if kind is EdgeKind.KF_PLANE:
        return 2, 4
    if kind is EdgeKind.ROOM_WALL and graph.rooms[first].kind is RoomKind.TWO_WALL:
        return 3, 5
    return 5, 1


def export_g2o(graph: SituationalGraph) -> str:
    lines = []
    records = []
    for k, kf in graph.keyframes.items():
        fl = -1 if kf.floor_id is None else kf.floor_id
        records.append((k, f"VERTEX_SE3:KF {k} {_fs(lie.pose_to_vec7(kf.pose))} {_f(kf.stamp)} {fl} {int(kf.is_stair)}"))
    for w, wall in graph.walls.items():
        fl = -1 if wall.floor_id is None else wall.floor_id
        ext = wall.extent if wall.extent is not None else (np.nan, np.nan)
        records.append((w, f"VERTEX_PLANE {w} {_fs(wall.normal)} {_f(wall.distance)} {fl} {_fs(ext)}"))
    for r, room in graph.rooms.items():
        members = sorted(room.member_keyframes)
        s = (
            f"VERTEX_ROOM {r} {room.kind.value} {room.floor_id} {_fs(room.center)} "
            f"{len(room.wall_ids)} {' '.join(map(str, room.wall_ids))} {len(members)}"
        )
        if members:
            s += " " + " ".join(map(str, members))
        if room.anchor is not None:
            s += " " + _fs(room.anchor)
        records.append((r, s))
    for f, fl in graph.floors.items():
        records.append((f, f"VERTEX_FLOOR {f} {_fs(fl.center)} {_f(fl.z_min)} {_f(fl.z_max)} {fl.sequence_index} {_f(fl.height)}"))
    lines.extend(s for _, s in sorted(records))
    for eid in sorted(graph.edges):
        e = graph.edges[eid]
        meas = lie.pose_to_vec7(e.measurement) if e.kind in (EdgeKind.ODOM, EdgeKind.LOOP) else e.measurement
        lines.append(f"EDGE_{e.kind.value} {eid} {' '.join(map(str, e.endpoints))} {_fs(meas)} {_fs(_upper(e.information))}")
    lines.append(f"MAP_ODOM {_fs(lie.pose_to_vec7(graph.map_odom.transform))}")
    return "\n".join(lines) + "\n"


def import_g2o(text: str) -> SituationalGraph:
    g = SituationalGraph()
    vertices: dict[int, tuple[str, list[str], int]] = {}
    edges: list[tuple[int, EdgeKind, list[str], int]] = []
    map_odom = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        tag = tok[0]
        try:
            if tag.startswith("VERTEX_"):
                vertices[int(tok[1])] = (tag, tok[2:], lineno)
            elif tag.startswith("EDGE_"):
                edges.append((int(tok[1]), EdgeKind(tag[5:]), tok[2:], lineno))
            elif tag == "MAP_ODOM":
                map_odom = lie.vec7_to_pose([float(x) for x in tok[1:8]])
            else:
                raise FormatError(f"line {lineno}: unknown record {tag}")
        except (ValueError, IndexError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc

    def floor_ref(s: str):
        v = int(s)
        return None if v < 0 else v

    order = {"VERTEX_FLOOR": 0, "VERTEX_SE3:KF": 1, "VERTEX_PLANE": 2, "VERTEX_ROOM": 3}
    for nid, (tag, tok, lineno) in sorted(vertices.items(), key=lambda kv: (order.get(kv[1][0], 9), kv[0])):
        try:
            g._node_edges[nid] = set()
            if tag == "VERTEX_FLOOR":
                v = [float(x) for x in tok[:5]]
                g.floors[nid] = FloorNode(nid, np.array(v[:3]), v[3], v[4], int(tok[5]), float(tok[6]))
                g._floor_idx(nid)
            elif tag == "VERTEX_SE3:KF":
                T = lie.vec7_to_pose([float(x) for x in tok[:7]])
                g.keyframes[nid] = KeyframeNode(nid, T, float(tok[7]), is_stair=bool(int(tok[9])))
                if floor_ref(tok[8]) is not None:
                    g.assign_floor(nid, floor_ref(tok[8]))
            elif tag == "VERTEX_PLANE":
                n = np.array([float(x) for x in tok[:3]])
                n /= np.linalg.norm(n)
                ext = (float(tok[5]), float(tok[6]))
                wall = WallPlaneNode(nid, n, float(tok[3]), classify_axis(n, g.axis_tol), None, None if np.isnan(ext[0]) else ext)
                g.walls[nid] = wall
                if floor_ref(tok[4]) is not None:
                    g.assign_floor(nid, floor_ref(tok[4]))
            elif tag == "VERTEX_ROOM":
                kind = RoomKind(tok[0])
                fl = int(tok[1])
                center = np.array([float(x) for x in tok[2:5]])
                nw = int(tok[5])
                walls = [int(x) for x in tok[6 : 6 + nw]]
                nm = int(tok[6 + nw])
                members = {int(x) for x in tok[7 + nw : 7 + nw + nm]}
                rest = tok[7 + nw + nm :]
                anchor = np.array([float(x) for x in rest]) if rest else None
                g.rooms[nid] = RoomNode(nid, kind, center, walls, fl, members, anchor)
                g._floor_idx(fl).rooms.add(nid)
            else:
                raise FormatError(f"line {lineno}: unknown vertex {tag}")
        except (ValueError, IndexError, KeyError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    g._next_node = max(vertices, default=-1) + 1
    g.keyframes_created = len(g.keyframes)

    for eid, kind, tok, lineno in sorted(edges, key=lambda e: e[0]):
        try:
            n_end, n_meas = _edge_layout(g, kind, int(tok[0]))
            ends = tuple(int(x) for x in tok[:n_end])
            vals = [float(x) for x in tok[n_end:]]
            dim = RESIDUAL_DIM[kind]
            if len(vals) != n_meas + dim * (dim + 1) // 2:
                raise FormatError(f"line {lineno}: wrong field count for {kind.value}")
            meas = np.array(vals[:n_meas])
            if kind in (EdgeKind.ODOM, EdgeKind.LOOP):
                meas = lie.vec7_to_pose(meas)
            g._next_edge = eid
            g.add_edge(kind, ends, meas, _from_upper(vals[n_meas:], dim))
        except (ValueError, IndexError, KeyError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    g._next_edge = max((e[0] for e in edges), default=-1) + 1
    if map_odom is not None:
        g.map_odom.transform = map_odom
    return g


def write_g2o(graph: SituationalGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(export_g2o(graph))


def read_g2o(path) -> SituationalGraph:
    with open(path, encoding="utf-8") as fh:
        return import_g2o(fh.read())
