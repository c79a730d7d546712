"""Deterministic multi-floor indoor worlds, routes and noisy sensor streams.

Layout per floor (all coordinates in meters, map frame):

* a corridor along x at ``y in [0, corridor_width]`` spanning ``x in [0, L]``;
* row 0 of rooms directly above it, row 1 (optional) below it, separated from
  the corridor by walls of thickness ``wall_thickness``;
* a switchback stairwell beyond ``x = L`` joining consecutive floors.

Walls are stored as the inner faces seen from the space they bound; each face
normal points into its space. Coplanar faces of the same orientation on a floor
share a ``plane`` group id, which is what a plane-based front end can tell apart.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import lie


class SpecInvalid(ValueError):
    pass


class UnreachableRoute(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class WorldSpec:
    floors: int = 1
    rows: int = 1
    cols: int = 2
    room_size: float = 5.0
    corridor_width: float = 2.0
    floor_height: float = 3.0
    wall_height: float = 2.5
    wall_thickness: float = 0.2
    stair_run: float = 2.5
    aliased: bool = False
    seed: int = 0
    point_density: float = 2.0

    def validate(self) -> None:
        if self.floors < 1 or self.rows < 1 or self.cols < 1:
            raise SpecInvalid("floor, row and column counts must be >= 1")
        if self.rows > 2:
            raise SpecInvalid("at most two room rows (one on each side of the corridor)")
        for name in ("room_size", "floor_height", "wall_height", "wall_thickness", "stair_run", "point_density"):
            if getattr(self, name) <= 0:
                raise SpecInvalid(f"{name} must be positive")
        if self.corridor_width < 0:
            raise SpecInvalid("corridor_width must be >= 0")
        if self.corridor_width == 0 and self.rows != 1:
            raise SpecInvalid("worlds without a corridor have a single room row")
        if self.wall_height >= self.floor_height:
            raise SpecInvalid("wall_height must be below floor_height")


@dataclass
class NoiseSpec:
    odom_trans: float = 0.01
    odom_rot: float = 0.002
    plane_normal: float = 0.005
    plane_distance: float = 0.01
    points: float = 0.01
    dropout: float = 0.0

    def validate(self) -> None:
        for name in ("odom_trans", "odom_rot", "plane_normal", "plane_distance", "points"):
            if getattr(self, name) < 0:
                raise SpecInvalid(f"{name} must be >= 0")
        if not 0 <= self.dropout < 1:
            raise SpecInvalid("dropout must lie in [0, 1)")


@dataclass
class Wall:
    id: int
    floor: int
    normal: np.ndarray
    distance: float
    lateral: tuple[float, float]
    z_range: tuple[float, float]
    space: int
    plane: int = -1

    @property
    def axis(self) -> int:
        return int(np.argmax(np.abs(self.normal)))


@dataclass
class Space:
    """Room or corridor; ``bounds = (x0, x1, y0, y1)`` of its free interior."""

    id: int
    floor: int
    kind: str
    bounds: tuple[float, float, float, float]
    wall_ids: list[int]
    row: int = -1
    col: int = -1

    @property
    def center_xy(self) -> np.ndarray:
        x0, x1, y0, y1 = self.bounds
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2])


@dataclass
class World:
    spec: WorldSpec
    walls: list[Wall]
    spaces: list[Space]
    points: dict[int, np.ndarray]
    length: float
    y_center: float

    def floor_z(self, f: int) -> float:
        return f * self.spec.floor_height

    def floor_bins(self) -> list[tuple[float, float]]:
        """Disjoint height interval holding each floor's wall points."""
        pad = 0.5 * (self.spec.floor_height - self.spec.wall_height)
        return [(self.floor_z(f) - pad, self.floor_z(f) + self.spec.wall_height + pad) for f in range(self.spec.floors)]

    def rooms(self, floor: int | None = None) -> list[Space]:
        return [s for s in self.spaces if s.kind == "room" and (floor is None or s.floor == floor)]

    def corridor(self, floor: int) -> Space | None:
        for s in self.spaces:
            if s.kind == "corridor" and s.floor == floor:
                return s
        return None

    def wall(self, wid: int) -> Wall:
        return self.walls[wid]

    def space_at(self, p: np.ndarray, tol: float = 1e-6) -> Space | None:
        f = int(np.round(p[2] / self.spec.floor_height))
        if abs(p[2] - self.floor_z(f)) > 0.25:
            return None
        for s in self.spaces:
            if s.floor != f:
                continue
            x0, x1, y0, y1 = s.bounds
            if x0 - tol <= p[0] <= x1 + tol and y0 - tol <= p[1] <= y1 + tol:
                return s
        return None

    def reference_cloud(self) -> np.ndarray:
        return np.concatenate([self.points[w.id] for w in self.walls], axis=0)


# -- world -----------------------------------------------------------------------


def _partition(rng, cols: int, size: float, thickness: float, jitter: bool) -> list[tuple[float, float]]:
    widths = np.full(cols, size)
    if jitter and cols > 1:
        widths = rng.uniform(0.75 * size, 1.25 * size, size=cols)
        widths *= cols * size / widths.sum()
    out, x = [], 0.0
    for w in widths:
        out.append((x, x + w))
        x += w + thickness
    return out


def _face_walls(space_bounds, floor: int, z0: float, height: float, sides: str):
    """Inner faces of a box; ``sides`` picks among W, E, S, N."""
    x0, x1, y0, y1 = space_bounds
    faces = {
        "W": (np.array([1.0, 0, 0]), x0, (y0, y1)),
        "E": (np.array([-1.0, 0, 0]), -x1, (y0, y1)),
        "S": (np.array([0, 1.0, 0]), y0, (x0, x1)),
        "N": (np.array([0, -1.0, 0]), -y1, (x0, x1)),
    }
    return [(faces[s][0], faces[s][1], faces[s][2], (z0, z0 + height)) for s in sides]


def generate_world(spec: WorldSpec) -> World:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    t, S, cw = spec.wall_thickness, spec.room_size, spec.corridor_width
    length = spec.cols * S + (spec.cols - 1) * t
    if cw > 0:
        row_y = [(cw + t, cw + t + S), (-t - S, -t)]
        y_center = cw / 2
    else:
        row_y = [(0.0, S)]
        y_center = S / 2
    walls: list[Wall] = []
    spaces: list[Space] = []
    base_parts = None
    for f in range(spec.floors):
        z0 = f * spec.floor_height
        parts = []
        for r in range(spec.rows):
            if spec.aliased:
                if base_parts is None:
                    base_parts = [_partition(rng, spec.cols, S, t, False) for _ in range(spec.rows)]
                parts.append(base_parts[r])
            else:
                parts.append(_partition(rng, spec.cols, S, t, True))
        if cw > 0:
            sp = Space(len(spaces), f, "corridor", (0.0, length, 0.0, cw), [])
            for n, d, lat, zr in _face_walls(sp.bounds, f, z0, spec.wall_height, "SN"):
                sp.wall_ids.append(len(walls))
                walls.append(Wall(len(walls), f, n, d, lat, zr, sp.id))
            spaces.append(sp)
        for r in range(spec.rows):
            y0, y1 = row_y[r]
            for c, (x0, x1) in enumerate(parts[r]):
                sp = Space(len(spaces), f, "room", (x0, x1, y0, y1), [], r, c)
                for n, d, lat, zr in _face_walls(sp.bounds, f, z0, spec.wall_height, "WESN"):
                    sp.wall_ids.append(len(walls))
                    walls.append(Wall(len(walls), f, n, d, lat, zr, sp.id))
                spaces.append(sp)
    # coplanar, same-facing faces on a floor form one plane group
    groups: dict[tuple, int] = {}
    for w in walls:
        key = (w.floor, tuple(np.round(w.normal, 6)), round(w.distance, 6))
        w.plane = groups.setdefault(key, len(groups))
    # world-anchored wall points; aliased floors reuse floor 0's samples
    points: dict[int, np.ndarray] = {}
    per_floor = len(walls) // spec.floors
    for w in walls:
        if spec.aliased and w.floor > 0:
            src = walls[w.id - w.floor * per_floor]
            points[w.id] = points[src.id] + np.array([0, 0, w.floor * spec.floor_height])
            continue
        lo, hi = w.lateral
        area = (hi - lo) * spec.wall_height
        n = max(int(round(area * spec.point_density)), 4)
        lat = rng.uniform(lo, hi, n)
        z = rng.uniform(*w.z_range, n)
        P = np.zeros((n, 3))
        ax = w.axis
        P[:, ax] = w.distance * w.normal[ax]
        P[:, 1 - ax] = lat
        P[:, 2] = z
        points[w.id] = P
    world = World(spec, walls, spaces, points, length, y_center)
    _self_check(world)
    return world


def _self_check(world: World) -> None:
    for room in world.rooms():
        ws = [world.walls[i] for i in room.wall_ids]
        for a, b in ((ws[0], ws[1]), (ws[2], ws[3])):
            if a.normal @ b.normal > -0.999:
                raise SpecInvalid("room walls are not opposing")


# -- trajectory -----------------------------------------------------------------


@dataclass
class Route:
    """Ordered visits: ``("room", floor, space_id)``, ``("stairs", from, to)``,
    ``("start", floor, x)`` or ``("corridor", floor, x)``."""

    items: list[tuple] = field(default_factory=list)


def default_route(world: World, revisit: bool = True) -> Route:
    """Tour every room of each floor, return to the first room, then climb."""
    items: list[tuple] = []
    F = world.spec.floors
    for f in range(F):
        rooms = sorted(world.rooms(f), key=lambda s: (s.bounds[0], s.row))
        if f % 2 == 1:
            rooms = rooms[::-1]
        if f == 0:
            items.append(("start", 0, 0.5 if world.corridor(0) is not None else float(rooms[0].center_xy[0])))
        items.extend(("room", f, s.id) for s in rooms)
        if revisit and len(rooms) > 1:
            items.append(("room", f, rooms[0].id))
        if f + 1 < F:
            items.append(("stairs", f, f + 1))
    return Route(items)


def _room_loop(world: World, room: Space, margin: float = 1.0) -> list[np.ndarray]:
    x0, x1, y0, y1 = room.bounds
    m = min(margin, (x1 - x0) / 3, (y1 - y0) / 3)
    cx = (x0 + x1) / 2
    near_y = y0 + m if room.row == 0 or world.corridor(room.floor) is None else y1 - m
    if world.corridor(room.floor) is None:
        near_y = (y0 + y1) / 2
    pts = [(cx, near_y)]
    if room.row == 1:
        loop = [(x1 - m, near_y), (x1 - m, y0 + m), (x0 + m, y0 + m), (x0 + m, near_y)]
    else:
        loop = [(x1 - m, near_y), (x1 - m, y1 - m), (x0 + m, y1 - m), (x0 + m, near_y)]
    if world.corridor(room.floor) is None:
        yc = near_y
        loop = [(x1 - m, yc), (x1 - m, y1 - m), (x0 + m, y1 - m), (x0 + m, y0 + m), (x1 - m, y0 + m), (x1 - m, yc)]
    pts += loop + [(cx, near_y)]
    return [np.array(p) for p in pts]


def _waypoints(world: World, route: Route) -> tuple[list[np.ndarray], list[bool]]:
    spec = world.spec
    yc = world.y_center
    L, t = world.length, spec.wall_thickness
    wps: list[np.ndarray] = []
    stair: list[bool] = []

    def add(xy, z, on_stairs=False):
        wps.append(np.array([xy[0], xy[1], z], dtype=float))
        stair.append(on_stairs)

    cur_floor = None
    for item in route.items:
        kind = item[0]
        if kind == "start":
            cur_floor = item[1]
            add((item[2], yc), world.floor_z(cur_floor))
            continue
        if cur_floor is None:
            raise UnreachableRoute("route must begin with a start item")
        if kind in ("room", "corridor") and item[1] != cur_floor:
            raise UnreachableRoute(f"{kind} on floor {item[1]} visited from floor {cur_floor} without stairs")
        z = world.floor_z(cur_floor)
        if kind == "corridor":
            add((item[2], yc), z)
        elif kind == "room":
            sp = next((s for s in world.spaces if s.id == item[2]), None)
            if sp is None or sp.kind != "room" or sp.floor != cur_floor:
                raise UnreachableRoute(f"unknown room {item[2]} on floor {cur_floor}")
            loop = _room_loop(world, sp)
            add((loop[0][0], yc), z)
            for p in loop:
                add(p, z)
            add((loop[0][0], yc), z)
        elif kind == "stairs":
            a, b = item[1], item[2]
            if a != cur_floor or abs(b - a) != 1 or not 0 <= b < spec.floors:
                raise UnreachableRoute(f"no stairway from floor {a} to floor {b}")
            za, zb = world.floor_z(a), world.floor_z(b)
            xa = L + t + 0.75
            xb = xa + 1.5
            run = spec.stair_run
            if b > a:
                path = [((xa, yc), za), ((xa, yc + run), 0.5 * (za + zb)), ((xb, yc + run), 0.5 * (za + zb)), ((xb, yc), zb)]
            else:
                path = [((xb, yc), za), ((xb, yc + run), 0.5 * (za + zb)), ((xa, yc + run), 0.5 * (za + zb)), ((xa, yc), zb)]
            add((L - 0.5, yc), za)
            for k, (xy, zz) in enumerate(path):
                add(xy, zz, on_stairs=0 < k < 3)
            add((L - 0.5, yc), zb)
            cur_floor = b
        else:
            raise UnreachableRoute(f"unknown route item {kind}")
    return wps, stair


def generate_trajectory(world: World, route: Route | None = None, spacing: float = 1.0):
    """Sample the piecewise-linear route every ``spacing`` meters of path length.

    Returns ``(poses, on_stairs)``; yaw follows the horizontal motion direction.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    route = route or default_route(world)
    wps, stair = _waypoints(world, route)
    if not wps:
        return [], []
    # drop repeated waypoints
    keep_w, keep_s = [wps[0]], [stair[0]]
    for w, s in zip(wps[1:], stair[1:]):
        if np.linalg.norm(w - keep_w[-1]) > 1e-9:
            keep_w.append(w)
            keep_s.append(s)
    wps, stair = keep_w, keep_s
    seg_len = [float(np.linalg.norm(b - a)) for a, b in zip(wps[:-1], wps[1:])]
    # a segment is on the stairs when it climbs or joins two stair waypoints (landing)
    seg_stair = [abs(b[2] - a[2]) > 1e-9 or (sa and sb) for a, b, sa, sb in zip(wps[:-1], wps[1:], stair[:-1], stair[1:])]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    samples = np.arange(0.0, cum[-1] + 1e-9, spacing)
    poses, flags = [], []
    yaw = 0.0
    for s in samples:
        if not seg_len:
            poses.append(lie.yaw_pose(*wps[0], yaw))
            flags.append(False)
            continue
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_len) - 1))
        u = (s - cum[i]) / seg_len[i]
        p = wps[i] + u * (wps[i + 1] - wps[i])
        d = wps[i + 1] - wps[i]
        if np.hypot(d[0], d[1]) > 1e-9:
            yaw = float(np.arctan2(d[1], d[0]))
        poses.append(lie.yaw_pose(p[0], p[1], p[2], yaw))
        flags.append(bool(seg_stair[i]))
    return poses, flags


# -- sensor stream --------------------------------------------------------------


@dataclass
class PlaneObservation:
    normal: np.ndarray
    distance: float
    wall_id: int


@dataclass
class FrameRecord:
    stamp: float
    true_pose: np.ndarray
    odom_pose: np.ndarray
    planes: list[PlaneObservation]
    points: np.ndarray
    true_floor: int
    on_stairs: bool


def _face_distance(w: Wall, p: np.ndarray) -> float:
    """Horizontal distance from ``p`` to the wall's finite face."""
    ax = w.axis
    lat = p[1 - ax]
    lo, hi = w.lateral
    dl = max(lo - lat, 0.0, lat - hi)
    dn = abs(w.normal[ax] * p[ax] - w.distance)
    return float(np.hypot(dl, dn))


def visible_walls(world: World, pose: np.ndarray, sensor_range: float = 10.0) -> list[Wall]:
    p = pose[:3, 3]
    space = world.space_at(p)
    if space is None:
        return []
    return [world.walls[i] for i in space.wall_ids if _face_distance(world.walls[i], p) <= sensor_range]


def emit_frames(world: World, poses, on_stairs=None, noise: NoiseSpec | None = None, sensor_range: float = 10.0, seed: int | None = None) -> list[FrameRecord]:
    noise = noise or NoiseSpec()
    noise.validate()
    if on_stairs is None:
        on_stairs = [False] * len(poses)
    seed = world.spec.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    frames: list[FrameRecord] = []
    odom = None
    H = world.spec.floor_height
    for i, T in enumerate(poses):
        if odom is None or (noise.odom_trans == 0 and noise.odom_rot == 0):
            odom = T.copy()
        else:
            Z = lie.relative(poses[i - 1], T)
            eps = np.r_[rng.normal(scale=noise.odom_rot, size=3), rng.normal(scale=noise.odom_trans, size=3)]
            odom = lie.orthonormalize_pose(odom @ Z @ lie.exp_pose(eps))
        Rt, t = T[:3, :3].T, T[:3, 3]
        planes: list[PlaneObservation] = []
        clouds = []
        for w in visible_walls(world, T, sensor_range):
            pts = world.points[w.id]
            near = np.linalg.norm((pts - t)[:, :2], axis=1) <= sensor_range
            if np.any(near):
                local = (pts[near] - t) @ Rt.T
                clouds.append(local + rng.normal(scale=noise.points, size=local.shape))
            if noise.dropout > 0 and rng.random() < noise.dropout:
                continue
            n_s = Rt @ w.normal
            d_s = w.distance - w.normal @ t
            if noise.plane_normal > 0:
                n_s = lie.so3_exp(rng.normal(scale=noise.plane_normal, size=3)) @ n_s
            d_s = d_s + rng.normal(scale=noise.plane_distance)
            planes.append(PlaneObservation(n_s / np.linalg.norm(n_s), float(d_s), w.id))
        points = np.concatenate(clouds, axis=0) if clouds else np.zeros((0, 3))
        frames.append(
            FrameRecord(float(i), T.copy(), odom.copy(), planes, points, int(np.round(t[2] / H)), bool(on_stairs[i]))
        )
    return frames


# -- JSON lines IO ----------------------------------------------------------------


def _r(x):
    if isinstance(x, np.ndarray):
        return [_r(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_r(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(format(float(x), ".9g"))
    if isinstance(x, np.integer):
        return int(x)
    return x


def frame_to_dict(fr: FrameRecord) -> dict:
    return {
        "stamp": _r(fr.stamp),
        "true_pose": _r(fr.true_pose),
        "odom_pose": _r(fr.odom_pose),
        "planes": [{"normal": _r(p.normal), "distance": _r(p.distance), "wall_id": p.wall_id} for p in fr.planes],
        "points": _r(fr.points),
        "true_floor": fr.true_floor,
        "on_stairs": fr.on_stairs,
    }


def _pose(v, name, lineno) -> np.ndarray:
    T = np.asarray(v, dtype=float)
    if T.shape != (4, 4):
        raise SchemaError(f"line {lineno}: field {name} must be a 4x4 matrix")
    T = lie.orthonormalize_pose(T)
    return T


def frame_from_dict(d: dict, lineno: int = 0) -> FrameRecord:
    try:
        planes = []
        for p in d["planes"]:
            n = np.asarray(p["normal"], dtype=float)
            planes.append(PlaneObservation(n / np.linalg.norm(n), float(p["distance"]), int(p.get("wall_id", -1))))
        pts = np.asarray(d["points"], dtype=float).reshape(-1, 3)
        return FrameRecord(
            float(d["stamp"]),
            _pose(d["true_pose"], "true_pose", lineno) if d.get("true_pose") is not None else np.eye(4),
            _pose(d["odom_pose"], "odom_pose", lineno),
            planes,
            pts,
            int(d.get("true_floor", -1)),
            bool(d.get("on_stairs", False)),
        )
    except KeyError as exc:
        raise SchemaError(f"line {lineno}: missing field {exc.args[0]}") from exc
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {lineno}: {exc}") from exc


def write_frames(frames, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fr in frames:
            fh.write(json.dumps(frame_to_dict(fr), separators=(",", ":")) + "\n")


def read_frames(path) -> list[FrameRecord]:
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: {exc.msg}") from exc
            frames.append(frame_from_dict(d, lineno))
    return frames


def world_to_dict(world: World, frames=None, noise: NoiseSpec | None = None) -> dict:
    d = {
        "spec": asdict(world.spec),
        "length": _r(world.length),
        "y_center": _r(world.y_center),
        "floor_bins": _r(world.floor_bins()),
        "walls": [
            {
                "id": w.id,
                "floor": w.floor,
                "normal": _r(w.normal),
                "distance": _r(w.distance),
                "lateral": _r(w.lateral),
                "z_range": _r(w.z_range),
                "space": w.space,
                "plane": w.plane,
                "points": _r(world.points[w.id]),
            }
            for w in world.walls
        ],
        "spaces": [
            {"id": s.id, "floor": s.floor, "kind": s.kind, "bounds": _r(s.bounds), "wall_ids": s.wall_ids, "row": s.row, "col": s.col}
            for s in world.spaces
        ],
    }
    if noise is not None:
        d["noise"] = asdict(noise)
    if frames is not None:
        d["trajectory"] = [{"stamp": _r(f.stamp), "pose": _r(f.true_pose), "floor": f.true_floor, "on_stairs": f.on_stairs} for f in frames]
    return d


def world_from_dict(d: dict) -> World:
    spec = WorldSpec(**d["spec"])
    walls = [
        Wall(w["id"], w["floor"], np.asarray(w["normal"], float), float(w["distance"]), tuple(w["lateral"]), tuple(w["z_range"]), w["space"], w["plane"])
        for w in d["walls"]
    ]
    spaces = [Space(s["id"], s["floor"], s["kind"], tuple(s["bounds"]), list(s["wall_ids"]), s["row"], s["col"]) for s in d["spaces"]]
    points = {w["id"]: np.asarray(w["points"], float).reshape(-1, 3) for w in d["walls"]}
    return World(spec, walls, spaces, points, float(d["length"]), float(d["y_center"]))


def write_dataset(out_dir, world: World, frames, noise: NoiseSpec | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fpath = out / "frames.jsonl"
    wpath = out / "world.json"
    write_frames(frames, fpath)
    with open(wpath, "w", encoding="utf-8") as fh:
        json.dump(world_to_dict(world, frames, noise), fh, separators=(",", ":"))
    return fpath, wpath


def read_world(path) -> tuple[World, dict]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return world_from_dict(d), d


def simulate(spec: WorldSpec, noise: NoiseSpec | None = None, route: Route | None = None, spacing: float = 1.0, sensor_range: float = 10.0):
    """World, frames and route in one call (the CLI's ``simulate`` path)."""
    world = generate_world(spec)
    poses, stairs = generate_trajectory(world, route, spacing)
    frames = emit_frames(world, poses, stairs, noise, sensor_range)
    return world, frames
