"""Frame-by-frame orchestration of front end, loop closure and the optimization levels."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lie
from .frontend import (
    FrontendConfig,
    InsufficientWalls,
    NoValidPair,
    StairEvent,
    StairwayState,
    associate_plane,
    detect_floor_center,
    detect_rooms,
    room_containing,
    segment_room_keyframes,
    update_floor_node,
    update_stairway,
)
from .graph import EdgeKind, GraphError, RoomKind, SituationalGraph
from .loopclosure import LoopConfig, Proxy, commit_closure, try_closure
from .optimizer import (
    Level,
    OptimizationConfig,
    OptimizationReport,
    batch_optimize,
    floor_global_optimize,
    local_optimize,
    room_local_optimize,
)
from .simulator import FrameRecord, SchemaError, read_frames

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    keyframe_gate: float = 1.0
    loop_gate: str = "floor"
    room_marginalization: bool = True
    mode: str = "hier"
    odom_sigma_trans: float = 0.01
    odom_sigma_rot: float = 0.002
    mme_radius: float = 0.3
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    loopclosure: LoopConfig = field(default_factory=LoopConfig)
    optimizer: OptimizationConfig = field(default_factory=OptimizationConfig)

    def __post_init__(self):
        if self.keyframe_gate <= 0:
            raise ConfigError("keyframe_gate must be positive")
        if self.mode not in ("hier", "batch"):
            raise ConfigError("mode must be 'hier' or 'batch'")
        if self.loop_gate not in ("floor", "off"):
            raise ConfigError("loop_gate must be 'floor' or 'off'")
        if self.odom_sigma_trans <= 0 or self.odom_sigma_rot <= 0:
            raise ConfigError("odometry sigmas must be positive")
        # copy so configs derived with dataclasses.replace never share a gate
        self.loopclosure = dataclasses.replace(self.loopclosure, gate=self.loop_gate)

    @property
    def batch_mode(self) -> bool:
        return self.mode == "batch"

    def odom_information(self) -> np.ndarray:
        return np.diag([self.odom_sigma_rot**-2] * 3 + [self.odom_sigma_trans**-2] * 3)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        """Build from a flat/tabled mapping; tables ``frontend``, ``loopclosure``, ``optimizer``."""
        sub = {"frontend": FrontendConfig, "loopclosure": LoopConfig, "optimizer": OptimizationConfig}
        top = {f.name for f in dataclasses.fields(cls)} - set(sub)
        kwargs: dict = {}
        for key, value in d.items():
            if key in sub:
                if not isinstance(value, dict):
                    raise ConfigError(f"[{key}] must be a table")
                names = {f.name for f in dataclasses.fields(sub[key])}
                bad = set(value) - names
                if bad:
                    raise ConfigError(f"unknown keys in [{key}]: {', '.join(sorted(bad))}")
                try:
                    kwargs[key] = sub[key](**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{key}]: {exc}") from exc
            elif key in top:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_toml(cls, path) -> "PipelineConfig":
        import tomli

        try:
            with open(path, "rb") as fh:
                return cls.from_dict(tomli.load(fh))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class Event:
    stamp: float
    kind: str
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"stamp": self.stamp, "kind": self.kind, **self.data}


@dataclass
class PipelineState:
    graph: SituationalGraph = field(default_factory=SituationalGraph)
    stairs: StairwayState | None = None
    floor: int | None = None
    last_kf: int | None = None
    last_odom: np.ndarray | None = None
    room: int | None = None
    gate_hold: int = 0
    visited: list[int] = field(default_factory=list)
    pending: list = field(default_factory=list)
    # marginalized keyframe -> (anchor keyframe, pose relative to the anchor, stamp, points, floor)
    anchors: dict = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)
    reports: list[OptimizationReport] = field(default_factory=list)
    frames_seen: int = 0


class Pipeline:
    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        fc = self.config.frontend
        self.state = PipelineState(stairs=StairwayState(fc.stair_queue, fc.stair_slope))

    # -- per frame ------------------------------------------------------------

    def step(self, frame: FrameRecord) -> list[Event]:
        st, cfg, g = self.state, self.config, self.state.graph
        st.frames_seen += 1
        out: list[Event] = []

        def emit(kind, **data):
            ev = Event(frame.stamp, kind, data)
            out.append(ev)
            st.events.append(ev)

        # keyframe
        if st.last_kf is not None:
            rel = lie.relative(st.last_odom, frame.odom_pose)
            if np.linalg.norm(rel[:3, 3]) < 0.75 * cfg.keyframe_gate:
                return out
            pose = lie.orthonormalize_pose(g.keyframes[st.last_kf].pose @ rel)
        else:
            rel = None
            pose = frame.odom_pose.copy()
        kf = g.add_keyframe(pose, frame.stamp, frame.points, frame.odom_pose)
        if rel is not None:
            g.add_edge(EdgeKind.ODOM, (st.last_kf, kf), rel, cfg.odom_information())
        if st.floor is None:
            z = float(pose[2, 3])
            h = cfg.frontend.floor_half_height
            st.floor = g.add_floor([pose[0, 3], pose[1, 3], z], z - h, z + h, 0, z)
            st.visited.append(st.floor)
        st.last_kf, st.last_odom = kf, frame.odom_pose.copy()
        emit("KEYFRAME", keyframe=kf)

        # planes
        new_walls = []
        if st.stairs.active:
            st.pending.append((kf, frame.planes))
        else:
            g.assign_floor(kf, st.floor)
            new_walls += self._associate(kf, frame.planes, st.floor)

        # stairs
        upd = update_stairway(st.stairs, g, kf, cfg.frontend)
        revisit_floor = False
        if upd.event is StairEvent.STAIR_START:
            emit("STAIR_START", keyframe=kf, direction=upd.direction)
        elif upd.event is StairEvent.FLOOR_CHANGE:
            revisit_floor = upd.reentered
            st.floor = upd.floor_id
            st.visited.append(st.floor)
            st.gate_hold = 1
            st.room = None
            emit("FLOOR_CHANGE", floor=st.floor, direction=upd.direction, reentered=upd.reentered)
            for k, planes in st.pending:
                if k in g.keyframes:
                    new_walls += self._associate(k, planes, st.floor)
            st.pending = []
        for w in new_walls:
            emit("WALL_NEW", wall=w)

        # rooms
        floor_global = False
        room_jobs: list[int] = []
        if not st.stairs.active and st.floor is not None:
            try:
                cand = detect_floor_center(g, st.floor, cfg.frontend.t_n)
                if update_floor_node(g, st.floor, cand, cfg.frontend):
                    emit("FLOOR_CENTER", floor=st.floor, walls=[*cand.x_pair, *cand.y_pair])
            except (InsufficientWalls, NoValidPair):
                pass
            det = detect_rooms(g, st.floor, cfg.frontend)
            for keep, drop in det.merged_walls:
                emit("WALL_MERGE", keep=keep, drop=drop)
            if det.merged_walls:
                floor_global = True
            p = g.keyframes[kf].position
            here = room_containing(g, p, st.floor)
            for r in det.new_rooms:
                emit("ROOM_NEW", room=r, room_kind=g.rooms[r].kind.value)
                if g.rooms[r].kind is RoomKind.FOUR_WALL and r != here:
                    room_jobs.append(r)
            if st.room is not None and st.room != here and st.room in g.rooms:
                room_jobs.append(st.room)
            st.room = here

        # closure
        gate_open = not st.stairs.active and st.gate_hold == 0
        if st.gate_hold > 0 and upd.event is not StairEvent.FLOOR_CHANGE:
            st.gate_hold -= 1
        closure_revisit = False
        proxies = self._proxies()
        try:
            lc = try_closure(g, kf, cfg.loopclosure, gate_open, proxies)
        except GraphError as exc:
            log.warning("loop closure skipped: %s", exc)
            lc = None
        if lc is not None:
            if lc.accepted(cfg.loopclosure):
                eid = commit_closure(g, lc, cfg.loopclosure, proxies)
                r = lc.registration
                ms = g.keyframes[lc.match].stamp if lc.match in g.keyframes else st.anchors[lc.match][2]
                emit("LOOP_CLOSURE", edge=eid, query=kf, match=lc.match, match_stamp=ms, fitness=r.fitness, inliers=r.inlier_fraction)
                floor_global = True
                fm = (g.keyframes[lc.match] if lc.match in g.keyframes else proxies[lc.match]).floor_id
                closure_revisit = fm != g.keyframes[kf].floor_id or st.visited.count(st.floor) > 1
            elif lc.registration is not None:
                emit("LOOP_REJECTED", query=kf, match=lc.match, fitness=lc.registration.fitness, inliers=lc.registration.inlier_fraction)

        # optimizations
        if cfg.batch_mode:
            self._run(emit, batch_optimize, g, cfg.optimizer)
            for r in room_jobs:
                if r in g.rooms:
                    segment_room_keyframes(g, r)
            return out
        self._run(emit, local_optimize, g, cfg.optimizer)
        if floor_global:
            fid = g.keyframes[kf].floor_id if g.keyframes[kf].floor_id is not None else st.floor
            revisit = closure_revisit or revisit_floor or st.visited.count(fid) > 1
            self._run(emit, floor_global_optimize, g, fid, revisit, cfg.optimizer)
        for r in dict.fromkeys(room_jobs):
            if r not in g.rooms or g.rooms[r].kind is not RoomKind.FOUR_WALL:
                continue
            members = segment_room_keyframes(g, r)
            if not members:
                continue
            self._run(emit, room_local_optimize, g, r, cfg.optimizer, cfg.room_marginalization, self._remember)
        return out

    def _associate(self, kf: int, planes, floor: int) -> list[int]:
        g = self.state.graph
        pose = g.keyframes[kf].pose
        created = []
        for obs in planes:
            wid, new = associate_plane(g, pose, kf, (obs.normal, obs.distance), floor, self.config.frontend, g.keyframes[kf].points)
            if new:
                created.append(wid)
        return created

    def _remember(self, keep: int, seg) -> None:
        g = self.state.graph
        Tk = g.keyframes[keep].pose
        for k in seg:
            node = g.keyframes[k]
            self.state.anchors[k] = (keep, lie.relative(Tk, node.pose), node.stamp, node.points, node.floor_id)

    def _run(self, emit, fn, *args) -> None:
        try:
            rep = fn(*args)
        except (GraphError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("%s skipped: %s", fn.__name__, exc)
            emit("OPTIMIZE_FAILED", level=fn.__name__, error=str(exc))
            return
        self.state.reports.append(rep)
        emit("OPTIMIZE", level=rep.level, report=dataclasses.asdict(rep))
        g = self.state.graph
        if self.state.last_kf in g.keyframes:
            node = g.keyframes[self.state.last_kf]
            g.map_odom.transform = node.pose @ lie.inverse(node.odom)

    # -- outputs --------------------------------------------------------------

    def _resolve(self, k: int) -> tuple[int, np.ndarray]:
        """Live keyframe carrying marginalized ``k`` and the offset from it."""
        keep, rel = self.state.anchors[k][:2]
        if keep in self.state.graph.keyframes:
            return keep, rel
        base, off = self._resolve(keep)
        return base, off @ rel

    def _anchor_pose(self, k: int) -> np.ndarray:
        base, off = self._resolve(k)
        return self.state.graph.keyframes[base].pose @ off

    def _proxies(self) -> dict[int, Proxy]:
        out = {}
        for k, (_, _, _, pts, floor) in self.state.anchors.items():
            base, off = self._resolve(k)
            out[k] = Proxy(self.state.graph.keyframes[base].pose @ off, floor, pts, base, off)
        return out

    def trajectory(self, include_marginalized: bool = True) -> dict[float, np.ndarray]:
        """Keyframe poses keyed by stamp; marginalized keyframes ride on their anchors."""
        g = self.state.graph
        out = {kf.stamp: kf.pose.copy() for kf in g.keyframes.values()}
        if include_marginalized:
            for k, (_, _, stamp, _, _) in self.state.anchors.items():
                out[stamp] = self._anchor_pose(k)
        return dict(sorted(out.items()))

    def map_cloud(self) -> np.ndarray:
        g = self.state.graph
        parts = [lie.transform_points(kf.pose, kf.points) for kf in g.keyframes.values() if len(kf.points)]
        for k, (_, _, _, pts, _) in self.state.anchors.items():
            if len(pts):
                parts.append(lie.transform_points(self._anchor_pose(k), pts))
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))

    def timing(self) -> tuple[dict, dict]:
        ms: dict[str, float] = {}
        counts: dict[str, int] = {}
        for r in self.state.reports:
            ms[r.level] = ms.get(r.level, 0.0) + r.wall_ms
            counts[r.level] = counts.get(r.level, 0) + 1
        return ms, counts

    def total_ms(self) -> float:
        return float(sum(r.wall_ms for r in self.state.reports))


@dataclass
class RunResult:
    pipeline: Pipeline
    frames: list[FrameRecord]

    @property
    def graph(self) -> SituationalGraph:
        return self.pipeline.state.graph

    @property
    def events(self) -> list[Event]:
        return self.pipeline.state.events

    @property
    def reports(self) -> list[OptimizationReport]:
        return self.pipeline.state.reports

    def trajectory(self) -> dict[float, np.ndarray]:
        return self.pipeline.trajectory()

    def count(self, kind: str) -> int:
        return sum(e.kind == kind for e in self.events)

    def levels(self) -> dict[str, float]:
        return self.pipeline.timing()[0]


def load_frames(dataset) -> list[FrameRecord]:
    p = Path(dataset)
    if p.is_dir():
        p = p / "frames.jsonl"
    if not p.exists():
        raise FileNotFoundError(str(p))
    return read_frames(p)


def run(dataset, config: PipelineConfig | None = None) -> RunResult:
    """Run the pipeline over a dataset path or an in-memory frame list."""
    frames = dataset if isinstance(dataset, list) else load_frames(dataset)
    pipe = Pipeline(config)
    for fr in frames:
        pipe.step(fr)
    return RunResult(pipe, frames)


__all__ = [
    "ConfigError",
    "Event",
    "Level",
    "Pipeline",
    "PipelineConfig",
    "PipelineState",
    "RunResult",
    "SchemaError",
    "load_frames",
    "run",
]
