"""Traffic-scene domain types, validation and the ``sf-scene/1`` record format.

A scene file is UTF-8 text with one JSON record per line. Records are written
with sorted keys and canonically ordered collections so that equal scenes
always produce identical bytes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional

SCHEMA = "sf-scene/1"

T_OBS = 5
T_FUTURE = 12
N_POSE = 10
LANE_POSE_SPACING_MAX = 2.0
FRAME_INDICES = (-4, -3, -2, -1, 0)

AGENT_TYPES = ("vehicle", "human")
LANE_EDGE_TYPES = ("successor", "proximal")
RELATIONS = ("longitudinal", "lateral", "intersecting", "pedestrian")


def wrap_angle(theta: float) -> float:
    """Map an angle to [-pi, pi)."""
    out = (theta + math.pi) % (2.0 * math.pi) - math.pi
    if out >= math.pi:
        out -= 2.0 * math.pi
    if out < -math.pi:
        out = -math.pi
    return out


@dataclass(frozen=True)
class LanePose:
    x: float
    y: float
    theta: float
    stopline_flag: bool = False
    crosswalk_flag: bool = False

    def features(self) -> list[float]:
        return [self.x, self.y, self.theta, float(self.stopline_flag), float(self.crosswalk_flag)]


@dataclass(frozen=True)
class LaneNode:
    id: str
    poses: tuple[LanePose, ...]

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))


@dataclass(frozen=True)
class LaneEdge:
    src: str
    dst: str
    edge_type: str


@dataclass(frozen=True)
class LaneGraph:
    nodes: tuple[LaneNode, ...]
    edges: tuple[LaneEdge, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.id)))
        object.__setattr__(
            self, "edges", tuple(sorted(self.edges, key=lambda e: (e.src, e.dst, e.edge_type)))
        )

    def node(self, node_id: str) -> LaneNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)


@dataclass(frozen=True)
class AgentState:
    x: float = 0.0
    y: float = 0.0
    vel: float = 0.0
    acc: float = 0.0
    yaw_rate: float = 0.0
    present: bool = True

    def features(self) -> list[float]:
        return [self.x, self.y, self.vel, self.acc, self.yaw_rate]


ABSENT = AgentState(present=False)


@dataclass(frozen=True)
class AgentTrack:
    id: str
    agent_type: str
    states: tuple[AgentState, ...]

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))

    def present_mask(self) -> list[bool]:
        return [s.present for s in self.states]


@dataclass(frozen=True)
class InteractionEdge:
    src_id: str
    dst_id: str
    relation: str
    distance: float
    path_distance: Optional[float]
    edge_probability: float

    def attributes(self) -> list[float]:
        # MISSING path distance enters the model as 0.0
        pd = 0.0 if self.path_distance is None else self.path_distance
        return [self.distance, pd, self.edge_probability]


@dataclass(frozen=True)
class InteractionGraph:
    frame_index: int
    agent_ids: tuple[tuple[str, str], ...] = ()
    edges: tuple[InteractionEdge, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "agent_ids", tuple(sorted(tuple(a) for a in self.agent_ids)))
        object.__setattr__(
            self, "edges", tuple(sorted(self.edges, key=lambda e: (e.src_id, e.dst_id, e.relation)))
        )

    def agent_type(self, agent_id: str) -> str:
        for aid, atype in self.agent_ids:
            if aid == agent_id:
                return atype
        raise KeyError(agent_id)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    lane_graph: LaneGraph
    tracks: tuple[AgentTrack, ...]
    interaction_graphs: tuple[InteractionGraph, ...]
    target_id: str
    future: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(sorted(self.tracks, key=lambda t: t.id)))
        object.__setattr__(
            self,
            "interaction_graphs",
            tuple(sorted(self.interaction_graphs, key=lambda g: g.frame_index)),
        )
        object.__setattr__(self, "future", tuple((float(x), float(y)) for x, y in self.future))

    def track(self, agent_id: str) -> AgentTrack:
        for t in self.tracks:
            if t.id == agent_id:
                return t
        raise KeyError(agent_id)

    @property
    def target(self) -> AgentTrack:
        return self.track(self.target_id)

    def has_relations(self) -> bool:
        return any(g.edges for g in self.interaction_graphs)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    type_name: str
    field: str
    rule: str

    def __str__(self):
        return f"{self.type_name}.{self.field}: {self.rule}"


class SceneValidationError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class SceneParseError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


def _finite(*values) -> bool:
    return all(isinstance(v, (int, float)) and math.isfinite(v) for v in values)


def _validate_lane_graph(g: LaneGraph, spacing_max: float, out: list[Violation]):
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        out.append(Violation("LaneGraph", "nodes", "node ids must be unique"))
    for n in g.nodes:
        if not 1 <= len(n.poses) <= N_POSE:
            out.append(Violation("LaneNode", "poses", f"node {n.id!r} needs 1..{N_POSE} valid poses"))
        for i, p in enumerate(n.poses):
            if not _finite(p.x, p.y, p.theta):
                out.append(Violation("LanePose", "x/y/theta", f"node {n.id!r} pose {i} not finite"))
                continue
            if not -math.pi <= p.theta < math.pi:
                out.append(Violation("LanePose", "theta", f"node {n.id!r} pose {i} outside [-pi, pi)"))
            if not isinstance(p.stopline_flag, bool) or not isinstance(p.crosswalk_flag, bool):
                out.append(Violation("LanePose", "flags", f"node {n.id!r} pose {i} flags must be booleans"))
        for i in range(1, len(n.poses)):
            a, b = n.poses[i - 1], n.poses[i]
            if _finite(a.x, a.y, b.x, b.y) and math.hypot(b.x - a.x, b.y - a.y) > spacing_max:
                out.append(
                    Violation("LaneNode", "poses", f"node {n.id!r} poses {i - 1},{i} farther than {spacing_max} m")
                )
    known = set(ids)
    succ: dict[str, list[str]] = {}
    for e in g.edges:
        if e.edge_type not in LANE_EDGE_TYPES:
            out.append(Violation("LaneGraph", "edges", f"unknown edge_type {e.edge_type!r}"))
        if e.src not in known or e.dst not in known:
            out.append(Violation("LaneGraph", "edges", f"edge {e.src!r}->{e.dst!r} endpoint not a node"))
        if e.src == e.dst:
            out.append(Violation("LaneGraph", "edges", f"self-loop on {e.src!r}"))
        if e.edge_type == "successor":
            succ.setdefault(e.src, []).append(e.dst)
    if _has_cycle(succ):
        out.append(Violation("LaneGraph", "edges", "successor edges must form a DAG"))


def _has_cycle(adj: dict[str, list[str]]) -> bool:
    state: dict[str, int] = {}
    for root in adj:
        if state.get(root):
            continue
        stack = [(root, iter(adj.get(root, ())))]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                return True
            elif not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(adj.get(nxt, ()))))
    return False


def _validate_track(t: AgentTrack, out: list[Violation]):
    if t.agent_type not in AGENT_TYPES:
        out.append(Violation("AgentTrack", "agent_type", f"track {t.id!r} type {t.agent_type!r} unknown"))
    if len(t.states) != T_OBS:
        out.append(Violation("AgentTrack", "states", f"track {t.id!r} needs exactly {T_OBS} states"))
    present = t.present_mask()
    if present and not present[-1]:
        out.append(Violation("AgentTrack", "states", f"track {t.id!r} must be present at t=0"))
    first = present.index(True) if any(present) else len(present)
    if any(not p for p in present[first:]):
        out.append(Violation("AgentTrack", "states", f"track {t.id!r} present flags must be a contiguous suffix"))
    for i, s in enumerate(t.states):
        if not _finite(s.x, s.y, s.vel, s.acc, s.yaw_rate):
            out.append(Violation("AgentState", "x/y/vel/acc/yaw_rate", f"track {t.id!r} state {i} not finite"))
            continue
        if s.vel < 0:
            out.append(Violation("AgentState", "vel", f"track {t.id!r} state {i} has negative velocity"))
        if not s.present and any(v != 0.0 for v in s.features()):
            out.append(Violation("AgentState", "present", f"track {t.id!r} state {i} absent but not zero-filled"))


def _validate_edge(e: InteractionEdge, where: str, out: list[Violation]):
    if e.relation not in RELATIONS:
        out.append(Violation("InteractionEdge", "relation", f"{where}: unknown relation {e.relation!r}"))
    if e.src_id == e.dst_id:
        out.append(Violation("InteractionEdge", "src_id", f"{where}: src_id equals dst_id"))
    if not _finite(e.distance) or e.distance < 0:
        out.append(Violation("InteractionEdge", "distance", f"{where}: distance must be finite and >= 0"))
    if e.relation == "pedestrian":
        if e.path_distance is not None:
            out.append(
                Violation("InteractionEdge", "path_distance", f"{where}: pedestrian edge must have MISSING path_distance")
            )
    elif e.path_distance is None:
        out.append(Violation("InteractionEdge", "path_distance", f"{where}: {e.relation} edge needs path_distance"))
    elif not _finite(e.path_distance) or e.path_distance < 0:
        out.append(Violation("InteractionEdge", "path_distance", f"{where}: path_distance must be finite and >= 0"))
    if not _finite(e.edge_probability) or not 0.0 <= e.edge_probability <= 1.0:
        out.append(Violation("InteractionEdge", "edge_probability", f"{where}: edge_probability outside [0, 1]"))


def validate_scene(scene: Scene, *, spacing_max: float = LANE_POSE_SPACING_MAX) -> list[Violation]:
    """Return every invariant the scene breaks; empty when it is well formed."""
    out: list[Violation] = []
    _validate_lane_graph(scene.lane_graph, spacing_max, out)

    ids = [t.id for t in scene.tracks]
    if len(set(ids)) != len(ids):
        out.append(Violation("Scene", "tracks", "track ids must be unique"))
    tracks = {t.id: t for t in scene.tracks}
    for t in scene.tracks:
        _validate_track(t, out)

    target = tracks.get(scene.target_id)
    if target is None:
        out.append(Violation("Scene", "target_id", f"target {scene.target_id!r} has no track"))
    else:
        if target.agent_type != "vehicle":
            out.append(Violation("Scene", "target_id", "target must be a vehicle"))
        if not all(target.present_mask()):
            out.append(Violation("Scene", "target_id", "target must be present at all observed frames"))

    if len(scene.future) != T_FUTURE:
        out.append(Violation("Scene", "future", f"future must have {T_FUTURE} points (got {len(scene.future)})"))
    elif not all(_finite(x, y) for x, y in scene.future):
        out.append(Violation("Scene", "future", "future positions must be finite"))

    frames = [g.frame_index for g in scene.interaction_graphs]
    if sorted(frames) != list(FRAME_INDICES):
        out.append(Violation("Scene", "interaction_graphs", f"need one graph per frame {FRAME_INDICES} (got {frames})"))
    for g in scene.interaction_graphs:
        where = f"frame {g.frame_index}"
        members = dict(g.agent_ids)
        if len(members) != len(g.agent_ids):
            out.append(Violation("InteractionGraph", "agent_ids", f"{where}: duplicate agent id"))
        for aid, atype in g.agent_ids:
            t = tracks.get(aid)
            if t is None:
                out.append(Violation("InteractionGraph", "agent_ids", f"{where}: agent {aid!r} has no track"))
                continue
            if atype != t.agent_type:
                out.append(Violation("InteractionGraph", "agent_ids", f"{where}: agent {aid!r} type mismatch"))
            k = g.frame_index + T_OBS - 1
            if 0 <= k < len(t.states) and not t.states[k].present:
                out.append(Violation("InteractionGraph", "agent_ids", f"{where}: agent {aid!r} not present"))
        seen = set()
        for e in g.edges:
            _validate_edge(e, where, out)
            if e.src_id not in members or e.dst_id not in members:
                out.append(
                    Violation("InteractionGraph", "edges", f"{where}: edge {e.src_id!r}->{e.dst_id!r} endpoint not in agent_ids")
                )
            if (e.src_id, e.dst_id) in seen:
                out.append(Violation("InteractionGraph", "edges", f"{where}: more than one edge {e.src_id!r}->{e.dst_id!r}"))
            seen.add((e.src_id, e.dst_id))
    return out


def check_scene(scene: Scene) -> Scene:
    violations = validate_scene(scene)
    if violations:
        raise SceneValidationError(violations)
    return scene


# ---------------------------------------------------------------------------
# serialization


def scene_to_record(scene: Scene) -> dict:
    lg = scene.lane_graph
    return {
        "schema": SCHEMA,
        "scene_id": scene.scene_id,
        "lane_graph": {
            "nodes": [
                {
                    "id": n.id,
                    "poses": [
                        {
                            "x": float(p.x),
                            "y": float(p.y),
                            "theta": float(p.theta),
                            "stopline_flag": p.stopline_flag,
                            "crosswalk_flag": p.crosswalk_flag,
                        }
                        for p in n.poses
                    ],
                }
                for n in lg.nodes
            ],
            "edges": [{"src": e.src, "dst": e.dst, "edge_type": e.edge_type} for e in lg.edges],
        },
        "tracks": [
            {
                "id": t.id,
                "agent_type": t.agent_type,
                "states": [
                    {"x": float(s.x), "y": float(s.y), "vel": float(s.vel), "acc": float(s.acc), "yaw_rate": float(s.yaw_rate),
                     "present": s.present}
                    for s in t.states
                ],
            }
            for t in scene.tracks
        ],
        "interaction_graphs": [
            {
                "frame_index": g.frame_index,
                "agent_ids": [{"id": a, "agent_type": ty} for a, ty in g.agent_ids],
                "edges": [
                    {
                        "src_id": e.src_id,
                        "dst_id": e.dst_id,
                        "relation": e.relation,
                        "distance": float(e.distance),
                        "path_distance": None if e.path_distance is None else float(e.path_distance),
                        "edge_probability": float(e.edge_probability),
                    }
                    for e in g.edges
                ],
            }
            for g in scene.interaction_graphs
        ],
        "target_id": scene.target_id,
        "future": [[x, y] for x, y in scene.future],
    }


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError(f"expected a number, got {v!r}")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError(f"expected a boolean, got {v!r}")
    return v


def record_to_scene(rec: dict) -> Scene:
    if rec.get("schema") != SCHEMA:
        raise ValueError(f"unsupported schema {rec.get('schema')!r}, expected {SCHEMA!r}")
    lg = rec["lane_graph"]
    lane_graph = LaneGraph(
        nodes=tuple(
            LaneNode(
                id=str(n["id"]),
                poses=tuple(
                    LanePose(
                        x=_num(p["x"]),
                        y=_num(p["y"]),
                        theta=_num(p["theta"]),
                        stopline_flag=_bool(p["stopline_flag"]),
                        crosswalk_flag=_bool(p["crosswalk_flag"]),
                    )
                    for p in n["poses"]
                ),
            )
            for n in lg["nodes"]
        ),
        edges=tuple(LaneEdge(str(e["src"]), str(e["dst"]), str(e["edge_type"])) for e in lg["edges"]),
    )
    tracks = tuple(
        AgentTrack(
            id=str(t["id"]),
            agent_type=str(t["agent_type"]),
            states=tuple(
                AgentState(
                    x=_num(s["x"]),
                    y=_num(s["y"]),
                    vel=_num(s["vel"]),
                    acc=_num(s["acc"]),
                    yaw_rate=_num(s["yaw_rate"]),
                    present=_bool(s["present"]),
                )
                for s in t["states"]
            ),
        )
        for t in rec["tracks"]
    )
    graphs = tuple(
        InteractionGraph(
            frame_index=int(g["frame_index"]),
            agent_ids=tuple((str(a["id"]), str(a["agent_type"])) for a in g["agent_ids"]),
            edges=tuple(
                InteractionEdge(
                    src_id=str(e["src_id"]),
                    dst_id=str(e["dst_id"]),
                    relation=str(e["relation"]),
                    distance=_num(e["distance"]),
                    path_distance=None if e["path_distance"] is None else _num(e["path_distance"]),
                    edge_probability=_num(e["edge_probability"]),
                )
                for e in g["edges"]
            ),
        )
        for g in rec["interaction_graphs"]
    )
    return Scene(
        scene_id=str(rec["scene_id"]),
        lane_graph=lane_graph,
        tracks=tracks,
        interaction_graphs=graphs,
        target_id=str(rec["target_id"]),
        future=tuple((_num(p[0]), _num(p[1])) for p in rec["future"]),
    )


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False, ensure_ascii=False).encode(
        "utf-8"
    )


def serialize_scene(scene: Scene) -> bytes:
    """Canonical single-line UTF-8 encoding of a valid scene."""
    check_scene(scene)
    return _dumps(scene_to_record(scene))


def _parse_record(data: bytes, base_offset: int = 0) -> dict:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SceneParseError(f"invalid UTF-8: {exc.reason}", base_offset + exc.start) from None
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise SceneParseError(f"malformed record: {exc.msg}", base_offset + offset) from None
    if not isinstance(rec, dict):
        raise SceneParseError("record is not a JSON object", base_offset)
    return rec


def deserialize_scene(data: bytes, *, _offset: int = 0) -> Scene:
    rec = _parse_record(data, _offset)
    try:
        scene = record_to_scene(rec)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SceneParseError(f"record does not match {SCHEMA}: {exc!r}", _offset) from None
    return check_scene(scene)


def write_scenes(path, scenes: Iterable[Scene]):
    with open(path, "wb") as fh:
        for s in scenes:
            fh.write(serialize_scene(s))
            fh.write(b"\n")


def read_scenes(path) -> list[Scene]:
    with open(path, "rb") as fh:
        data = fh.read()
    scenes = []
    offset = 0
    for line in data.split(b"\n"):
        if line.strip():
            scenes.append(deserialize_scene(line, _offset=offset))
        offset += len(line) + 1
    return scenes
