"""Synthetic desk-scale traffic scenes and semantic relation extraction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import networkx as nx
import numpy as np

from .scene import (
    ABSENT,
    FRAME_INDICES,
    N_POSE,
    T_FUTURE,
    AgentState,
    AgentTrack,
    InteractionEdge,
    InteractionGraph,
    LaneEdge,
    LaneGraph,
    LaneNode,
    LanePose,
    Scene,
    check_scene,
    wrap_angle,
)

log = logging.getLogger(__name__)

TOPOLOGIES = ("straight", "curve", "lane_change", "intersection", "roundabout")
DT = 0.5
POSE_SPACING = 1.5
LANE_WIDTH = 3.5


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class RelationConfig:
    map_match_radius: float = 3.0
    prob_scale: float = 20.0
    max_path_distance: float = 50.0
    lateral_offset_max: float = 5.0
    intersect_horizon: float = 50.0
    pedestrian_radius: float = 15.0


@dataclass(frozen=True)
class FrameAgent:
    id: str
    agent_type: str
    x: float
    y: float


# ---------------------------------------------------------------------------
# lane graph index


class LaneIndex:
    """Pose-level view of a lane graph used for map matching and path queries.

    Every lane pose is a vertex; consecutive poses of a node and the last pose
    of a node to the first pose of each successor are joined by directed edges
    weighted with their Euclidean length.
    """

    def __init__(self, lane_graph: LaneGraph):
        self.lane_graph = lane_graph
        self.keys: list[tuple[str, int]] = []
        xy = []
        self.offset: dict[tuple[str, int], float] = {}
        self.graph = nx.DiGraph()
        for n in lane_graph.nodes:
            s = 0.0
            for i, p in enumerate(n.poses):
                key = (n.id, i)
                if i > 0:
                    q = n.poses[i - 1]
                    w = math.hypot(p.x - q.x, p.y - q.y)
                    s += w
                    self.graph.add_edge((n.id, i - 1), key, weight=w)
                self.graph.add_node(key)
                self.keys.append(key)
                self.offset[key] = s
                xy.append((p.x, p.y))
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.pos = {k: (float(x), float(y)) for k, (x, y) in zip(self.keys, self.xy)}
        nodes = {n.id: n for n in lane_graph.nodes}
        self.proximal: set[tuple[str, str]] = set()
        for e in lane_graph.edges:
            if e.edge_type == "successor":
                a = (e.src, len(nodes[e.src].poses) - 1)
                b = (e.dst, 0)
                pa, pb = self.pos[a], self.pos[b]
                self.graph.add_edge(a, b, weight=math.hypot(pb[0] - pa[0], pb[1] - pa[1]))
            elif e.edge_type == "proximal":
                self.proximal.add((e.src, e.dst))
                self.proximal.add((e.dst, e.src))

    def match(self, x: float, y: float, radius: float) -> Optional[tuple[str, int]]:
        if not len(self.keys):
            return None
        d = np.hypot(self.xy[:, 0] - x, self.xy[:, 1] - y)
        i = int(np.argmin(d))
        return self.keys[i] if d[i] <= radius else None

    def forward_distances(self, start, cutoff: float) -> dict:
        return nx.single_source_dijkstra_path_length(self.graph, start, cutoff=cutoff, weight="weight")

    def forward_segments(self, start, horizon: float):
        """Segments reachable from ``start`` within ``horizon`` metres, with start distances."""
        dist = self.forward_distances(start, horizon)
        segs = []
        for u, du in dist.items():
            for v, attrs in self.graph[u].items():
                segs.append((u, v, du, attrs["weight"]))
        return segs


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def segment_crossing(p1, p2, q1, q2) -> Optional[tuple[float, float]]:
    """Parameters (s, t) of a proper crossing of segments p1p2 and q1q2, else None."""
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        s = d1 / (d1 - d2)
        t = d3 / (d3 - d4)
        return s, t
    return None


def _crossing_path_distance(index: LaneIndex, a, b, horizon: float) -> Optional[float]:
    segs_a = index.forward_segments(a, horizon)
    segs_b = index.forward_segments(b, horizon)
    best = None
    for ua, va, da, wa in segs_a:
        pa1, pa2 = index.pos[ua], index.pos[va]
        for ub, vb, db, wb in segs_b:
            if {ua[0], va[0]} & {ub[0], vb[0]}:
                continue
            hit = segment_crossing(pa1, pa2, index.pos[ub], index.pos[vb])
            if hit is None:
                continue
            total = da + hit[0] * wa + db + hit[1] * wb
            if best is None or total < best:
                best = total
    return best


def map_match(agents: Sequence[FrameAgent], index: LaneIndex, radius: float) -> dict:
    return {a.id: index.match(a.x, a.y, radius) for a in agents if a.agent_type == "vehicle"}


def extract_relations(
    agents: Sequence[FrameAgent],
    lane_graph: LaneGraph,
    cfg: RelationConfig = RelationConfig(),
    index: Optional[LaneIndex] = None,
) -> list[InteractionEdge]:
    """Classify every ordered agent pair of one frame into at most one relation.

    Vehicle pairs are tested in priority order longitudinal, lateral,
    intersecting; a human within ``pedestrian_radius`` of a vehicle yields a
    pedestrian edge from the human to the vehicle.
    """
    index = index or LaneIndex(lane_graph)
    agents = sorted(agents, key=lambda a: a.id)
    matched = map_match(agents, index, cfg.map_match_radius)
    for aid, m in matched.items():
        if m is None:
            log.warning("vehicle %s is farther than %.1f m from every lane pose; no edges", aid, cfg.map_match_radius)

    def make(src, dst, relation, path_distance):
        d = math.hypot(src.x - dst.x, src.y - dst.y)
        return InteractionEdge(
            src_id=src.id,
            dst_id=dst.id,
            relation=relation,
            distance=d,
            path_distance=None if path_distance is None else float(path_distance),
            edge_probability=math.exp(-d / cfg.prob_scale),
        )

    vehicles = [a for a in agents if a.agent_type == "vehicle" and matched[a.id] is not None]
    reach = {a.id: index.forward_distances(matched[a.id], cfg.max_path_distance) for a in vehicles}
    edges: list[InteractionEdge] = []
    for i, a in enumerate(vehicles):
        for b in vehicles[i + 1 :]:
            ma, mb = matched[a.id], matched[b.id]
            ab = reach[a.id].get(mb)
            ba = reach[b.id].get(ma)
            if ab is not None or ba is not None:
                # rear vehicle points at the one ahead
                if ba is None or (ab is not None and ab <= ba):
                    edges.append(make(a, b, "longitudinal", ab))
                else:
                    edges.append(make(b, a, "longitudinal", ba))
                continue
            if (ma[0], mb[0]) in index.proximal:
                offset = abs(index.offset[ma] - index.offset[mb])
                if offset < cfg.lateral_offset_max:
                    edges.append(make(a, b, "lateral", offset))
                    edges.append(make(b, a, "lateral", offset))
                    continue
            pd = _crossing_path_distance(index, ma, mb, cfg.intersect_horizon)
            if pd is not None:
                edges.append(make(a, b, "intersecting", pd))
                edges.append(make(b, a, "intersecting", pd))
    for h in agents:
        if h.agent_type != "human":
            continue
        for v in vehicles:
            if math.hypot(h.x - v.x, h.y - v.y) <= cfg.pedestrian_radius:
                edges.append(make(h, v, "pedestrian", None))
    return sorted(edges, key=lambda e: (e.src_id, e.dst_id))


# ---------------------------------------------------------------------------
# geometry helpers


class Path:
    """Arc-length parameterised polyline."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        seg = np.hypot(*np.diff(pts, axis=0).T)
        keep = np.concatenate([[True], seg > 1e-9])
        self.points = pts[keep]
        self.s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(self.points, axis=0).T))])
        self.length = float(self.s[-1])

    def at(self, s: float) -> tuple[float, float]:
        return float(np.interp(s, self.s, self.points[:, 0])), float(np.interp(s, self.s, self.points[:, 1]))

    def heading(self, s: float, ds: float = 0.25) -> float:
        a = self.at(max(s - ds, 0.0))
        b = self.at(min(s + ds, self.length))
        return math.atan2(b[1] - a[1], b[0] - a[0])

    def yaw_rate(self, s: float, speed: float, ds: float = 0.5) -> float:
        lo, hi = max(s - ds, ds), min(s + ds, self.length - ds)
        if hi <= lo:
            return 0.0
        dtheta = wrap_angle(self.heading(hi) - self.heading(lo))
        return dtheta / (hi - lo) * speed

    def offset(self, lateral) -> "Path":
        """Shift every vertex along the left normal by ``lateral(s)`` metres."""
        pts = []
        for s, p in zip(self.s, self.points):
            th = self.heading(s)
            d = lateral(s)
            pts.append((p[0] - d * math.sin(th), p[1] + d * math.cos(th)))
        return Path(np.asarray(pts))


def straight_path(start, heading: float, length: float, step: float = 0.5) -> Path:
    n = max(int(math.ceil(length / step)), 1)
    s = np.linspace(0.0, length, n + 1)
    return Path(np.stack([start[0] + s * math.cos(heading), start[1] + s * math.sin(heading)], axis=1))


def arc_points(center, radius: float, a0: float, a1: float, step: float = 0.5) -> np.ndarray:
    n = max(int(math.ceil(abs(a1 - a0) * radius / step)), 2)
    a = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


def lane_nodes_from_path(path: Path, prefix: str, flags=None, node_length: float = N_POSE * POSE_SPACING):
    """Cut a path into lane nodes of ``N_POSE`` poses chained by successor edges."""
    nodes, edges = [], []
    n_nodes = int(path.length // node_length)
    for j in range(n_nodes):
        poses = []
        for i in range(N_POSE):
            s = j * node_length + i * POSE_SPACING
            x, y = path.at(s)
            stop, cross = flags(x, y) if flags else (False, False)
            poses.append(LanePose(x, y, wrap_angle(path.heading(s)), stop, cross))
        nodes.append(LaneNode(f"{prefix}{j:02d}", tuple(poses)))
        if j:
            edges.append(LaneEdge(nodes[j - 1].id, nodes[j].id, "successor"))
    return nodes, edges


def proximal_edges(a: list[LaneNode], b: list[LaneNode]) -> list[LaneEdge]:
    out = []
    for na, nb in zip(a, b):
        out.append(LaneEdge(na.id, nb.id, "proximal"))
        out.append(LaneEdge(nb.id, na.id, "proximal"))
    return out


# ---------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class SynthConfig:
    topology: str = "straight"
    n_agents: int = 1
    n_pedestrians: int = 0
    seed: int = 0
    noise_std: float = 0.0
    target_speed: Optional[float] = None
    scene_id: Optional[str] = None

    def validate(self):
        if self.topology not in TOPOLOGIES:
            raise GenerationError(f"unknown topology {self.topology!r}; choose from {TOPOLOGIES}")
        if self.n_agents < 1:
            raise GenerationError("n_agents must be >= 1 (the target is an agent)")
        if self.n_pedestrians < 0:
            raise GenerationError("n_pedestrians must be >= 0")
        if self.noise_std < 0 or not math.isfinite(self.noise_std):
            raise GenerationError("noise_std must be finite and >= 0")
        if self.target_speed is not None and not 0 < self.target_speed <= 30:
            raise GenerationError("target_speed must lie in (0, 30] m/s")


@dataclass
class _Mover:
    id: str
    agent_type: str
    path: Path
    s0: float  # arc position at t=0
    speed: float
    first_frame: int = 0  # index into FRAME_INDICES of the first observed frame

    def pose(self, t: float):
        s = self.s0 + self.speed * t
        x, y = self.path.at(s)
        return x, y, self.path.heading(s), self.path.yaw_rate(s, self.speed)


@dataclass
class _Layout:
    lanes: list[tuple[str, Path]]
    nodes: list[LaneNode]
    edges: list[LaneEdge]
    target: _Mover
    routes: list[Path]  # paths other vehicles may drive on
    walk_zone: tuple[float, float, float]  # centre x, centre y, radius for pedestrians
    capacity: int


def _build_lanes(lanes, flags=None):
    nodes, edges, by_lane = [], [], {}
    for prefix, path in lanes:
        n, e = lane_nodes_from_path(path, prefix, flags)
        nodes += n
        edges += e
        by_lane[prefix] = n
    return nodes, edges, by_lane


def _layout(cfg: SynthConfig, rng: np.random.Generator) -> _Layout:
    topo = cfg.topology
    if topo == "straight":
        v = cfg.target_speed or 10.0
        back, fwd = 2.5 * v + 40.0, 6.0 * v + 40.0
        l0 = straight_path((-back, 0.0), 0.0, back + fwd)
        l1 = straight_path((-back, LANE_WIDTH), 0.0, back + fwd)
        nodes, edges, by = _build_lanes([("a", l0), ("b", l1)])
        edges += proximal_edges(by["a"], by["b"])
        target = _Mover("target", "vehicle", l0, back, v)
        return _Layout([("a", l0), ("b", l1)], nodes, edges, target, [l0, l1], (0.0, LANE_WIDTH + 4.0, 20.0), 12)

    if topo == "curve":
        v = cfg.target_speed or float(rng.uniform(6.0, 12.0))
        radius = float(rng.uniform(40.0, 80.0))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        back, fwd = 2.5 * v + 30.0, 6.0 * v + 30.0
        total = back + fwd
        pts = []
        for r in (radius, radius - sign * LANE_WIDTH):
            center = (0.0, sign * radius)
            a0 = -sign * math.pi / 2
            arc = arc_points(center, r, a0, a0 + sign * total / radius)
            pts.append(arc)
        l0, l1 = Path(pts[0]), Path(pts[1])
        nodes, edges, by = _build_lanes([("a", l0), ("b", l1)])
        edges += proximal_edges(by["a"], by["b"])
        # shift so the target sits at the origin at t=0 before the final frame change
        target = _Mover("target", "vehicle", l0, back, v)
        return _Layout([("a", l0), ("b", l1)], nodes, edges, target, [l0, l1], (*l0.at(back), 20.0), 10)

    if topo == "lane_change":
        v = cfg.target_speed or float(rng.uniform(7.0, 12.0))
        back, fwd = 2.5 * v + 40.0, 6.0 * v + 40.0
        l0 = straight_path((-back, 0.0), 0.0, back + fwd)
        l1 = straight_path((-back, LANE_WIDTH), 0.0, back + fwd)
        nodes, edges, by = _build_lanes([("a", l0), ("b", l1)])
        edges += proximal_edges(by["a"], by["b"])
        start = back + float(rng.uniform(-2.0, 2.0)) * v
        span = float(rng.uniform(30.0, 45.0))
        direction = LANE_WIDTH

        def lateral(s):
            u = min(max((s - start) / span, 0.0), 1.0)
            return direction * u * u * (3.0 - 2.0 * u)

        path = l0.offset(lateral)
        target = _Mover("target", "vehicle", path, back, v)
        return _Layout([("a", l0), ("b", l1)], nodes, edges, target, [l0, l1], (0.0, -4.0, 20.0), 12)

    if topo == "intersection":
        v = cfg.target_speed or float(rng.uniform(6.0, 10.0))
        d0 = float(rng.uniform(10.0, 25.0))
        half = max(2.5 * v + d0 + 20.0, 6.0 * v + 30.0)

        def flags(x, y):
            cross = (8.0 <= x <= 11.0 and abs(y) < 1.0) or (8.0 <= y <= 11.0 and abs(x) < 1.0)
            stop = (-7.5 <= x <= -6.0 and abs(y) < 1.0) or (-7.5 <= y <= -6.0 and abs(x) < 1.0)
            return stop, cross

        la = straight_path((-half, 0.0), 0.0, 2 * half)
        lb = straight_path((0.0, -half), math.pi / 2, 2 * half)
        lc = straight_path((-half, -LANE_WIDTH), 0.0, 2 * half)
        nodes, edges, by = _build_lanes([("a", la), ("b", lb), ("c", lc)], flags)
        edges += proximal_edges(by["a"], by["c"])
        target = _Mover("target", "vehicle", la, half - d0, v)
        return _Layout([("a", la), ("b", lb), ("c", lc)], nodes, edges, target, [lb, la, lc], (9.5, 0.0, 12.0), 10)

    # roundabout: entry road, half circle, exit road
    v = cfg.target_speed or float(rng.uniform(6.0, 9.0))
    radius = 20.0
    entry = 2.5 * v + 30.0
    exit_len = 6.0 * v + 10.0
    pts = np.concatenate(
        [
            np.stack([np.full(50, -radius), np.linspace(entry, 0.0, 50)], axis=1),
            arc_points((0.0, 0.0), radius, math.pi, 2 * math.pi)[1:],
            np.stack([np.full(50, radius), np.linspace(0.0, exit_len, 50)], axis=1)[1:],
        ]
    )
    ring = Path(pts)
    nodes, edges, _ = _build_lanes([("r", ring)])
    s_t = entry + float(rng.uniform(0.0, 0.4)) * math.pi * radius
    target = _Mover("target", "vehicle", ring, s_t, v)
    return _Layout([("r", ring)], nodes, edges, target, [ring], (-radius - 4.0, entry * 0.5, 15.0), 6)


def _place_vehicles(cfg, rng, layout: _Layout) -> list[_Mover]:
    movers = [layout.target]
    n_other = cfg.n_agents - 1
    if n_other > layout.capacity:
        raise GenerationError(
            f"topology {cfg.topology!r} fits at most {layout.capacity + 1} vehicles, asked for {cfg.n_agents}"
        )
    for k in range(n_other):
        for _attempt in range(200):
            if cfg.topology == "intersection" and k == 0:
                # guarantee a crossing conflict with the target
                route = layout.routes[0]
                speed = float(rng.uniform(5.0, 9.0))
                s0 = route.length / 2 - float(rng.uniform(10.0, 25.0))
            else:
                route = layout.routes[int(rng.integers(len(layout.routes)))]
                speed = float(rng.uniform(4.0, 12.0))
                lo = 2.0 * speed + 1.0
                hi = route.length - 1.0
                if hi <= lo:
                    continue
                s0 = float(rng.uniform(lo, hi))
            if s0 - 2.0 * speed < 0.5:
                continue
            x, y = route.at(s0)
            if all(math.hypot(x - m.pose(0.0)[0], y - m.pose(0.0)[1]) >= 8.0 for m in movers):
                first = int(rng.integers(1, 5)) if rng.random() < 0.2 else 0
                movers.append(_Mover(f"v{k + 1:02d}", "vehicle", route, s0, speed, first))
                break
        else:
            raise GenerationError(f"could not place vehicle {k + 1} without overlap")
    return movers


def _place_pedestrians(cfg, rng, layout: _Layout) -> list[_Mover]:
    cx, cy, r = layout.walk_zone
    out = []
    for k in range(cfg.n_pedestrians):
        ang = float(rng.uniform(-math.pi, math.pi))
        rad = r * math.sqrt(float(rng.random()))
        x, y = cx + rad * math.cos(ang), cy + rad * math.sin(ang)
        heading = float(rng.uniform(-math.pi, math.pi))
        speed = float(rng.uniform(0.8, 1.6))
        walk = straight_path(
            (x - 3.0 * speed * math.cos(heading), y - 3.0 * speed * math.sin(heading)), heading, 12.0 * speed
        )
        first = int(rng.integers(1, 5)) if rng.random() < 0.2 else 0
        out.append(_Mover(f"h{k + 1:02d}", "human", walk, 3.0 * speed, speed, first))
    return out


def generate_scene(cfg: SynthConfig) -> Scene:
    """Roll out one scene in a target-centred, heading-aligned frame."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    layout = _layout(cfg, rng)
    movers = _place_vehicles(cfg, rng, layout) + _place_pedestrians(cfg, rng, layout)

    ox, oy, oth, _ = layout.target.pose(0.0)
    c, s = math.cos(-oth), math.sin(-oth)

    def local(x, y):
        dx, dy = x - ox, y - oy
        return c * dx - s * dy, s * dx + c * dy

    nodes = []
    for n in layout.nodes:
        poses = []
        for p in n.poses:
            lx, ly = local(p.x, p.y)
            poses.append(LanePose(lx, ly, wrap_angle(p.theta - oth), p.stopline_flag, p.crosswalk_flag))
        nodes.append(LaneNode(n.id, tuple(poses)))
    lane_graph = LaneGraph(tuple(nodes), tuple(layout.edges))

    tracks = []
    observed: dict[str, list] = {}
    for m in movers:
        states = []
        obs = []
        for f, t_idx in enumerate(FRAME_INDICES):
            if f < m.first_frame:
                states.append(ABSENT)
                obs.append(None)
                continue
            x, y, _, yaw_rate = m.pose(t_idx * DT)
            lx, ly = local(x, y)
            if cfg.noise_std > 0:
                lx += float(rng.normal(0.0, cfg.noise_std))
                ly += float(rng.normal(0.0, cfg.noise_std))
            states.append(AgentState(lx, ly, m.speed, 0.0, yaw_rate if m.agent_type == "vehicle" else 0.0, True))
            obs.append((lx, ly))
        tracks.append(AgentTrack(m.id, m.agent_type, tuple(states)))
        observed[m.id] = obs

    future = []
    for step in range(1, T_FUTURE + 1):
        x, y, _, _ = layout.target.pose(step * DT)
        future.append(local(x, y))

    index = LaneIndex(lane_graph)
    graphs = []
    for f, t_idx in enumerate(FRAME_INDICES):
        frame = [
            FrameAgent(m.id, m.agent_type, *observed[m.id][f]) for m in movers if observed[m.id][f] is not None
        ]
        edges = extract_relations(frame, lane_graph, index=index)
        graphs.append(
            InteractionGraph(t_idx, tuple((a.id, a.agent_type) for a in frame), tuple(edges))
        )

    scene_id = cfg.scene_id or f"{cfg.topology}-{cfg.seed}"
    scene = Scene(scene_id, lane_graph, tuple(tracks), tuple(graphs), "target", tuple(future))
    return check_scene(scene)


def generate_scenes(topology: str, count: int, seed: int, **kwargs) -> list[Scene]:
    out = []
    for i in range(count):
        cfg = SynthConfig(topology=topology, seed=seed + i, scene_id=f"{topology}-{seed + i}", **kwargs)
        out.append(generate_scene(cfg))
    return out
