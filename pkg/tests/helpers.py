"""Scene and graph builders shared by the tests."""
from __future__ import annotations

import math
import random

import torch

from socialformer.scene import (
    ABSENT,
    FRAME_INDICES,
    RELATIONS,
    AgentState,
    AgentTrack,
    InteractionEdge,
    InteractionGraph,
    LaneEdge,
    LaneGraph,
    LaneNode,
    LanePose,
    Scene,
)


def straight_node(node_id, x0, y0=0.0, n=10, spacing=1.5, theta=0.0, crosswalk=False):
    poses = [
        LanePose(x0 + i * spacing * math.cos(theta), y0 + i * spacing * math.sin(theta), theta, False, crosswalk)
        for i in range(n)
    ]
    return LaneNode(node_id, tuple(poses))


def track(agent_id, xs, agent_type="vehicle", y=0.0, vel=10.0, first_present=0):
    states = []
    for k, x in enumerate(xs):
        if k < first_present:
            states.append(ABSENT)
        else:
            states.append(AgentState(x, y, vel, 0.0, 0.0, True))
    return AgentTrack(agent_id, agent_type, tuple(states))


def minimal_scene(scene_id="minimal"):
    lane = LaneGraph((straight_node("a", -20.0),))
    tgt = track("target", [-20.0, -15.0, -10.0, -5.0, 0.0])
    graphs = tuple(InteractionGraph(f, (("target", "vehicle"),)) for f in FRAME_INDICES)
    future = tuple((5.0 * (i + 1), 0.0) for i in range(12))
    return Scene(scene_id, lane, (tgt,), graphs, "target", future)


def pedestrian_scene():
    """Target vehicle plus a human 5 m to its side; pedestrian edge at every frame."""
    lane = LaneGraph((straight_node("a", -20.0), straight_node("b", -5.0)), (LaneEdge("a", "b", "successor"),))
    xs = [-8.0, -6.0, -4.0, -2.0, 0.0]
    tgt = track("target", xs, vel=4.0)
    hum = AgentTrack("h01", "human", tuple(AgentState(x, 5.0, 0.0, 0.0, 0.0, True) for x in xs))
    graphs = []
    for f in FRAME_INDICES:
        e = InteractionEdge("h01", "target", "pedestrian", 5.0, None, math.exp(-5.0 / 20.0))
        graphs.append(InteractionGraph(f, (("target", "vehicle"), ("h01", "human")), (e,)))
    future = tuple((4.0 * 0.5 * (i + 1), 0.0) for i in range(12))
    return Scene("ped", lane, (tgt, hum), tuple(graphs), "target", future)


def two_vehicle_scene(relations=("longitudinal", "lateral", "intersecting", "longitudinal", "lateral")):
    """Target and one other vehicle whose edge type changes per frame."""
    lane = LaneGraph((straight_node("a", -20.0), straight_node("b", -5.0)), (LaneEdge("a", "b", "successor"),))
    tgt = track("target", [-8.0, -6.0, -4.0, -2.0, 0.0], vel=4.0)
    other = track("v01", [2.0, 4.0, 6.0, 8.0, 10.0], y=1.0, vel=4.0)
    graphs = []
    for f, rel in zip(FRAME_INDICES, relations):
        pd = {"longitudinal": 10.0, "lateral": 2.0, "intersecting": 15.0}[rel]
        d = math.hypot(10.0, 1.0)
        edges = [InteractionEdge("target", "v01", rel, d, pd, math.exp(-d / 20.0))]
        if rel != "longitudinal":
            edges.append(InteractionEdge("v01", "target", rel, d, pd, math.exp(-d / 20.0)))
        graphs.append(InteractionGraph(f, (("target", "vehicle"), ("v01", "vehicle")), tuple(edges)))
    future = tuple((2.0 * (i + 1), 0.0) for i in range(12))
    return Scene("two", lane, (tgt, other), tuple(graphs), "target", future)


def random_graph(rng: random.Random, max_nodes=6, relations=RELATIONS, min_nodes=1):
    """Random typed nodes and attributed typed edges (ordered pairs unique)."""
    n = rng.randint(min_nodes, max_nodes)
    types = [rng.randint(0, 1) for _ in range(n)]
    pairs = [(s, t) for s in range(n) for t in range(n) if s != t]
    rng.shuffle(pairs)
    edges = []
    for s, t in pairs[: rng.randint(0, len(pairs))]:
        r = RELATIONS.index(rng.choice(relations))
        attr = [rng.uniform(0, 60), 0.0 if r == 3 else rng.uniform(0, 60), rng.uniform(0, 1)]
        edges.append((s, t, r, attr))
    return types, edges


def edge_arrays(edges):
    src = torch.tensor([e[0] for e in edges], dtype=torch.long)
    dst = torch.tensor([e[1] for e in edges], dtype=torch.long)
    et = torch.tensor([e[2] for e in edges], dtype=torch.long)
    attr = torch.tensor([e[3] for e in edges], dtype=torch.float64).reshape(-1, 3)
    return src, dst, et, attr


def randomize(module, scale=0.5, seed=0):
    """Overwrite every parameter with random values (also the zero/one-initialised ones)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


FD_STEP = 1e-5
FD_REL_TOL = 1e-4
# denominator floor per unit of loss: central differences carry roundoff of about
# eps * |loss| / step ~ 1e-11 * |loss|, so relative error is only meaningful above this
FD_FLOOR = 1e-6


def finite_difference_errors(module, loss_fn, step=FD_STEP, floor=FD_FLOOR):
    """Central-difference check of d loss_fn() / d p for every element of every trainable parameter.

    Returns {param name: worst relative error}.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    floor = floor * max(1.0, abs(loss.item()))
    worst = {}
    with torch.no_grad():
        for name, p in params:
            analytic = torch.zeros_like(p) if p.grad is None else p.grad.clone()
            flat = p.view(-1)
            err = 0.0
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = loss_fn().item()
                flat[i] = old - step
                down = loss_fn().item()
                flat[i] = old
                num = (up - down) / (2 * step)
                a = analytic.view(-1)[i].item()
                err = max(err, abs(a - num) / max(abs(a), abs(num), floor))
            worst[name] = err
    return worst


def random_scene(rng: random.Random, n_agents=5, scene_id="rand", edge_p=0.3, human_p=0.3):
    """Target plus random agents with arbitrary (valid) per-frame interaction edges."""
    lane = LaneGraph(tuple(straight_node(c, -30.0 + 15 * i) for i, c in enumerate("abcd")),
                     tuple(LaneEdge(a, b, "successor") for a, b in ("ab", "bc", "cd")))
    tracks = [track("target", [-8.0 + 2 * k + rng.uniform(-0.2, 0.2) for k in range(5)], vel=4.0)]
    for i in range(1, n_agents):
        kind = "human" if rng.random() < human_p else "vehicle"
        x0, y0 = rng.uniform(-30, 30), rng.uniform(-10, 10)
        vx = rng.uniform(-5, 5)
        states = tuple(AgentState(x0 + vx * 0.5 * k, y0, abs(vx), 0.0, rng.uniform(-0.1, 0.1), True) for k in range(5))
        tracks.append(AgentTrack(f"a{i:02d}", kind, states))
    members = tuple((t.id, t.agent_type) for t in tracks)
    graphs = []
    for f in FRAME_INDICES:
        edges = []
        for s in tracks:
            for d in tracks:
                if s.id == d.id or rng.random() >= edge_p:
                    continue
                dist = rng.uniform(0.5, 40.0)
                if "human" in (s.agent_type, d.agent_type):
                    edges.append(InteractionEdge(s.id, d.id, "pedestrian", dist, None, math.exp(-dist / 20)))
                else:
                    rel = rng.choice(RELATIONS[:3])
                    edges.append(InteractionEdge(s.id, d.id, rel, dist, dist + rng.uniform(0, 10), math.exp(-dist / 20)))
        graphs.append(InteractionGraph(f, members, tuple(edges)))
    x_end = tracks[0].states[-1].x
    future = tuple((x_end + 2.0 * (i + 1), 0.0) for i in range(12))
    return Scene(scene_id, lane, tuple(tracks), tuple(graphs), "target", future)
