"""Scene -> tensor conversion and batch collation.

Every scene is flattened once into index tensors; a batch concatenates them
with offsets so that the whole model runs vectorised over scenes, frames and
agents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .ehgt import edge_tensors
from .encoders import lane_tensors, track_tensors
from .fusion import lane_messages
from .scene import AGENT_TYPES, FRAME_INDICES, T_OBS, Scene

SURR_NEIGHBORS = ("both", "in", "out")


@dataclass
class SceneTensors:
    scene_id: str
    lane_x: torch.Tensor  # [L, N_POSE, 5]
    lane_mask: torch.Tensor  # [L, N_POSE]
    succ: torch.Tensor  # [2, Es] local lane indices
    prox: torch.Tensor  # [2, Ep]
    agent_x: torch.Tensor  # [A, T_OBS, 5]; row 0 is the target
    agent_mask: torch.Tensor  # [A, T_OBS]
    agent_type: torch.Tensor  # [A]
    agent_ids: list
    node_agent: torch.Tensor  # [Nn] agent row of every frame node
    node_frame: torch.Tensor  # [Nn]
    edge_src: torch.Tensor  # [E] local node indices
    edge_dst: torch.Tensor
    edge_type: torch.Tensor
    edge_attr: torch.Tensor  # [E, 3]
    target_nodes: torch.Tensor  # [T_OBS] node index of the target per frame
    neighbors: dict  # mode -> agent rows of the target's t=0 one-hop neighbours, nearest first
    origin: torch.Tensor  # [2] target position at t=0
    future: torch.Tensor  # [t_f, 2]
    n_edges: int


def scene_tensors(scene: Scene) -> SceneTensors:
    tracks = [scene.target] + [t for t in scene.tracks if t.id != scene.target_id]
    rows = {t.id: i for i, t in enumerate(tracks)}
    agent_x, agent_mask = track_tensors(tracks)
    agent_type = torch.tensor([AGENT_TYPES.index(t.agent_type) for t in tracks], dtype=torch.long)

    lane_x, lane_mask = lane_tensors(scene.lane_graph)
    lane_idx = {n.id: i for i, n in enumerate(scene.lane_graph.nodes)}
    succ = [(lane_idx[e.src], lane_idx[e.dst]) for e in scene.lane_graph.edges if e.edge_type == "successor"]
    prox = [(lane_idx[e.src], lane_idx[e.dst]) for e in scene.lane_graph.edges if e.edge_type == "proximal"]

    node_agent, node_frame, target_nodes = [], [], []
    src, dst, etype, attr = [], [], [], []
    n_edges = 0
    t0_edges = []
    for f, g in enumerate(scene.interaction_graphs):
        members = sorted({aid for aid, _ in g.agent_ids} | {scene.target_id}, key=lambda a: rows[a])
        local = {}
        for aid in members:
            local[aid] = len(node_agent)
            node_agent.append(rows[aid])
            node_frame.append(f)
        target_nodes.append(local[scene.target_id])
        s, d, et, at = edge_tensors(g.edges, local)
        src.append(s)
        dst.append(d)
        etype.append(et)
        attr.append(at)
        n_edges += len(g.edges)
        if g.frame_index == FRAME_INDICES[-1]:
            t0_edges = g.edges

    t0 = {t.id: t.states[-1] for t in tracks}
    tgt = t0[scene.target_id]

    def nearest(ids):
        ids = sorted(ids, key=lambda a: (math.hypot(t0[a].x - tgt.x, t0[a].y - tgt.y), a))
        return [rows[a] for a in ids]

    outs = {e.dst_id for e in t0_edges if e.src_id == scene.target_id}
    ins = {e.src_id for e in t0_edges if e.dst_id == scene.target_id}
    neighbors = {"both": nearest(outs | ins), "in": nearest(ins), "out": nearest(outs)}

    return SceneTensors(
        scene_id=scene.scene_id,
        lane_x=lane_x,
        lane_mask=lane_mask,
        succ=torch.tensor(succ, dtype=torch.long).reshape(-1, 2).T,
        prox=torch.tensor(prox, dtype=torch.long).reshape(-1, 2).T,
        agent_x=agent_x,
        agent_mask=agent_mask,
        agent_type=agent_type,
        agent_ids=[t.id for t in tracks],
        node_agent=torch.tensor(node_agent, dtype=torch.long),
        node_frame=torch.tensor(node_frame, dtype=torch.long),
        edge_src=torch.cat(src),
        edge_dst=torch.cat(dst),
        edge_type=torch.cat(etype),
        edge_attr=torch.cat(attr),
        target_nodes=torch.tensor(target_nodes, dtype=torch.long),
        neighbors=neighbors,
        origin=torch.tensor([tgt.x, tgt.y], dtype=torch.float64),
        future=torch.tensor(scene.future, dtype=torch.float64),
        n_edges=n_edges,
    )


@dataclass
class Batch:
    scene_ids: list
    # lanes
    lane_x: torch.Tensor
    lane_mask: torch.Tensor
    lane_pad_mask: torch.Tensor  # [B, Lmax]
    lane_msg_src: torch.Tensor
    lane_msg_dst: torch.Tensor
    lane_msg_rel: torch.Tensor
    # agents
    agent_x: torch.Tensor
    agent_mask: torch.Tensor
    agent_type: torch.Tensor
    target_rows: torch.Tensor  # [B]
    surr_index: torch.Tensor  # [B, Smax] rows into the flattened agents (0 where padded)
    surr_mask: torch.Tensor  # [B, Smax]
    # frame graphs
    node_agent: torch.Tensor
    node_frame: torch.Tensor
    node_type: torch.Tensor
    edge_src: torch.Tensor
    edge_dst: torch.Tensor
    edge_type: torch.Tensor
    edge_attr: torch.Tensor
    target_nodes: torch.Tensor  # [B, T_OBS]
    gsurr_index: torch.Tensor  # [B, M_surr] node indices (t=0 frame)
    gsurr_mask: torch.Tensor
    origin: torch.Tensor  # [B, 2]
    future: torch.Tensor  # [B, t_f, 2]

    @property
    def size(self):
        return len(self.scene_ids)


def _pad_rows(groups: Sequence[Sequence[int]], width=None):
    width = max([len(g) for g in groups] + [0]) if width is None else width
    idx = torch.zeros(len(groups), width, dtype=torch.long)
    mask = torch.zeros(len(groups), width, dtype=torch.bool)
    for i, g in enumerate(groups):
        g = list(g)[:width]
        if g:
            idx[i, : len(g)] = torch.tensor(g, dtype=torch.long)
            mask[i, : len(g)] = True
    return idx, mask


def collate(items: Sequence[SceneTensors], m_surr: int = 16, surr_neighbors: str = "both") -> Batch:
    if surr_neighbors not in SURR_NEIGHBORS:
        raise ValueError(f"surr_neighbors must be one of {SURR_NEIGHBORS}")
    lane_off = agent_off = node_off = 0
    lane_groups, surr_groups, gsurr_groups = [], [], []
    succ, prox, target_rows, target_nodes = [], [], [], []
    node_agent, src, dst = [], [], []
    for it in items:
        n_lane, n_agent, n_node = it.lane_x.shape[0], it.agent_x.shape[0], it.node_agent.shape[0]
        lane_groups.append(range(lane_off, lane_off + n_lane))
        succ.append(it.succ + lane_off)
        prox.append(it.prox + lane_off)
        target_rows.append(agent_off)
        surr_groups.append(range(agent_off + 1, agent_off + n_agent))
        node_agent.append(it.node_agent + agent_off)
        src.append(it.edge_src + node_off)
        dst.append(it.edge_dst + node_off)
        target_nodes.append(it.target_nodes + node_off)
        # t=0 node of an agent row: the frame nodes are grouped by frame, last frame at the end
        last = (it.node_frame == T_OBS - 1).nonzero(as_tuple=True)[0]
        row_to_node = {int(it.node_agent[j]): int(j) + node_off for j in last}
        gsurr_groups.append([row_to_node[r] for r in it.neighbors[surr_neighbors]])
        lane_off += n_lane
        agent_off += n_agent
        node_off += n_node

    _, lane_pad_mask = _pad_rows(lane_groups)
    surr_index, surr_mask = _pad_rows(surr_groups)
    gsurr_index, gsurr_mask = _pad_rows(gsurr_groups, m_surr)
    succ = torch.cat(succ, dim=1)
    prox = torch.cat(prox, dim=1)
    msg_src, msg_dst, msg_rel = lane_messages(succ[0], succ[1], prox[0], prox[1])
    agent_type = torch.cat([it.agent_type for it in items])
    node_agent = torch.cat(node_agent)
    return Batch(
        scene_ids=[it.scene_id for it in items],
        lane_x=torch.cat([it.lane_x for it in items]),
        lane_mask=torch.cat([it.lane_mask for it in items]),
        lane_pad_mask=lane_pad_mask,
        lane_msg_src=msg_src,
        lane_msg_dst=msg_dst,
        lane_msg_rel=msg_rel,
        agent_x=torch.cat([it.agent_x for it in items]),
        agent_mask=torch.cat([it.agent_mask for it in items]),
        agent_type=agent_type,
        target_rows=torch.tensor(target_rows, dtype=torch.long),
        surr_index=surr_index,
        surr_mask=surr_mask,
        node_agent=node_agent,
        node_frame=torch.cat([it.node_frame for it in items]),
        node_type=agent_type[node_agent],
        edge_src=torch.cat(src),
        edge_dst=torch.cat(dst),
        edge_type=torch.cat([it.edge_type for it in items]),
        edge_attr=torch.cat([it.edge_attr for it in items]),
        target_nodes=torch.stack(target_nodes),
        gsurr_index=gsurr_index,
        gsurr_mask=gsurr_mask,
        origin=torch.stack([it.origin for it in items]),
        future=torch.stack([it.future for it in items]),
    )
