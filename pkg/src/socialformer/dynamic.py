"""Per-frame type encoding + EHGT, then a GRU over the target's frame embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .ehgt import EHGTLayer, TypedNodeSet, ehgt_layer
from .encoders import AGENT_FEATURES, TypedMLP, track_tensors
from .scene import FRAME_INDICES, T_OBS, InteractionGraph


class DynamicGraphEncoder(nn.Module):
    def __init__(self, d_model: int, heads: int, layers: int = 1, pos_scale: float = 10.0,
                 attr_distance_scale: float = 50.0):
        super().__init__()
        self.type_encoder = TypedMLP(AGENT_FEATURES, d_model, pos_scale=pos_scale)
        self.layers = nn.ModuleList(EHGTLayer(d_model, heads, attr_distance_scale) for _ in range(layers))
        self.temporal = nn.GRUCell(d_model, d_model, dtype=torch.float64)

    def encode_nodes(self, feats, node_type, src, dst, etype, attr):
        """Type-encode frame nodes and run every EHGT layer with all nodes as targets."""
        x = self.type_encoder(feats, node_type)
        for layer in self.layers:
            x = layer(x, node_type, src, dst, etype, attr)
        return x

    def temporal_steps(self, frames):
        """frames: [B, T_OBS, d] target embeddings in time order -> hidden states [B, T_OBS, d]."""
        h = frames.new_zeros(frames.shape[0], self.temporal.hidden_size)
        steps = []
        for t in range(frames.shape[1]):
            h = self.temporal(frames[:, t], h)
            steps.append(h)
        return torch.stack(steps, dim=1)

    def forward(self, batch):
        feats = batch.agent_x[batch.node_agent, batch.node_frame]
        x = self.encode_nodes(feats, batch.node_type, batch.edge_src, batch.edge_dst, batch.edge_type,
                              batch.edge_attr)
        steps = self.temporal_steps(x[batch.target_nodes])
        g_surr = x[batch.gsurr_index] * batch.gsurr_mask[..., None].to(x.dtype)
        return GraphEmbeddings(steps[:, -1], g_surr, batch.gsurr_mask, steps, x)


@dataclass
class GraphEmbeddings:
    g_target: torch.Tensor  # [B, d]
    g_surr: torch.Tensor  # [B, M_surr, d], zero rows where masked
    g_surr_mask: torch.Tensor  # [B, M_surr]
    g_target_steps: torch.Tensor  # [B, T_OBS, d]
    node_embeddings: torch.Tensor  # [Nn, d]


def encode_frame(graph: InteractionGraph, tracks, encoder: DynamicGraphEncoder) -> dict[str, torch.Tensor]:
    """Embeddings of every participant of one frame, keyed by agent id."""
    by_id = {t.id: t for t in tracks}
    k = FRAME_INDICES.index(graph.frame_index)
    ids = [aid for aid, _ in graph.agent_ids]
    types = [atype for _, atype in graph.agent_ids]
    for aid in ids:
        if not by_id[aid].states[k].present:
            raise ValueError(f"agent {aid!r} is not present at frame {graph.frame_index}")
    x, _ = track_tensors([by_id[a] for a in ids])
    type_idx = torch.tensor([0 if t == "vehicle" else 1 for t in types], dtype=torch.long)
    feats = encoder.type_encoder(x[:, k].reshape(-1, AGENT_FEATURES), type_idx)
    nodes = TypedNodeSet(ids, types, feats)
    for layer in encoder.layers:
        nodes = ehgt_layer(nodes, graph.edges, layer)
    return {aid: nodes.embeddings[i] for i, aid in enumerate(ids)}


def encode_dynamic(scene, model) -> GraphEmbeddings:
    """Graph embeddings of one scene using ``model.dynamic`` (a SocialFormer)."""
    from .batching import collate, scene_tensors

    cfg = model.config
    batch = collate([scene_tensors(scene)], cfg.m_surr, cfg.surr_neighbors)
    assert batch.target_nodes.shape[1] == T_OBS
    return model.dynamic(batch)
