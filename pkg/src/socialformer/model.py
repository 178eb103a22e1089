"""The assembled trajectory prediction network."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .batching import Batch
from .config import RunConfig
from .dynamic import DynamicGraphEncoder, GraphEmbeddings
from .encoders import AgentEncoders
from .fusion import Fusion
from .predictor import GraphDecoder, TrajectoryDecoder, wta_loss


@dataclass
class Forward:
    samples: torch.Tensor  # [B, k, t_f, 2]
    graph_modes: torch.Tensor  # [B, K, t_f, 2]
    f_fused: torch.Tensor  # [B, 2d]
    graph: GraphEmbeddings


def _pad(flat, mask):
    """Scatter rows of ``flat`` into a zero [B, W, d] tensor at the True cells of ``mask``."""
    out = flat.new_zeros(*mask.shape, flat.shape[-1])
    if flat.shape[0] == 0:
        return out
    return out.masked_scatter(mask[..., None], flat)


class SocialFormer(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.encoders = AgentEncoders(d, config.pos_scale)
        self.dynamic = DynamicGraphEncoder(d, config.heads, config.layers, config.pos_scale,
                                           config.attr_distance_scale)
        self.fusion = Fusion(d, config.heads, config.lane_gnn_rounds)
        self.decoder = TrajectoryDecoder(2 * d, config.d_z, config.decoder_hidden, config.pos_scale)
        self.graph_decoder = GraphDecoder(d, config.K, config.decoder_hidden, config.pos_scale)
        if not config.learn_edge_attr:
            for layer in self.dynamic.layers:
                layer.p_attr.requires_grad_(False)

    def encode(self, batch: Batch):
        h_lane = self.encoders.lane(batch.lane_x, batch.lane_mask)
        h_target = self.encoders.target(batch.agent_x[batch.target_rows], batch.agent_mask[batch.target_rows])
        surr_rows = batch.surr_index[batch.surr_mask]
        h_surr = self.encoders.surrounding(batch.agent_x[surr_rows], batch.agent_mask[surr_rows])
        return h_lane, h_target, h_surr

    def fuse(self, batch: Batch, h_lane, h_target, h_surr, graph: GraphEmbeddings):
        h_surr_pad = _pad(h_surr, batch.surr_mask)
        h_lane_pad = _pad(h_lane, batch.lane_pad_mask)
        sa = self.fusion.fuse_surrounding(h_surr_pad, graph.g_surr, graph.g_surr_mask)
        lanes = self.fusion.fuse_lanes(h_lane_pad, batch.lane_pad_mask, sa, batch.surr_mask,
                                       batch.lane_msg_src, batch.lane_msg_dst, batch.lane_msg_rel)
        ta = self.fusion.fuse_target(h_target, graph.g_target_steps)
        return self.fusion.fuse_final(ta, lanes, batch.lane_pad_mask)

    def forward(self, batch: Batch, z: torch.Tensor) -> Forward:
        h_lane, h_target, h_surr = self.encode(batch)
        graph = self.dynamic(batch)
        f_fused = self.fuse(batch, h_lane, h_target, h_surr, graph)
        samples = self.decoder(f_fused, z, batch.origin)
        graph_modes = self.graph_decoder(graph.g_target, batch.origin)
        return Forward(samples, graph_modes, f_fused, graph)

    def losses(self, out: Forward, batch: Batch):
        """Batch-mean winner-takes-all losses (l_fr over samples, l_gr over graph modes)."""
        l_fr = wta_loss(out.samples, batch.future).mean()
        l_gr = wta_loss(out.graph_modes, batch.future).mean()
        return l_fr, l_gr


def build_model(config: RunConfig) -> SocialFormer:
    torch.manual_seed(config.seed)
    return SocialFormer(config)
