"""Four cross-attention sub-modules that merge agent, lane and graph encodings."""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

N_LANE_RELATIONS = 3  # successor (pred -> succ), successor reversed, proximal


class CrossAttention(nn.Module):
    """Multi-head scaled dot-product attention; queries from ``q``, keys/values from ``kv``.

    Query rows without any valid key produce an exact zero output.
    """

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model, dtype=torch.float64)
        self.k_proj = nn.Linear(d_model, d_model, dtype=torch.float64)
        self.v_proj = nn.Linear(d_model, d_model, dtype=torch.float64)
        self.out_proj = nn.Linear(d_model, d_model, bias=False, dtype=torch.float64)

    def forward(self, q, kv, kv_mask=None):
        """q: [B, Nq, d], kv: [B, Nk, d], kv_mask: [B, Nk] bool -> [B, Nq, d]."""
        b, nq, d = q.shape
        nk = kv.shape[1]
        h, dh = self.heads, self.d_head
        if kv_mask is None:
            kv_mask = torch.ones(b, nk, dtype=torch.bool)
        if nk == 0:
            return q.new_zeros(b, nq, d)
        qh = self.q_proj(q).view(b, nq, h, dh).transpose(1, 2)
        kh = self.k_proj(kv).view(b, nk, h, dh).transpose(1, 2)
        vh = self.v_proj(kv).view(b, nk, h, dh).transpose(1, 2)
        score = qh @ kh.transpose(-1, -2) / math.sqrt(dh)  # [B, h, Nq, Nk]
        has_key = kv_mask.any(-1)
        # rows with no key attend over garbage and are zeroed afterwards (keeps gradients finite)
        mask = kv_mask | ~has_key[:, None]
        score = score.masked_fill(~mask[:, None, None, :], -math.inf)
        att = torch.softmax(score, dim=-1)
        out = (att @ vh).transpose(1, 2).reshape(b, nq, d)
        out = self.out_proj(out)
        return out * has_key[:, None, None].to(out.dtype)


class LaneGNN(nn.Module):
    """Relational mean aggregation over lane edges with a residual, repeated ``rounds`` times."""

    def __init__(self, d_model: int, rounds: int = 2):
        super().__init__()
        self.rounds = rounds
        self.maps = nn.ModuleList(
            nn.ModuleList(nn.Linear(d_model, d_model, dtype=torch.float64) for _ in range(N_LANE_RELATIONS))
            for _ in range(rounds)
        )

    def forward(self, h, src, dst, rel):
        """h: [N, d]; src/dst/rel: [E] lane messages flowing src -> dst."""
        n = h.shape[0]
        if src.numel() == 0:
            return h
        for maps in self.maps:
            msg = h.new_zeros(n, h.shape[1])
            for r, lin in enumerate(maps):
                sel = rel == r
                if not bool(sel.any()):
                    continue
                s, t = src[sel], dst[sel]
                total = h.new_zeros(n, h.shape[1]).index_add(0, t, h[s])
                count = h.new_zeros(n).index_add(0, t, torch.ones_like(t, dtype=h.dtype))
                has = count > 0
                mean = total / count.clamp(min=1.0)[:, None]
                msg = msg + torch.where(has[:, None], lin(mean), torch.zeros_like(mean))
            h = h + F.gelu(msg)
        return h


def lane_messages(successor_src, successor_dst, proximal_src, proximal_dst):
    """Expand lane edges into directed (src, dst, relation) message triples."""
    src = torch.cat([successor_src, successor_dst, proximal_src])
    dst = torch.cat([successor_dst, successor_src, proximal_dst])
    rel = torch.cat(
        [
            torch.zeros_like(successor_src),
            torch.ones_like(successor_src),
            torch.full_like(proximal_src, 2),
        ]
    )
    return src, dst, rel


class Fusion(nn.Module):
    def __init__(self, d_model: int, heads: int, lane_rounds: int = 2):
        super().__init__()
        self.surr = CrossAttention(d_model, heads)
        self.lane = CrossAttention(d_model, heads)
        self.lane_gnn = LaneGNN(d_model, lane_rounds)
        self.target = CrossAttention(d_model, heads)
        self.final = CrossAttention(d_model, heads)

    def fuse_surrounding(self, h_surr, g_surr, g_surr_mask):
        return self.surr(h_surr, g_surr, g_surr_mask) + h_surr

    def fuse_lanes(self, h_lane, lane_mask, sa, sa_mask, lane_src, lane_dst, lane_rel):
        """h_lane: [B, L, d] padded; lane_src/dst index the flattened valid rows."""
        stage = h_lane + self.lane(h_lane, sa, sa_mask)
        flat = stage[lane_mask]
        flat = self.lane_gnn(flat, lane_src, lane_dst, lane_rel)
        return stage.masked_scatter(lane_mask[..., None], flat) if flat.numel() else stage

    def fuse_target(self, h_target, g_target_steps):
        q = h_target[:, None]
        return (self.target(q, g_target_steps) + q)[:, 0]

    def fuse_final(self, ta, h_lanefinal, lane_mask):
        att = self.final(ta[:, None], h_lanefinal, lane_mask)[:, 0]
        return torch.cat([ta, att], dim=-1)
