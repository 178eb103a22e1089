"""Edge-enhanced heterogeneous graph transformer layer.

Nodes carry a type (vehicle / human) and edges carry a relation type plus the
attribute vector [distance, path_distance, edge_probability]. Per edge and
head the attributes are turned into a diagonal matrix ``I + diag(P a)`` that
scales both the attention bilinear form and the message.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .scene import AGENT_TYPES, RELATIONS, InteractionEdge

N_NODE_TYPES = len(AGENT_TYPES)
N_RELATIONS = len(RELATIONS)
N_EDGE_ATTRS = 3


class GraphStructureError(ValueError):
    pass


class TypedLinear(nn.Module):
    """A separate affine map per node type, applied row-wise by type index."""

    def __init__(self, d_in, d_out, n_types=N_NODE_TYPES):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_types, d_out, d_in, dtype=torch.float64))
        self.bias = nn.Parameter(torch.empty(n_types, d_out, dtype=torch.float64))
        bound = 1 / math.sqrt(d_in)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x, types):
        return torch.einsum("ni,noi->no", x, self.weight[types]) + self.bias[types]


class EHGTLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, attr_distance_scale: float = 50.0):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.q_lin = TypedLinear(d_model, d_model)
        self.k_lin = TypedLinear(d_model, d_model)
        self.m_lin = TypedLinear(d_model, d_model)
        self.a_lin = TypedLinear(d_model, d_model)
        shape = (N_RELATIONS, heads, self.d_head, self.d_head)
        self.w_att = nn.Parameter(torch.empty(shape, dtype=torch.float64))
        self.w_msg = nn.Parameter(torch.empty(shape, dtype=torch.float64))
        self.p_attr = nn.Parameter(torch.zeros(N_RELATIONS, heads, self.d_head, N_EDGE_ATTRS, dtype=torch.float64))
        self.mu = nn.Parameter(torch.ones(N_NODE_TYPES, N_RELATIONS, N_NODE_TYPES, dtype=torch.float64))
        bound = math.sqrt(6.0 / (2 * self.d_head))
        nn.init.uniform_(self.w_att, -bound, bound)
        nn.init.uniform_(self.w_msg, -bound, bound)
        # per-relation affine standardisation of [distance, path_distance, probability]
        scale = torch.tensor([1 / attr_distance_scale, 1 / attr_distance_scale, 1.0], dtype=torch.float64)
        self.register_buffer("attr_scale", scale.repeat(N_RELATIONS, 1))
        self.register_buffer("attr_shift", torch.zeros(N_RELATIONS, N_EDGE_ATTRS, dtype=torch.float64))

    def edge_gain(self, etype, attr):
        """Diagonal of the edge-attribute matrix per edge and head: [E, h, d_h]."""
        a = (attr - self.attr_shift[etype]) * self.attr_scale[etype]
        return 1.0 + torch.einsum("ehdk,ek->ehd", self.p_attr[etype], a)

    def forward(self, x, node_type, src, dst, etype, attr, target_mask=None, return_attention=False):
        """One layer over all nodes.

        x: [N, d] node inputs; node_type: [N]; src/dst/etype: [E]; attr: [E, 3] raw
        attributes; target_mask: [N] bool of nodes that receive an update.
        Returns the updated [N, d] tensor (and [E, h] attention weights).
        """
        n, h, dh = x.shape[0], self.heads, self.d_head
        if target_mask is None:
            target_mask = torch.ones(n, dtype=torch.bool)
        n_edges = src.numel()
        keep = target_mask[dst] if n_edges else torch.zeros(0, dtype=torch.bool)
        if not bool(keep.all()):
            src, dst, etype, attr = src[keep], dst[keep], etype[keep], attr[keep]
        if src.numel() == 0:
            return (x, x.new_zeros(n_edges, h)) if return_attention else x

        q = self.q_lin(x, node_type).view(n, h, dh)
        k = self.k_lin(x, node_type).view(n, h, dh)
        m = self.m_lin(x, node_type).view(n, h, dh)
        gain = self.edge_gain(etype, attr)

        k_att = torch.einsum("ehd,ehdf->ehf", k[src], self.w_att[etype])
        mu = self.mu[node_type[src], etype, node_type[dst]]
        score = (k_att * gain * q[dst]).sum(-1) * (mu / math.sqrt(dh))[:, None]

        # softmax over the in-edges of each target, per head
        idx = dst[:, None].expand(-1, h)
        peak = torch.full((n, h), -math.inf, dtype=x.dtype).scatter_reduce(0, idx, score.detach(), "amax")
        w = torch.exp(score - peak[dst])
        denom = torch.zeros(n, h, dtype=x.dtype).index_add(0, dst, w)
        att = w / denom[dst]

        msg = torch.einsum("ehd,ehdf->ehf", m[src] * gain, self.w_msg[etype])
        agg = torch.zeros(n, h, dh, dtype=x.dtype).index_add(0, dst, att[..., None] * msg)
        agg = agg.reshape(n, self.d_model)

        has_in = torch.zeros(n, dtype=torch.bool)
        has_in[dst] = True
        upd = self.a_lin(F.gelu(agg), node_type) + x
        out = torch.where(has_in[:, None], upd, x)
        if not return_attention:
            return out
        if att.shape[0] != n_edges:
            att = x.new_zeros(n_edges, h).index_put((keep.nonzero(as_tuple=True)[0],), att)
        return out, att


# ---------------------------------------------------------------------------
# domain-level API


@dataclass
class TypedNodeSet:
    ids: list[str]
    types: list[str]
    embeddings: torch.Tensor  # [N, d_model]

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise GraphStructureError("node ids must be unique")

    def __getitem__(self, node_id):
        return self.embeddings[self.ids.index(node_id)]


def edge_tensors(edges: Sequence[InteractionEdge], index: dict[str, int]):
    src = torch.tensor([index[e.src_id] for e in edges], dtype=torch.long)
    dst = torch.tensor([index[e.dst_id] for e in edges], dtype=torch.long)
    etype = torch.tensor([RELATIONS.index(e.relation) for e in edges], dtype=torch.long)
    attr = torch.tensor([e.attributes() for e in edges], dtype=torch.float64).reshape(-1, N_EDGE_ATTRS)
    return src, dst, etype, attr


def edge_attr_matrix(edge: InteractionEdge, layer: EHGTLayer, head: int) -> torch.Tensor:
    """The d_h x d_h edge-attribute matrix of one edge for one head."""
    etype = torch.tensor([RELATIONS.index(edge.relation)])
    attr = torch.tensor([edge.attributes()], dtype=torch.float64)
    return torch.diag(layer.edge_gain(etype, attr)[0, head])


def ehgt_layer(
    nodes: TypedNodeSet,
    edges: Sequence[InteractionEdge],
    layer: EHGTLayer,
    target_ids: Optional[Sequence[str]] = None,
    return_attention: bool = False,
):
    index = {nid: i for i, nid in enumerate(nodes.ids)}
    for e in edges:
        if e.src_id not in index or e.dst_id not in index:
            raise GraphStructureError(f"edge {e.src_id!r}->{e.dst_id!r} references a node outside the set")
    targets = nodes.ids if target_ids is None else list(target_ids)
    missing = [t for t in targets if t not in index]
    if missing:
        raise GraphStructureError(f"target ids {missing} are not nodes")
    mask = torch.zeros(len(nodes.ids), dtype=torch.bool)
    mask[[index[t] for t in targets]] = True
    types = torch.tensor([AGENT_TYPES.index(t) for t in nodes.types], dtype=torch.long)
    src, dst, etype, attr = edge_tensors(edges, index)
    out = layer(nodes.embeddings, types, src, dst, etype, attr, mask, return_attention=return_attention)
    if return_attention:
        out, att = out
        return TypedNodeSet(list(nodes.ids), list(nodes.types), out), att
    return TypedNodeSet(list(nodes.ids), list(nodes.types), out)
