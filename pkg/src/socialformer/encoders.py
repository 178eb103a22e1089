"""Per-element MLP + GRU encoders for lane pose sequences and agent tracks."""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .scene import AgentTrack, LaneGraph, N_POSE, T_OBS

LANE_FEATURES = 5
AGENT_FEATURES = 5


class EncodingError(ValueError):
    pass


class MLP(nn.Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in, d_hidden, d_out):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(d_hidden, d_out, dtype=torch.float64)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def feature_scale(kind: str, pos_scale: float) -> torch.Tensor:
    # positions (and speeds) are divided by pos_scale; angles, flags and rates pass unchanged
    if kind == "lane":
        vals = [1 / pos_scale, 1 / pos_scale, 1.0, 1.0, 1.0]
    else:
        vals = [1 / pos_scale, 1 / pos_scale, 1 / pos_scale, 1.0, 1.0]
    return torch.tensor(vals, dtype=torch.float64)


def masked_gru(cell: nn.GRUCell, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Run ``cell`` over ``x[:, t]`` from a zero state, holding the state where ``mask`` is False."""
    h = x.new_zeros(x.shape[0], cell.hidden_size)
    for t in range(x.shape[1]):
        h_new = cell(x[:, t], h)
        h = torch.where(mask[:, t, None], h_new, h)
    return h


class SequenceEncoder(nn.Module):
    def __init__(self, d_in: int, d_model: int, kind: str = "agent", pos_scale: float = 10.0):
        super().__init__()
        self.register_buffer("scale", feature_scale(kind, pos_scale))
        self.mlp = MLP(d_in, d_model, d_model)
        self.gru = nn.GRUCell(d_model, d_model, dtype=torch.float64)

    def embed(self, x):
        return self.mlp(x * self.scale)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """x: [N, T, F] raw features, mask: [N, T] validity -> [N, d_model]."""
        return masked_gru(self.gru, self.embed(x), mask)


class TypedMLP(nn.Module):
    """One MLP per agent type; rows are routed by their type index."""

    def __init__(self, d_in: int, d_model: int, n_types: int = 2, pos_scale: float = 10.0):
        super().__init__()
        self.register_buffer("scale", feature_scale("agent", pos_scale))
        self.mlps = nn.ModuleList(MLP(d_in, d_model, d_model) for _ in range(n_types))

    def forward(self, x, types):
        out = x.new_zeros(x.shape[0], self.mlps[0].fc2.out_features)
        xs = x * self.scale
        for k, mlp in enumerate(self.mlps):
            sel = types == k
            if sel.any():
                out = out.index_put((sel.nonzero(as_tuple=True)[0],), mlp(xs[sel]))
        return out


class AgentEncoders(nn.Module):
    """The three sequence encoders: lane nodes, target agent, surrounding agents."""

    def __init__(self, d_model: int, pos_scale: float = 10.0):
        super().__init__()
        self.lane = SequenceEncoder(LANE_FEATURES, d_model, "lane", pos_scale)
        self.target = SequenceEncoder(AGENT_FEATURES, d_model, "agent", pos_scale)
        self.surrounding = SequenceEncoder(AGENT_FEATURES, d_model, "agent", pos_scale)


def lane_tensors(lane_graph: LaneGraph):
    """Padded pose tensor [N, N_POSE, 5] and prefix mask [N, N_POSE] in node-id order."""
    n = len(lane_graph.nodes)
    x = torch.zeros(n, N_POSE, LANE_FEATURES, dtype=torch.float64)
    mask = torch.zeros(n, N_POSE, dtype=torch.bool)
    for i, node in enumerate(lane_graph.nodes):
        feats = [p.features() for p in node.poses]
        if not all(math.isfinite(v) for f in feats for v in f):
            raise EncodingError(f"lane node {node.id!r} has a non-finite pose feature")
        x[i, : len(feats)] = torch.tensor(feats, dtype=torch.float64)
        mask[i, : len(feats)] = True
    return x, mask


def track_tensors(tracks):
    x = torch.zeros(len(tracks), T_OBS, AGENT_FEATURES, dtype=torch.float64)
    mask = torch.zeros(len(tracks), T_OBS, dtype=torch.bool)
    for i, t in enumerate(tracks):
        for k, s in enumerate(t.states):
            if s.present:
                if not all(math.isfinite(v) for v in s.features()):
                    raise EncodingError(f"track {t.id!r} state {k} is not finite")
                x[i, k] = torch.tensor(s.features(), dtype=torch.float64)
                mask[i, k] = True
    return x, mask


def encode_lane_nodes(lane_graph: LaneGraph, encoder: SequenceEncoder) -> dict[str, torch.Tensor]:
    x, mask = lane_tensors(lane_graph)
    h = encoder(x, mask)
    return {node.id: h[i] for i, node in enumerate(lane_graph.nodes)}


def encode_agent_track(track: AgentTrack, role: str, encoders: AgentEncoders) -> torch.Tensor:
    if role not in ("target", "surrounding"):
        raise ValueError(f"role must be 'target' or 'surrounding', got {role!r}")
    if not any(track.present_mask()):
        raise EncodingError(f"track {track.id!r} has no present frame")
    x, mask = track_tensors([track])
    return getattr(encoders, role)(x, mask)[0]
