"""Trajectory heads, K-means mode selection, winner-takes-all losses and metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .scene import T_FUTURE

MISS_THRESHOLD = 2.0


class ConfigurationError(ValueError):
    pass


def sample_latents(batch: int, k: int, d_z: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randn(batch, k, d_z, generator=generator, dtype=torch.float64)


def offsets_to_positions(offsets, origin):
    """offsets: [..., t_f, 2] per-step displacements, origin: [..., 2] broadcastable."""
    return origin[..., None, :] + torch.cumsum(offsets, dim=-2)


class TrajectoryDecoder(nn.Module):
    """MLP over concat(f_fused, z) producing t_f x 2 step offsets."""

    def __init__(self, d_in: int, d_z: int, hidden: int, pos_scale: float = 10.0, t_f: int = T_FUTURE):
        super().__init__()
        self.d_z = d_z
        self.t_f = t_f
        self.pos_scale = pos_scale
        self.fc1 = nn.Linear(d_in + d_z, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, hidden, dtype=torch.float64)
        self.out = nn.Linear(hidden, t_f * 2, dtype=torch.float64)

    def forward(self, f_fused, z, origin):
        """f_fused: [B, D], z: [B, k, d_z], origin: [B, 2] -> [B, k, t_f, 2]."""
        b, k, _ = z.shape
        x = torch.cat([f_fused[:, None].expand(b, k, f_fused.shape[-1]), z], dim=-1)
        x = F.gelu(self.fc1(x))
        x = F.gelu(self.fc2(x))
        off = self.out(x).view(b, k, self.t_f, 2) * self.pos_scale
        return offsets_to_positions(off, origin[:, None])


class GraphDecoder(nn.Module):
    """K independent MLP branches decoding g_target into K trajectories."""

    def __init__(self, d_model: int, n_modes: int, hidden: int, pos_scale: float = 10.0, t_f: int = T_FUTURE):
        super().__init__()
        self.t_f = t_f
        self.pos_scale = pos_scale
        self.w1 = nn.Parameter(torch.empty(n_modes, hidden, d_model, dtype=torch.float64))
        self.b1 = nn.Parameter(torch.empty(n_modes, hidden, dtype=torch.float64))
        self.w2 = nn.Parameter(torch.empty(n_modes, t_f * 2, hidden, dtype=torch.float64))
        self.b2 = nn.Parameter(torch.empty(n_modes, t_f * 2, dtype=torch.float64))
        for w, b, fan_in in ((self.w1, self.b1, d_model), (self.w2, self.b2, hidden)):
            bound = 1 / math.sqrt(fan_in)
            nn.init.uniform_(w, -bound, bound)
            nn.init.uniform_(b, -bound, bound)

    def forward(self, g_target, origin):
        """g_target: [B, d], origin: [B, 2] -> [B, K, t_f, 2]."""
        hid = F.gelu(torch.einsum("bd,khd->bkh", g_target, self.w1) + self.b1)
        off = torch.einsum("bkh,koh->bko", hid, self.w2) + self.b2
        off = off.view(g_target.shape[0], -1, self.t_f, 2) * self.pos_scale
        return offsets_to_positions(off, origin[:, None])


def decode_modes(decoder: TrajectoryDecoder, f_fused, origin, k: int, n_modes: int, seed: int):
    """Draw ``k`` latent samples for one scene and decode them: [k, t_f, 2]."""
    if k < n_modes:
        raise ConfigurationError(f"sample count k={k} must be >= mode count K={n_modes}")
    g = torch.Generator().manual_seed(seed)
    z = sample_latents(1, k, decoder.d_z, g)
    return decoder(f_fused.reshape(1, -1), z, origin.reshape(1, 2))[0]


# ---------------------------------------------------------------------------
# clustering


@dataclass
class PredictionSet:
    modes: np.ndarray  # [K, t_f, 2], sorted by score descending
    scores: np.ndarray  # [K], sums to 1
    aux_modes: np.ndarray | None = None  # [K, t_f, 2] from the graph head


def cluster_modes(samples, n_modes: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's K-means on flattened trajectories with seeded farthest-point init.

    Samples are sorted lexicographically first so the result does not depend
    on their order. Returns (centroids [K, t_f, 2], member fractions [K]),
    sorted by fraction descending.
    """
    samples = np.asarray(samples, dtype=np.float64)
    k = samples.shape[0]
    if k < n_modes:
        raise ConfigurationError(f"need at least K={n_modes} samples, got {k}")
    shape = samples.shape[1:]
    x = samples.reshape(k, -1)
    x = x[np.lexsort(x.T[::-1])]

    rng = np.random.default_rng(seed)
    centers = [x[int(rng.integers(k))]]
    nearest = np.linalg.norm(x - centers[0], axis=1)
    for _ in range(1, n_modes):
        i = int(np.argmax(nearest))
        centers.append(x[i])
        nearest = np.minimum(nearest, np.linalg.norm(x - x[i], axis=1))
    c = np.array(centers)

    for _ in range(max_iter):
        d = np.linalg.norm(x[:, None, :] - c[None], axis=-1)
        assign = np.argmin(d, axis=1)
        new = c.copy()
        taken = np.zeros(k, dtype=bool)
        for j in range(n_modes):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        for j in range(n_modes):
            if not (assign == j).any():
                # reseed an empty cluster at the sample farthest from its centre
                far = d[np.arange(k), assign].copy()
                far[taken] = -1.0
                i = int(np.argmax(far))
                taken[i] = True
                new[j] = x[i]
        shift = np.linalg.norm(new - c, axis=1).max()
        c = new
        if shift < tol:
            break

    d = np.linalg.norm(x[:, None, :] - c[None], axis=-1)
    assign = np.argmin(d, axis=1)
    counts = np.bincount(assign, minlength=n_modes).astype(np.float64)
    scores = counts / counts.sum()
    order = np.argsort(-scores, kind="stable")
    return c[order].reshape(n_modes, *shape), scores[order]


# ---------------------------------------------------------------------------
# losses


def wta_loss(trajectories, gt):
    """Min over modes of the mean per-step L2 error.

    trajectories: [..., M, t_f, 2], gt: [..., t_f, 2] -> [...].
    """
    if trajectories.shape[-2:] != gt.shape[-2:]:
        raise ValueError(f"trajectory shape {tuple(trajectories.shape[-2:])} != gt shape {tuple(gt.shape[-2:])}")
    err = torch.linalg.vector_norm(trajectories - gt[..., None, :, :], dim=-1).mean(-1)
    return err.min(-1).values


@dataclass(frozen=True)
class LossReport:
    l_fr: float
    l_gr: float
    l_total: float
    lambda1: float
    lambda2: float


def combined_loss(l_fr, l_gr, lambda1: float = 1.0, lambda2: float = 0.5):
    """lambda1 * l_fr + lambda2 * l_gr; accepts floats or tensors."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda1 * l_fr + lambda2 * l_gr


def loss_report(l_fr: float, l_gr: float, lambda1: float = 1.0, lambda2: float = 0.5) -> LossReport:
    return LossReport(l_fr, l_gr, combined_loss(l_fr, l_gr, lambda1, lambda2), lambda1, lambda2)


# ---------------------------------------------------------------------------
# metrics


def displacement_metrics(modes, gt) -> dict:
    """ADE / FDE / miss indicator over every given mode."""
    modes = np.asarray(modes, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    err = np.hypot(*(modes - gt[None]).transpose(2, 0, 1))  # [M, t_f]
    return {
        "ade": float(err.mean(axis=1).min()),
        "fde": float(err[:, -1].min()),
        "mr": float(err.max(axis=1).min() > MISS_THRESHOLD),
    }


def metrics(pred: PredictionSet, gt, k_eval: int) -> dict:
    if len(pred.modes) < k_eval:
        raise ValueError(f"prediction has {len(pred.modes)} modes, fewer than k_eval={k_eval}")
    return displacement_metrics(pred.modes[:k_eval], gt)
