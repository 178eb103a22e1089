"""Training loop, inference and evaluation."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .batching import SceneTensors, collate, scene_tensors
from .config import RunConfig
from .model import SocialFormer, build_model
from .predictor import PredictionSet, cluster_modes, combined_loss, loss_report, metrics, sample_latents
from .scene import Scene, read_scenes

log = logging.getLogger(__name__)

K_EVAL = (5, 10)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, scene_id: str, step: int):
        super().__init__(f"non-finite loss at step {step} (scene {scene_id!r})")
        self.scene_id = scene_id
        self.step = step


def scene_seed(seed: int, scene_id: str) -> int:
    """Per-scene latent seed, independent of batch composition and order."""
    return (seed * 1_000_003 + zlib.crc32(scene_id.encode("utf-8"))) % (2**63)


def scene_latents(config: RunConfig, scene_ids: Sequence[str]) -> torch.Tensor:
    rows = []
    for sid in scene_ids:
        g = torch.Generator().manual_seed(scene_seed(config.seed, sid))
        rows.append(sample_latents(1, config.k, config.d_z, g))
    return torch.cat(rows)


def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _tensors(scenes) -> list[SceneTensors]:
    return [s if isinstance(s, SceneTensors) else scene_tensors(s) for s in scenes]


# ---------------------------------------------------------------------------
# inference


@torch.no_grad()
def predict(model: SocialFormer, scenes, batch_size: Optional[int] = None) -> list[PredictionSet]:
    cfg = model.config
    items = _tensors(scenes)
    out = []
    model.eval()
    for chunk in _chunks(items, batch_size or cfg.batch_size):
        batch = collate(chunk, cfg.m_surr, cfg.surr_neighbors)
        res = model(batch, scene_latents(cfg, batch.scene_ids))
        samples = res.samples.numpy()
        aux = res.graph_modes.numpy()
        for i, sid in enumerate(batch.scene_ids):
            modes, scores = cluster_modes(samples[i], cfg.K, scene_seed(cfg.seed, sid), cfg.cluster_max_iter,
                                          cfg.cluster_tol)
            out.append(PredictionSet(modes, scores, aux[i].copy()))
    return out


def summarize(preds: Sequence[PredictionSet], futures, k_eval: int) -> dict:
    rows = [metrics(p, gt, k_eval) for p, gt in zip(preds, futures)]
    return {key: float(np.mean([r[key] for r in rows])) for key in ("ade", "fde", "mr")}


def evaluate(model: SocialFormer, scenes: Sequence[Scene], k_eval: Sequence[int] | int = K_EVAL) -> dict:
    """Mean ADE/FDE/MR per k plus the count of scenes without any interaction edge."""
    if not scenes:
        raise ValueError("no scenes to evaluate")
    ks = (k_eval,) if isinstance(k_eval, int) else tuple(k_eval)
    preds = predict(model, scenes)
    futures = [np.asarray(s.future) for s in scenes]
    report = {"n_scenes": len(scenes), "n_without_relations": sum(not s.has_relations() for s in scenes)}
    for k in ks:
        for key, value in summarize(preds, futures, k).items():
            report[f"{key}_{k}"] = value
    return report


@torch.no_grad()
def dataset_loss(model: SocialFormer, scenes, batch_size: Optional[int] = None) -> dict:
    """Objective over a scene set with the fixed per-scene latents used at inference."""
    cfg = model.config
    items = _tensors(scenes)
    total = {"l_fr": 0.0, "l_gr": 0.0}
    for chunk in _chunks(items, batch_size or cfg.batch_size):
        batch = collate(chunk, cfg.m_surr, cfg.surr_neighbors)
        l_fr, l_gr = model.losses(model(batch, scene_latents(cfg, batch.scene_ids)), batch)
        total["l_fr"] += float(l_fr) * batch.size
        total["l_gr"] += float(l_gr) * batch.size
    l_fr, l_gr = total["l_fr"] / len(items), total["l_gr"] / len(items)
    return {"l_fr": l_fr, "l_gr": l_gr, "l_total": combined_loss(l_fr, l_gr, cfg.lambda1, cfg.lambda2)}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SocialFormer
    steps: list = field(default_factory=list)  # per-step loss records
    epochs: list = field(default_factory=list)  # per-epoch records with validation metrics


def total_steps(config: RunConfig, n_scenes: int) -> int:
    per_epoch = math.ceil(n_scenes / config.batch_size)
    steps = per_epoch * config.epochs
    return min(steps, config.max_steps) if config.max_steps else steps


def lr_factor(config: RunConfig, n_steps: int):
    """Multiplier on the base learning rate as a function of the update index."""
    if config.lr_schedule == "cosine":
        return lambda t: 0.5 * (1.0 + math.cos(math.pi * min(t, n_steps) / max(n_steps, 1)))
    return lambda t: 1.0


def _check_finite(batch, out, step):
    per_scene_fr = ((out.samples - batch.future[:, None]).norm(dim=-1).mean(-1)).min(-1).values
    per_scene_gr = ((out.graph_modes - batch.future[:, None]).norm(dim=-1).mean(-1)).min(-1).values
    bad = ~(torch.isfinite(per_scene_fr) & torch.isfinite(per_scene_gr))
    idx = int(bad.nonzero()[0]) if bad.any() else 0
    raise NonFiniteLossError(batch.scene_ids[idx], step)


def train(config: RunConfig, train_scenes: Optional[Sequence[Scene]] = None,
          val_scenes: Optional[Sequence[Scene]] = None, model: Optional[SocialFormer] = None,
          on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """AdamW on lambda1 * l_fr + lambda2 * l_gr.

    Scenes default to the files named in the config. The run is a pure
    function of the config and the data: shuffling, latents and initial
    weights all derive from ``config.seed``.
    """
    torch.set_num_threads(config.num_threads)
    if train_scenes is None:
        if not config.train_scenes:
            raise ValueError("no training scenes given")
        train_scenes = read_scenes(config.train_scenes)
    if val_scenes is None and config.val_scenes:
        val_scenes = read_scenes(config.val_scenes)
    if not train_scenes:
        raise ValueError("training scene set is empty")

    model = model if model is not None else build_model(config)
    items = _tensors(train_scenes)
    opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_factor(config, total_steps(config, len(items))))
    rng = np.random.default_rng(config.seed)
    zgen = torch.Generator().manual_seed(config.seed + 1)
    result = TrainResult(model)
    step = 0
    for epoch in range(config.epochs):
        if config.max_steps and step >= config.max_steps:
            break
        model.train()
        order = rng.permutation(len(items))
        sums = {"l_fr": 0.0, "l_gr": 0.0, "l_total": 0.0}
        n_steps = 0
        for chunk in _chunks(order, config.batch_size):
            if config.max_steps and step >= config.max_steps:
                break
            batch = collate([items[i] for i in chunk], config.m_surr, config.surr_neighbors)
            z = sample_latents(batch.size, config.k, config.d_z, zgen)
            out = model(batch, z)
            l_fr, l_gr = model.losses(out, batch)
            loss = combined_loss(l_fr, l_gr, config.lambda1, config.lambda2)
            if not math.isfinite(loss.item()):
                _check_finite(batch, out, step)
            lr = opt.param_groups[0]["lr"]
            opt.zero_grad(set_to_none=False)
            loss.backward()
            opt.step()
            sched.step()
            rep = loss_report(l_fr.item(), l_gr.item(), config.lambda1, config.lambda2)
            record = {"step": step, "epoch": epoch, "l_fr": rep.l_fr, "l_gr": rep.l_gr, "l_total": rep.l_total,
                      "lambda1": rep.lambda1, "lambda2": rep.lambda2, "objective": loss.item(), "lr": lr}
            result.steps.append(record)
            if on_step:
                on_step(record)
            for key in sums:
                sums[key] += record[key]
            n_steps += 1
            step += 1
        entry = {"epoch": epoch, "steps": n_steps}
        entry.update({key: value / max(n_steps, 1) for key, value in sums.items()})
        if val_scenes:
            report = evaluate(model, val_scenes)
            entry.update({key: report[key] for key in ("ade_5", "mr_5", "fde_5", "ade_10", "mr_10", "fde_10")})
        log.info("epoch %d %s", epoch, entry)
        result.epochs.append(entry)
    return result
