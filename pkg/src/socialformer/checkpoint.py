"""Checkpoint archive and prediction files.

A checkpoint is an uncompressed ``.npz`` holding:

* ``__schema__``: the UTF-8 bytes of ``sf-ckpt/1``
* ``__config__``: the UTF-8 JSON of the RunConfig
* one little-endian float64 array per parameter or buffer, keyed by its
  dotted module path (``dynamic.layers.0.w_att``)
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .model import SocialFormer
from .predictor import PredictionSet

CKPT_SCHEMA = "sf-ckpt/1"
PRED_SCHEMA = "sf-pred/1"


class SchemaError(ValueError):
    pass


def parameter_store(model: SocialFormer) -> dict[str, np.ndarray]:
    out = {}
    for name, t in model.state_dict().items():
        out[name] = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f8"))
    return out


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def save_checkpoint(model: SocialFormer, path):
    arrays = parameter_store(model)
    arrays["__schema__"] = _text(CKPT_SCHEMA)
    arrays["__config__"] = _text(json.dumps(model.config.to_dict(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> SocialFormer:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__schema__" not in z.files:
            raise SchemaError(f"{path}: not a checkpoint (no schema tag)")
        schema = z["__schema__"].tobytes().decode("utf-8")
        if schema != CKPT_SCHEMA:
            raise SchemaError(f"{path}: checkpoint schema {schema!r}, expected {CKPT_SCHEMA!r}")
        config = RunConfig.from_dict(json.loads(z["__config__"].tobytes().decode("utf-8")))
        arrays = {k: z[k] for k in z.files if not k.startswith("__")}
    model = SocialFormer(config)
    expected = model.state_dict()
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise SchemaError(f"{path}: parameter paths differ (missing {missing}, unexpected {extra})")
    state = {}
    for name, ref in expected.items():
        a = arrays[name]
        if tuple(a.shape) != tuple(ref.shape):
            raise SchemaError(f"{path}: {name} has shape {a.shape}, expected {tuple(ref.shape)}")
        state[name] = torch.from_numpy(a.astype(np.float64))
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# predictions


def prediction_record(scene_id: str, pred: PredictionSet) -> dict:
    rec = {
        "schema": PRED_SCHEMA,
        "scene_id": scene_id,
        "modes": np.asarray(pred.modes).tolist(),
        "scores": np.asarray(pred.scores).tolist(),
    }
    if pred.aux_modes is not None:
        rec["aux_modes"] = np.asarray(pred.aux_modes).tolist()
    return rec


def write_predictions(path, scene_ids, preds):
    with open(path, "wb") as fh:
        for sid, p in zip(scene_ids, preds):
            line = json.dumps(prediction_record(sid, p), sort_keys=True, separators=(",", ":"), allow_nan=False)
            fh.write(line.encode("utf-8") + b"\n")


def read_predictions(path) -> dict[str, PredictionSet]:
    out = {}
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema") != PRED_SCHEMA:
                raise SchemaError(f"{path}:{lineno}: schema {rec.get('schema')!r}, expected {PRED_SCHEMA!r}")
            aux = rec.get("aux_modes")
            out[rec["scene_id"]] = PredictionSet(np.asarray(rec["modes"], dtype=np.float64),
                                                 np.asarray(rec["scores"], dtype=np.float64),
                                                 None if aux is None else np.asarray(aux, dtype=np.float64))
    return out
