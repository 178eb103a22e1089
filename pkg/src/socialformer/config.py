"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

LR_SCHEDULES = ("constant", "cosine")


@dataclass
class RunConfig:
    # architecture
    d_model: int = 64
    heads: int = 4
    layers: int = 1
    k: int = 64
    K: int = 10
    d_z: int = 16
    decoder_hidden: int = 128
    lane_gnn_rounds: int = 2
    m_surr: int = 16
    surr_neighbors: str = "both"
    pos_scale: float = 10.0
    attr_distance_scale: float = 50.0
    learn_edge_attr: bool = True
    # objective
    lambda1: float = 1.0
    lambda2: float = 0.5
    # optimisation
    learning_rate: float = 0.001
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over the run's total steps
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 10
    max_steps: int = 0  # 0 = no cap
    seed: int = 0
    num_threads: int = 1
    # clustering
    cluster_max_iter: int = 100
    cluster_tol: float = 1e-6
    # io
    train_scenes: str = ""
    val_scenes: str = ""
    checkpoint: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("d_model", "heads", "layers", "k", "K", "d_z", "decoder_hidden", "m_surr", "batch_size",
                    "num_threads", "cluster_max_iter")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "max_steps", "lane_gnn_rounds", "weight_decay", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.learning_rate <= 0 or self.pos_scale <= 0 or self.attr_distance_scale <= 0:
            raise ValueError("learning_rate, pos_scale and attr_distance_scale must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.k < self.K:
            raise ValueError(f"k={self.k} samples must be >= K={self.K} modes")
        if self.surr_neighbors not in ("both", "in", "out"):
            raise ValueError("surr_neighbors must be 'both', 'in' or 'out'")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def _coerce(kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
