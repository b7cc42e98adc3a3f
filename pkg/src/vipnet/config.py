"""Configuration dataclasses shared across the pipeline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field


CUE_NAMES = ("centrality", "area", "clarity", "lip", "action")
SPATIAL_CUES = ("centrality", "area", "clarity")
TEMPORAL_CUES = ("action", "lip")

FUSION_VARIANTS = ("transformer", "mlp", "gated", "none")


def default_seed() -> int:
    """Global seed fallback: VIP_SEED env var, else 0."""
    return int(os.environ.get("VIP_SEED", "0"))


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    text_layers: int = 2
    relate_layers: int = 2
    vocab_size: int = 4096
    max_frames: int = 64
    action_block: int = 8
    tau_cls: float = 0.07
    margin_threshold: float = 0.7
    fusion: str = "transformer"
    action_provider: str = "motion_energy"
    seed: int = field(default_factory=default_seed)

    def __post_init__(self):
        if self.fusion not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {self.fusion!r}")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    base_lr: float = 5e-5
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    seed: int = field(default_factory=default_seed)
    lambda_text: float = 0.5
    lambda_cont: float = 0.3
    lambda_reg: float = 0.0005
    tau_cont: float = 0.1
    view_fraction: float = 0.8


def config_fingerprint(*configs) -> str:
    """Stable hash of one or more config dataclasses / dicts."""
    payload = []
    for cfg in configs:
        if dataclasses.is_dataclass(cfg) and not isinstance(cfg, type):
            payload.append(dataclasses.asdict(cfg))
        else:
            payload.append(cfg)
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
