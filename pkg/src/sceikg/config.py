"""Configuration dataclasses shared across the pipeline.

``TrainConfig`` mirrors the published experimental defaults (seed 2019,
lr 1e-4, three propagation layers of [64, 32, 16], LSTM hidden size 64,
record length 128, IKG batch 2048, patience 50, Top-K = [5, 10, 20]).
``WorldSpec`` scales the synthetic world to roughly 1/30 of the real
dataset it stands in for.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass
class TrainConfig:
    # optimization
    lr: float = 1e-4
    epochs: int = 1000
    ikg_batch: int = 2048
    patient_batch: int = 1
    seed: int = 2019
    patience: int = 50
    grad_clip: float = 5.0
    lam: float = 1e-2          # herb-compatibility regularizer weight
    lam_theta: float = 1e-5    # L2 regularization weight
    # model dims
    embed_dim: int = 64        # entity/relation embedding size
    layer_dims: tuple[int, ...] = (64, 32, 16)
    hidden_dim: int = 64       # recurrent cell size
    text_embed_dim: int = 64   # token-state width of the default text encoder
    text_hash_buckets: int = 4096
    max_text_tokens: int = 128
    dropout: float = 0.5
    leaky_slope: float = 0.2
    score_modulus: float = 1.0  # C in the sine triple score
    # behavior switches
    transition_input: str = "truth"   # {"truth", "predicted"}
    variant: str = "full"             # {"full","no_sequence","no_state","no_R","no_ikg"}
    corrupt_heads: bool = False
    deterministic: bool = True
    # evaluation / stopping
    top_k: tuple[int, ...] = (5, 10, 20)
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    eval_every: int = 1
    stop_at_recall: float | None = None  # optional early exit on val recall@20

    VARIANTS = ("full", "no_sequence", "no_state", "no_R", "no_ikg")

    def __post_init__(self):
        if self.transition_input not in ("truth", "predicted"):
            raise ValueError(f"transition_input must be 'truth' or 'predicted', got {self.transition_input!r}")
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {self.VARIANTS}")
        for name in ("lr", "epochs", "ikg_batch", "patient_batch", "patience",
                     "embed_dim", "hidden_dim", "max_text_tokens"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.split}")

    @property
    def out_dim(self) -> int:
        """Width of the concatenated entity codes (input layer plus all propagation layers)."""
        return self.embed_dim + sum(self.layer_dims)


@dataclass
class WorldSpec:
    symptoms: int = 200
    herbs: int = 60
    extra_entities: int = 500
    relations: int = 6
    patients: int = 200
    max_visits: int = 8
    latent_dim: int = 8
    avg_visits: float = 3.68
    seed: int = 7

    def __post_init__(self):
        if self.symptoms <= 0 or self.herbs <= 0:
            raise ValueError("world needs at least one symptom and one herb")
        for name in ("relations", "patients", "max_visits", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (1.0 <= self.avg_visits <= self.max_visits):
            raise ValueError("avg_visits must lie in [1, max_visits]")


def config_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def config_hash(cfg) -> str:
    """Stable short hash of a config (or plain dict), used to stamp artifacts."""
    d = cfg if isinstance(cfg, dict) else config_to_dict(cfg)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_TUPLE_FIELDS = {"layer_dims", "top_k", "split"}


def _from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if k in _TUPLE_FIELDS and v is not None else v
    return cls(**kwargs)


def train_config_from_dict(data: dict) -> TrainConfig:
    return _from_dict(TrainConfig, data)


def world_spec_from_dict(data: dict) -> WorldSpec:
    return _from_dict(WorldSpec, data)
