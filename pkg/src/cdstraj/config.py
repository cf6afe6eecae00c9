"""Model and training configuration, loaded from one JSON document."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError

ABLATIONS = ("diffusion", "temporal", "spatial", "fusion", "decoder")


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    d_c: int = 32
    n_max: int = 8
    gamma: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.05
    K: int = 5
    leaky_slope: float = 0.1
    pos_scale: float = 10.0
    init_seed: int = 0
    ablate: str | None = None

    def __post_init__(self):
        if self.d < 1 or self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of n_heads={self.n_heads}")
        if self.d_c < 1 or self.n_max < 0 or self.K < 1:
            raise ConfigError("d_c, K must be >= 1 and n_max >= 0")
        if self.gamma < 1 or not (0 < self.beta_min <= self.beta_max < 1):
            raise ConfigError("need gamma >= 1 and 0 < beta_min <= beta_max < 1")
        if not (0 < self.leaky_slope < 1) or self.pos_scale <= 0:
            raise ConfigError("leaky_slope must lie in (0, 1) and pos_scale > 0")
        if self.ablate is not None and self.ablate not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablate!r}; expected one of {ABLATIONS}")

    @property
    def d_h(self) -> int:
        return self.d // self.n_heads

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(d=16, n_heads=2, d_c=8, n_max=4, gamma=20, beta_max=0.35, K=5)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    stage1_epochs: int = 40
    stage2_epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip_norm: float = 5.0
    nll_weight_alpha: float = 1.0
    diffusion_loss_weight: float = 1.0
    seed: int = 0
    teacher_mode: bool = False
    eval_K: int = 1

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epoch counts must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0 or self.nll_weight_alpha <= 0:
            raise ConfigError("learning_rate, grad_clip_norm and nll_weight_alpha must be positive")
        if self.diffusion_loss_weight < 0:
            raise ConfigError("diffusion_loss_weight must be >= 0")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError("adam_betas must be two numbers in [0, 1)")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"model": dataclasses.asdict(self.model), "train": dataclasses.asdict(self.train)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "Config":
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        # accept both {"model": {...}, "train": {...}} and a flat document
        flat = dict(doc.get("model", {}))
        flat.update(doc.get("train", {}))
        flat.update({k: v for k, v in doc.items() if k not in ("model", "train")})
        unknown = set(flat) - model_keys - train_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = ModelConfig(**{k: v for k, v in flat.items() if k in model_keys})
            train = TrainConfig(**{k: v for k, v in flat.items() if k in train_keys})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(model, train)


def load_config(path=None, env: dict | None = None) -> Config:
    """Read a JSON config; ``CDSTRAJ_SEED`` in the environment overrides ``seed``."""
    if path is None:
        cfg = Config()
    else:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = Config.from_dict(doc)
    env = os.environ if env is None else env
    if env.get("CDSTRAJ_SEED"):
        try:
            cfg.train.seed = int(env["CDSTRAJ_SEED"])
        except ValueError as exc:
            raise ConfigError(f"CDSTRAJ_SEED must be an integer, got {env['CDSTRAJ_SEED']!r}") from exc
    return cfg
