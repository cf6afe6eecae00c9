"""Multi-agent vehicle trajectory prediction.

A conditional diffusion model simulates neighbor futures as latent features;
a GRU + cross-attention encoder fuses them with the observed histories and an
LSTM decoder emits a bivariate Gaussian per future step.
"""

from .config import Config, ModelConfig, TrainConfig, load_config
from .data import DatasetSplit, Scene, gen_synthetic, load_scenes, save_scenes, split_dataset
from .errors import CdsTrajError, ConfigError, ContractError, DataError, DeterminismError, DimensionError, NumericError, SchemaError

__version__ = "0.1.0"

__all__ = [
    "CdsTrajError",
    "Config",
    "ConfigError",
    "ContractError",
    "DataError",
    "DatasetSplit",
    "DeterminismError",
    "DimensionError",
    "ModelConfig",
    "NumericError",
    "Scene",
    "SchemaError",
    "TrainConfig",
    "gen_synthetic",
    "load_config",
    "load_scenes",
    "save_scenes",
    "split_dataset",
]
