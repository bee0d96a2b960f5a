"""Hydra adapters: parallel + sequential low-rank branches on a micro transformer."""

from hydra_peft.adapters import AdapterSpec, HydraLinear, MergedLinear
from hydra_peft.linalg import Rng
from hydra_peft.model import MicroTransformer, ModelConfig

__all__ = [
    "AdapterSpec",
    "HydraLinear",
    "MergedLinear",
    "MicroTransformer",
    "ModelConfig",
    "Rng",
]

__version__ = "0.1.0"
