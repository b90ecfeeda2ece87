"""Task-based mixture-of-experts sequence-to-sequence models at desk scale."""

from .model import Model, ModelConfig, MoESettings, AdapterSettings, variant_config
from .tensor import Tensor

__all__ = ["Model", "ModelConfig", "MoESettings", "AdapterSettings",
           "variant_config", "Tensor"]

__version__ = "0.1.0"
