"""Wide-range image blending."""
from .config import ModelConfig, TrainConfig, desk_config, full_config
from .networks import Generator

__all__ = ["Generator", "ModelConfig", "TrainConfig", "desk_config", "full_config"]
__version__ = "0.1.0"
