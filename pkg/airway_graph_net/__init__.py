"""Airway segmentation with a CNN stream, graph attention over geodesic graphs and a fusion decoder."""
from .config import AgnSettings, TrainConfig, load_config
from .errors import AgnError, ConfigError, DataError, FormatError, ShapeError, TrainingError
from .model import AgnModel
from .phantom_data import PhantomVolume, generate_phantom, load_volume, save_volume

__version__ = "1.0.0"

__all__ = [
    "AgnError",
    "AgnModel",
    "AgnSettings",
    "ConfigError",
    "DataError",
    "FormatError",
    "PhantomVolume",
    "ShapeError",
    "TrainConfig",
    "TrainingError",
    "generate_phantom",
    "load_config",
    "load_volume",
    "save_volume",
]
