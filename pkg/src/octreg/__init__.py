"""Longitudinal registration of 3D OCT volumes guided by vessel graphs."""

from .config import PipelineConfig
from .pipeline import RegistrationResult, RunReport, register
from .transform import TransformModel
from .volume_io import Volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "RegistrationResult", "RunReport", "register", "TransformModel",
           "Volume", "load_volume", "save_volume", "__version__"]
