"""Toy set-prediction detector assembled from the PAFC backbone and the SAA encoder."""

from .config import ConfigError, ModelConfig, OptimConfig, micro_config
from .model import DetectionSet, FlowDet, build_model, detections_to_records

__all__ = [
    "ConfigError", "ModelConfig", "OptimConfig", "micro_config",
    "DetectionSet", "FlowDet", "build_model", "detections_to_records",
]
