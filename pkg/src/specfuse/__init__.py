"""Spectral sensor-fusion pipeline for IMU activity recognition.

Signal path: gravity/linear split and windowing (datapipe), learned
posture/motion feature extraction with sensor attention (imu_fusion),
signed-graph modality mixing (graph_fusion), wavelet-routed temporal
fusion with self-attention (temporal_fusion), and the assembled
classifier plus training/evaluation harnesses (model, training).
"""

from . import errors
from .numerics import Tensor, Parameter

__all__ = ["errors", "Tensor", "Parameter"]
__version__ = "0.1.0"
