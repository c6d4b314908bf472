"""Pillar-based LiDAR detection with CORAL simulated-to-real feature alignment."""
from .core import Box3D, ClassId, Dataset, Domain, Frame, PointCloud, RangeConfig
from .errors import PillarCoralError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "Box3D", "ClassId", "Dataset", "Domain", "Frame", "PillarCoralError", "PointCloud",
           "RangeConfig", "__version__"]
