"""Forensics toolkit for 3D Gaussian Splatting scenes."""

from .splat_model import (
    FeatureGroupMask,
    GaussianScene,
    NormalizationSpec,
    RawScene,
    activate,
    assemble_features,
    deactivate,
    morton_code,
    scene_stats,
)

__version__ = "0.1.0"

__all__ = [
    "FeatureGroupMask",
    "GaussianScene",
    "NormalizationSpec",
    "RawScene",
    "activate",
    "assemble_features",
    "deactivate",
    "morton_code",
    "scene_stats",
]
