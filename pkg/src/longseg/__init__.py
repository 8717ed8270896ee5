"""Generative whole-brain and lesion segmentation with a longitudinal extension."""

__version__ = "0.1.0"

from .atlas import TetMeshAtlas, build_grid_atlas, deformation_energy, deformation_gradient, rasterize_priors
from .fit_cross import CrossFitResult, FitOptions, fit_cross, segment, structure_volumes
from .fit_long import LongFitResult, LongOptions, SubjectLatents, fit_longitudinal
from .gmm import BiasField, GaussianParams, LesionPriorConfig, NIWPrior
from .volume import LabelVolume, Volume, log_transform, read_lvol, read_volume, write_lvol

__all__ = [
    "BiasField", "CrossFitResult", "FitOptions", "GaussianParams", "LabelVolume", "LesionPriorConfig",
    "LongFitResult", "LongOptions", "NIWPrior", "SubjectLatents", "TetMeshAtlas", "Volume",
    "build_grid_atlas", "deformation_energy", "deformation_gradient", "fit_cross", "fit_longitudinal",
    "log_transform", "rasterize_priors", "read_lvol", "read_volume", "segment", "structure_volumes",
    "write_lvol",
]
