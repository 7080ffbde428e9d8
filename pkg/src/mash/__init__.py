"""Masked anchored spherical distances (MASH) for point-cloud shape fitting."""
from .fitting import FitConfig, FitReport, fit, initialize, loss_gradients
from .model import Anchor, MashModel, mask_angle, param_count, rotation_matrix, spherical_distance
from .sampler import SampleSet, fibonacci_presample, sample_model, select_rays

__all__ = [
    "Anchor", "FitConfig", "FitReport", "MashModel", "SampleSet", "fibonacci_presample", "fit",
    "initialize", "loss_gradients", "mask_angle", "param_count", "rotation_matrix", "sample_model",
    "select_rays", "spherical_distance",
]
__version__ = "0.1.0"
