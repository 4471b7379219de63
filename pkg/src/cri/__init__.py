"""Centroid-initialized, regularized GAN inversion on a differentiable toy generator."""
from ._version import __version__
from .kernels import BACKEND
from .errors import (
    ConfigError,
    CorruptSnapshotError,
    CRIError,
    DivergenceError,
    InvalidClassError,
    InvalidLatentError,
    InvalidSpecError,
)
from .generator import GeneratorLayout, GeneratorParams, ToyGenerator
from .degrade import DegradationSpec, spec_for_task
from .perception import FeatureExtractor, frechet_distance, perceptual_distance, psnr
from .cluster import CentroidSet, ClusterConfig, build_centroids, kmeans, select_centroid
from .invert import InversionResult, LossWeights, StageSchedule, invert

__all__ = [
    "__version__", "BACKEND", "CRIError", "ConfigError", "CorruptSnapshotError", "DivergenceError",
    "InvalidClassError", "InvalidLatentError", "InvalidSpecError", "GeneratorLayout", "GeneratorParams",
    "ToyGenerator", "DegradationSpec", "spec_for_task", "FeatureExtractor", "frechet_distance",
    "perceptual_distance", "psnr", "CentroidSet", "ClusterConfig", "build_centroids", "kmeans",
    "select_centroid", "InversionResult", "LossWeights", "StageSchedule", "invert",
]
