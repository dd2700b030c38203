"""LiDAR global localization from bird's-eye-view images."""

from importlib import metadata

from .exceptions import (
    BevLocError,
    CloudFormatError,
    ConfigurationError,
    ConnectivityError,
    DegenerateConfigurationError,
    DegenerateHullError,
    EmbeddingFormatError,
    EmptyIndexError,
    EmptyInputError,
    EmptyProjectionError,
    EmptyScanError,
    EvaluationError,
    FeatureError,
    InsufficientMatchesError,
    LossArgumentError,
    ManifestError,
    MissingBucketError,
    NoConsensusError,
    PoseGraphError,
    PoseValidationError,
    RegistrationError,
    SceneError,
)
from .main import main
from .se3 import PoseSE3

try:
    __version__: str = metadata.version(distribution_name="bevloc")
except metadata.PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

__all__: list[str] = [
    "BevLocError",
    "CloudFormatError",
    "ConfigurationError",
    "ConnectivityError",
    "DegenerateConfigurationError",
    "DegenerateHullError",
    "EmbeddingFormatError",
    "EmptyIndexError",
    "EmptyInputError",
    "EmptyProjectionError",
    "EmptyScanError",
    "EvaluationError",
    "FeatureError",
    "InsufficientMatchesError",
    "LossArgumentError",
    "ManifestError",
    "MissingBucketError",
    "NoConsensusError",
    "PoseGraphError",
    "PoseSE3",
    "PoseValidationError",
    "RegistrationError",
    "SceneError",
    "__version__",
    "main",
]

if __name__ == "__main__":
    main()  # pragma: no cover
