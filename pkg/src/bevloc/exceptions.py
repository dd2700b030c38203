"""Custom exceptions for bevloc."""

from pathlib import Path


class BevLocError(Exception):
    """Base exception for all bevloc errors."""

    pass


class ConfigurationError(BevLocError):
    """Raised when there's an error with configuration."""

    pass


class EmptyInputError(BevLocError):
    """Raised when an operation receives an empty point cloud or data set."""

    pass


class CloudFormatError(BevLocError):
    """Raised when a point cloud file contains a malformed record."""

    def __init__(
        self, message: str, path: Path | str | None = None, record: int | None = None
    ) -> None:
        """Initialize CloudFormatError.

        Args:
            message: Error message
            path: File that failed to parse
            record: Zero-based index of the offending record
        """
        super().__init__(message)
        self.path = path
        self.record = record


class PoseValidationError(BevLocError):
    """Raised when a rotation is not orthonormal with unit determinant."""

    def __init__(self, message: str, record: int | None = None) -> None:
        """Initialize PoseValidationError.

        Args:
            message: Error message
            record: Manifest line holding the pose, if known
        """
        super().__init__(message)
        self.record = record


class ManifestError(BevLocError):
    """Raised when a dataset manifest cannot be read."""

    def __init__(
        self, message: str, path: Path | str | None = None, record: int | None = None
    ) -> None:
        """Initialize ManifestError.

        Args:
            message: Error message
            path: Manifest or cloud path involved
            record: Manifest line number (1-based), if known
        """
        super().__init__(message)
        self.path = path
        self.record = record


class EmptyProjectionError(BevLocError):
    """Raised when every point of a cloud falls outside the BEV grid."""

    def __init__(self, message: str, cropped: int = 0) -> None:
        """Initialize EmptyProjectionError.

        Args:
            message: Error message
            cropped: Number of points discarded by the grid crop
        """
        super().__init__(message)
        self.cropped = cropped


class MissingBucketError(BevLocError):
    """Raised when a keypoint pixel has no points behind it."""

    def __init__(self, message: str, pixel: tuple[int, int]) -> None:
        """Initialize MissingBucketError.

        Args:
            message: Error message
            pixel: The unoccupied (u, v) pixel
        """
        super().__init__(message)
        self.pixel = pixel


class DegenerateHullError(BevLocError):
    """Raised when a footprint is collinear or has too few points."""

    pass


class FeatureError(BevLocError):
    """Raised for feature extraction and interpolation failures."""

    pass


class EmbeddingFormatError(FeatureError):
    """Raised when an embedding archive is corrupt or holds invalid vectors."""

    def __init__(
        self, message: str, cloud_id: str | None = None, record: int | None = None
    ) -> None:
        """Initialize EmbeddingFormatError.

        Args:
            message: Error message
            cloud_id: Cloud whose record was rejected
            record: Zero-based record index
        """
        super().__init__(message)
        self.cloud_id = cloud_id
        self.record = record


class LossArgumentError(BevLocError):
    """Raised when a loss evaluator receives invalid arguments."""

    pass


class EmptyIndexError(BevLocError):
    """Raised when querying a descriptor index with no entries."""

    pass


class EvaluationError(BevLocError):
    """Raised when retrieval evaluation has nothing to evaluate."""

    pass


class RegistrationError(BevLocError):
    """Base exception for pose recovery failures."""

    pass


class InsufficientMatchesError(RegistrationError):
    """Raised when fewer than three usable correspondences survive."""

    def __init__(self, message: str, count: int = 0) -> None:
        """Initialize InsufficientMatchesError.

        Args:
            message: Error message
            count: Number of correspondences that survived
        """
        super().__init__(message)
        self.count = count


class DegenerateConfigurationError(RegistrationError):
    """Raised when the weighted point sets do not determine a rotation."""

    pass


class NoConsensusError(RegistrationError):
    """Raised when robust registration rejects (almost) every correspondence."""

    def __init__(self, message: str, inliers: int = 0) -> None:
        """Initialize NoConsensusError.

        Args:
            message: Error message
            inliers: Number of correspondences still weighted as inliers
        """
        super().__init__(message)
        self.inliers = inliers


class PoseGraphError(BevLocError):
    """Raised for malformed pose graphs."""

    pass


class ConnectivityError(PoseGraphError):
    """Raised when the odometry edges do not connect every node."""

    pass


class SceneError(BevLocError):
    """Raised for invalid synthetic scene parameters."""

    pass


class EmptyScanError(BevLocError):
    """Raised when no simulated ray hits the scene."""

    pass
