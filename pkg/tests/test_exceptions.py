"""Tests for the exceptions module."""

import pytest

import bevloc
from bevloc.exceptions import (
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

RECORD_INDEX = 7
CROPPED_POINTS = 12


class TestHierarchy:
    """Test cases for the exception tree."""

    @pytest.mark.parametrize(
        "error",
        [
            ConfigurationError,
            EmptyInputError,
            CloudFormatError,
            PoseValidationError,
            ManifestError,
            EmptyProjectionError,
            MissingBucketError,
            DegenerateHullError,
            FeatureError,
            LossArgumentError,
            EmptyIndexError,
            EvaluationError,
            RegistrationError,
            PoseGraphError,
            SceneError,
            EmptyScanError,
        ],
    )
    def test_base_class(self, error: type[Exception]) -> None:
        """Every error derives from BevLocError."""
        assert issubclass(error, BevLocError)

    @pytest.mark.parametrize(
        ("error", "parent"),
        [
            (InsufficientMatchesError, RegistrationError),
            (DegenerateConfigurationError, RegistrationError),
            (NoConsensusError, RegistrationError),
            (ConnectivityError, PoseGraphError),
            (EmbeddingFormatError, FeatureError),
        ],
    )
    def test_subfamilies(self, error: type[Exception], parent: type[Exception]) -> None:
        """Stage-specific errors group under their stage."""
        assert issubclass(error, parent)

    def test_package_exports(self) -> None:
        """The package re-exports the public errors."""
        assert bevloc.BevLocError is BevLocError
        assert "NoConsensusError" in bevloc.__all__


class TestAttributes:
    """Test cases for error payloads."""

    def test_cloud_format_error(self) -> None:
        """The offending file and record are kept."""
        error = CloudFormatError("NaN coordinate", path="scan.csv", record=RECORD_INDEX)
        assert str(error) == "NaN coordinate"
        assert (error.path, error.record) == ("scan.csv", RECORD_INDEX)

    def test_pose_validation_error(self) -> None:
        """The manifest record is optional."""
        assert PoseValidationError("reflection").record is None
        assert PoseValidationError("reflection", record=RECORD_INDEX).record == RECORD_INDEX

    def test_empty_projection_error(self) -> None:
        """The crop count is kept."""
        assert EmptyProjectionError("all cropped", cropped=CROPPED_POINTS).cropped == CROPPED_POINTS

    def test_missing_bucket_error(self) -> None:
        """The unoccupied pixel is kept."""
        assert MissingBucketError("empty", pixel=(3, 4)).pixel == (3, 4)

    def test_embedding_format_error(self) -> None:
        """The rejected cloud and record are kept."""
        error = EmbeddingFormatError("zero vector", cloud_id="db_0001", record=RECORD_INDEX)
        assert (error.cloud_id, error.record) == ("db_0001", RECORD_INDEX)

    def test_registration_counts(self) -> None:
        """Match and inlier counts travel with the error."""
        with pytest.raises(RegistrationError) as exc_info:
            raise InsufficientMatchesError("two matches", count=2)
        assert exc_info.value.count == 2
        assert NoConsensusError("none", inliers=1).inliers == 1
