"""Shared pytest fixtures for bevloc tests."""

import logging
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import pytest

from bevloc.cloud_io import DatasetManifest, ManifestEntry, PointCloud, save_cloud, save_manifest
from bevloc.se3 import PoseSE3

ManifestWriter = Callable[..., Path]


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded random generator."""
    return np.random.default_rng(seed=1234)


@pytest.fixture
def square_cloud() -> PointCloud:
    """Four points on the corners of a unit square at z = 0."""
    return PointCloud(
        np.array(
            [
                [0.0, 0.0, 0.0, 1.0],
                [1.0, 0.0, 0.0, 2.0],
                [1.0, 1.0, 0.0, 3.0],
                [0.0, 1.0, 0.0, 4.0],
            ]
        )
    )


def blob_cloud(rng: np.random.Generator) -> PointCloud:
    """A few thousand points on walls and poles with distinct heights and intensities."""
    parts = []
    for k in range(12):
        center = rng.uniform(-25.0, 25.0, size=2)
        height = rng.uniform(1.0, 6.0)
        count = 250
        xy = center + rng.normal(scale=rng.uniform(0.3, 2.0), size=(count, 2))
        z = rng.uniform(-1.5, height, size=count)
        intensity = np.full(count, 10.0 + 7.0 * k) + rng.uniform(0.0, 3.0, size=count)
        parts.append(np.column_stack([xy, z, intensity]))
    return PointCloud(np.vstack(parts))


@pytest.fixture
def structured_cloud(rng: np.random.Generator) -> PointCloud:
    """Blob scene drawn from the shared seed."""
    return blob_cloud(rng)


@pytest.fixture
def cloud_factory() -> Callable[[int], PointCloud]:
    """Blob scenes keyed by seed."""
    return lambda seed: blob_cloud(np.random.default_rng(seed=seed))


@pytest.fixture
def write_manifest(tmp_path: Path) -> ManifestWriter:
    """Write clouds plus a manifest under ``tmp_path`` and return the manifest path."""

    def _write(items: Sequence[tuple[str, PointCloud, PoseSE3]], name: str = "manifest.txt") -> Path:
        entries = []
        for k, (cloud_name, cloud, pose) in enumerate(items):
            path = save_cloud(cloud, tmp_path / "clouds" / f"{cloud_name}.csv")
            entries.append(ManifestEntry(path=path, pose=pose, timestamp=float(k)))
        return save_manifest(DatasetManifest(tuple(entries), root=tmp_path), tmp_path / name)

    return _write


@pytest.fixture(autouse=True)
def reset_logging():
    """Reset logging configuration before each test."""
    # Get the root logger
    logger = logging.getLogger()

    # Remove all handlers
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)

    # Reset to WARNING level
    logger.setLevel(logging.WARNING)

    yield

    # Cleanup after test
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
