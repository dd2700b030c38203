"""Tests for the cloud_io module."""

from pathlib import Path

import numpy as np
import pytest

from bevloc.cloud_io import (
    DatasetManifest,
    ManifestEntry,
    PointCloud,
    SensorKind,
    load_cloud,
    load_manifest,
    save_cloud,
    save_manifest,
    save_trajectory,
    split_by_travel_distance,
)
from bevloc.exceptions import CloudFormatError, EmptyInputError, ManifestError, PoseValidationError
from bevloc.se3 import PoseSE3

IDENTITY_ROW = "1 0 0 0 0 1 0 0 0 0 1 0"
RANDOM_POINTS = 1000


class TestLoadCloud:
    """Test cases for reading point clouds."""

    def test_single_csv_point(self, tmp_path: Path) -> None:
        """A CSV line maps straight onto x, y, z, intensity."""
        path = tmp_path / "one.csv"
        path.write_text("1.0,2.0,0.5,10.0\n", encoding="utf-8")
        cloud = load_cloud(path)
        assert len(cloud) == 1
        np.testing.assert_array_equal(cloud.points[0], [1.0, 2.0, 0.5, 10.0])
        assert cloud.frame_id == "one"

    def test_comments_and_blank_lines(self, tmp_path: Path) -> None:
        """Comment and blank lines are skipped."""
        path = tmp_path / "c.csv"
        path.write_text("# header\n\n1,2,3,4\n", encoding="utf-8")
        assert len(load_cloud(path)) == 1

    def test_nan_names_record(self, tmp_path: Path) -> None:
        """A NaN coordinate raises a parse error naming the record."""
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3,4\n5,nan,7,8\n", encoding="utf-8")
        with pytest.raises(CloudFormatError) as exc_info:
            load_cloud(path)
        assert exc_info.value.record == 1

    def test_wrong_field_count(self, tmp_path: Path) -> None:
        """Three fields are not a point."""
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3\n", encoding="utf-8")
        with pytest.raises(CloudFormatError, match="3 fields"):
            load_cloud(path)

    def test_negative_intensity(self, tmp_path: Path) -> None:
        """Negative intensity is rejected."""
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3,-1\n", encoding="utf-8")
        with pytest.raises(CloudFormatError):
            load_cloud(path)

    def test_empty_cloud(self, tmp_path: Path) -> None:
        """A file without points is an empty-input error."""
        path = tmp_path / "empty.csv"
        path.write_text("# nothing\n", encoding="utf-8")
        with pytest.raises(EmptyInputError):
            load_cloud(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        """A missing cloud file is reported."""
        with pytest.raises(ManifestError, match="not found"):
            load_cloud(tmp_path / "missing.bin")

    def test_truncated_binary(self, tmp_path: Path) -> None:
        """A binary header promising more points than stored is rejected."""
        path = tmp_path / "short.bin"
        path.write_bytes(np.array(3, dtype="<u8").tobytes() + np.zeros(4, dtype="<f4").tobytes())
        with pytest.raises(CloudFormatError) as exc_info:
            load_cloud(path)
        assert exc_info.value.record == 1


class TestSaveCloud:
    """Test cases for writing point clouds."""

    def test_csv_round_trip_is_exact(self, tmp_path: Path, rng: np.random.Generator) -> None:
        """Random float64 clouds survive CSV save and load bit-exactly."""
        points = np.column_stack([rng.normal(scale=50.0, size=(RANDOM_POINTS, 3)), rng.uniform(0, 255, RANDOM_POINTS)])
        cloud = PointCloud(points)
        loaded = load_cloud(save_cloud(cloud, tmp_path / "r.csv"))
        np.testing.assert_array_equal(loaded.points, cloud.points)

    def test_binary_round_trip_of_float32_values(self, tmp_path: Path, rng: np.random.Generator) -> None:
        """Values representable in float32 survive the binary format."""
        points = rng.normal(size=(RANDOM_POINTS, 4)).astype(np.float32).astype(np.float64)
        points[:, 3] = np.abs(points[:, 3])
        loaded = load_cloud(save_cloud(PointCloud(points), tmp_path / "r.bin"))
        np.testing.assert_array_equal(loaded.points, points)

    def test_unsupported_suffix(self, tmp_path: Path, square_cloud: PointCloud) -> None:
        """Only CSV and binary outputs are known."""
        with pytest.raises(CloudFormatError, match="unsupported"):
            save_cloud(square_cloud, tmp_path / "cloud.ply")


class TestManifest:
    """Test cases for dataset manifests."""

    def _write(self, tmp_path: Path, lines: list[str], clouds: list[str]) -> Path:
        for name in clouds:
            (tmp_path / name).write_text("0,0,0,1\n", encoding="utf-8")
        path = tmp_path / "manifest.txt"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_identity_entry(self, tmp_path: Path) -> None:
        """An identity pose line loads as PoseSE3(I, 0)."""
        path = self._write(tmp_path, [f"a.csv {IDENTITY_ROW} 0.0"], ["a.csv"])
        manifest = load_manifest(path)
        assert manifest.entries[0].pose.is_close(PoseSE3.identity(), atol=0.0)
        assert manifest.sensor is SensorKind.PANORAMIC

    def test_order_preserved(self, tmp_path: Path) -> None:
        """Entries keep file order."""
        names = ["c.csv", "a.csv", "b.csv"]
        lines = ["sensor fov-limited"] + [f"{n} {IDENTITY_ROW} {k}" for k, n in enumerate(names)]
        manifest = load_manifest(self._write(tmp_path, lines, names))
        assert manifest.names == ["c", "a", "b"]
        assert manifest.sensor is SensorKind.FOV_LIMITED

    def test_reflection_rejected(self, tmp_path: Path) -> None:
        """A rotation with determinant -1 fails validation."""
        path = self._write(tmp_path, ["a.csv 1 0 0 0 0 1 0 0 0 0 -1 0 0"], ["a.csv"])
        with pytest.raises(PoseValidationError):
            load_manifest(path)

    def test_missing_cloud_file(self, tmp_path: Path) -> None:
        """A referenced file that does not exist is an error unless checks are off."""
        path = self._write(tmp_path, [f"gone.csv {IDENTITY_ROW} 0"], [])
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(path)
        assert len(load_manifest(path, check_files=False)) == 1

    def test_decreasing_timestamps(self, tmp_path: Path) -> None:
        """Timestamps must not decrease."""
        lines = [f"a.csv {IDENTITY_ROW} 2", f"b.csv {IDENTITY_ROW} 1"]
        with pytest.raises(ManifestError, match="precedes"):
            load_manifest(self._write(tmp_path, lines, ["a.csv", "b.csv"]))

    def test_duplicate_ids(self, tmp_path: Path) -> None:
        """Cloud ids must be unique."""
        (tmp_path / "x").mkdir()
        (tmp_path / "x" / "a.csv").write_text("0,0,0,1\n", encoding="utf-8")
        lines = [f"a.csv {IDENTITY_ROW} 0", f"x/a.csv {IDENTITY_ROW} 1"]
        with pytest.raises(ManifestError, match="unique"):
            load_manifest(self._write(tmp_path, lines, ["a.csv"]))

    def test_wrong_field_count(self, tmp_path: Path) -> None:
        """Short lines name their line number."""
        with pytest.raises(ManifestError) as exc_info:
            load_manifest(self._write(tmp_path, ["a.csv 1 0 0"], ["a.csv"]))
        assert exc_info.value.record == 1

    def test_round_trip(self, tmp_path: Path, rng: np.random.Generator) -> None:
        """save_manifest followed by load_manifest reproduces paths, poses and timestamps."""
        entries = []
        for k in range(5):
            path = tmp_path / "clouds" / f"{k:03d}.csv"
            path.parent.mkdir(exist_ok=True)
            path.write_text("0,0,0,1\n", encoding="utf-8")
            entries.append(ManifestEntry(path, PoseSE3.exp(rng.normal(size=6)), float(k) / 3))
        manifest = DatasetManifest(tuple(entries), SensorKind.FOV_LIMITED, tmp_path)
        loaded = load_manifest(save_manifest(manifest, tmp_path / "m.txt"))
        assert loaded.sensor is SensorKind.FOV_LIMITED
        for original, again in zip(manifest.entries, loaded.entries, strict=True):
            assert again.path == original.path
            assert again.pose.is_close(original.pose, atol=0.0)
            assert again.timestamp == original.timestamp


class TestTrajectory:
    """Test cases for trajectory helpers."""

    def test_save_trajectory_lines(self, tmp_path: Path) -> None:
        """One line per pose with a default name and index timestamp."""
        path = save_trajectory(tmp_path / "t.txt", [PoseSE3.identity(), PoseSE3.from_yaw(0.0, (1, 0, 0))])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2
        assert lines[1].startswith("node_000001 ")
        assert lines[1].split()[4] == "1"

    def test_split_by_travel_distance(self, tmp_path: Path) -> None:
        """The first half of the path forms the database."""
        entries = tuple(
            ManifestEntry(tmp_path / f"{k}.csv", PoseSE3.from_yaw(0.0, (float(k), 0, 0)), float(k))
            for k in range(10)
        )
        database, queries = split_by_travel_distance(DatasetManifest(entries, root=tmp_path))
        assert len(database) == 5
        assert len(queries) == 5
