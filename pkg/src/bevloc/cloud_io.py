"""Point cloud, trajectory and manifest I/O.

Cloud formats
-------------
* CSV (``.csv``, ``.txt``): one point per line, ``x,y,z,intensity``. Blank
  lines and lines starting with ``#`` are ignored. Written with ``%.17g`` so
  float64 values survive a round trip bit-exactly.
* Binary (``.bin``): little-endian ``uint64`` point count followed by
  ``count`` records of four little-endian ``float32`` values
  (``x, y, z, intensity``).

Manifest format
---------------
Whitespace-separated text, one cloud per line::

    sensor panoramic
    clouds/000000.bin r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz timestamp

The optional ``sensor`` line takes ``panoramic`` or ``fov-limited``. Pose
numbers are the row-major 3x4 ``[R|t]`` of the sensor in the world frame.
Cloud paths are relative to the manifest's directory.
"""

import logging
import os
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .exceptions import (
    CloudFormatError,
    EmptyInputError,
    ManifestError,
    PoseValidationError,
)
from .se3 import PoseSE3

logger: logging.Logger = logging.getLogger(name=__name__)

__all__ = [
    "DatasetManifest",
    "ManifestEntry",
    "PointCloud",
    "PoseSE3",
    "SensorKind",
    "load_cloud",
    "load_manifest",
    "save_cloud",
    "save_manifest",
    "save_trajectory",
    "split_by_travel_distance",
]

MANIFEST_POSE_TOLERANCE = 1e-6
_BINARY_HEADER = struct.Struct("<Q")
_BINARY_DTYPE = np.dtype("<f4")
_CSV_SUFFIXES = {".csv", ".txt"}
_BINARY_SUFFIXES = {".bin"}
_MANIFEST_FIELDS = 14


class SensorKind(StrEnum):
    """Horizontal coverage of the LiDAR that produced a sequence."""

    PANORAMIC = "panoramic"
    FOV_LIMITED = "fov-limited"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (N, 4) array of ``x, y, z, intensity`` points in the sensor frame."""

    points: NDArray[np.float64]
    timestamp: float = 0.0
    frame_id: str = ""

    def __post_init__(self) -> None:
        """Validate point invariants and freeze the array."""
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if np.any(pts[:, 3] < 0.0):
            raise ValueError("intensity must be non-negative")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        """Number of points."""
        return int(self.points.shape[0])

    @property
    def xyz(self) -> NDArray[np.float64]:
        """(N, 3) coordinates in meters."""
        return self.points[:, :3]

    @property
    def intensity(self) -> NDArray[np.float64]:
        """(N,) intensities."""
        return self.points[:, 3]


@dataclass(frozen=True, eq=False)
class ManifestEntry:
    """One cloud of a dataset sequence with its ground-truth world pose."""

    path: Path
    pose: PoseSE3
    timestamp: float

    @property
    def name(self) -> str:
        """Cloud id: the file stem."""
        return self.path.stem

    def load(self) -> PointCloud:
        """Load the referenced cloud."""
        return load_cloud(self.path, timestamp=self.timestamp, frame_id=self.name)


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """An ordered sequence of clouds with poses and a sensor kind tag."""

    entries: tuple[ManifestEntry, ...]
    sensor: SensorKind = SensorKind.PANORAMIC
    root: Path = field(default_factory=Path.cwd)

    def __len__(self) -> int:
        """Number of entries."""
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        """Cloud ids in manifest order."""
        return [entry.name for entry in self.entries]

    @property
    def poses(self) -> list[PoseSE3]:
        """Ground-truth poses in manifest order."""
        return [entry.pose for entry in self.entries]


def _check_points(points: NDArray[np.float64], path: Path) -> None:
    finite = np.all(np.isfinite(points), axis=1)
    bad = np.flatnonzero(~finite | (np.nan_to_num(points[:, 3], nan=0.0) < 0.0))
    if bad.size:
        record = int(bad[0])
        raise CloudFormatError(
            f"{path}: record {record} has a non-finite value or negative intensity",
            path=path,
            record=record,
        )


def _load_csv(path: Path) -> NDArray[np.float64]:
    rows: list[list[float]] = []
    with path.open(encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            record = len(rows)
            parts = line.split(",")
            if len(parts) != 4:
                raise CloudFormatError(
                    f"{path}:{line_no}: record {record} has {len(parts)} fields, expected 4",
                    path=path,
                    record=record,
                )
            try:
                values = [float(part) for part in parts]
            except ValueError as err:
                raise CloudFormatError(
                    f"{path}:{line_no}: record {record} is not numeric: {err}",
                    path=path,
                    record=record,
                ) from err
            rows.append(values)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def _load_binary(path: Path) -> NDArray[np.float64]:
    data = path.read_bytes()
    if len(data) < _BINARY_HEADER.size:
        raise CloudFormatError(f"{path}: truncated header", path=path, record=0)
    (count,) = _BINARY_HEADER.unpack_from(data)
    body = data[_BINARY_HEADER.size :]
    record_size = 4 * _BINARY_DTYPE.itemsize
    complete = len(body) // record_size
    if complete < count:
        raise CloudFormatError(
            f"{path}: header declares {count} points but record {complete} is truncated",
            path=path,
            record=complete,
        )
    if len(body) != count * record_size:
        raise CloudFormatError(
            f"{path}: {len(body) - count * record_size} trailing bytes after record {count - 1}",
            path=path,
            record=count,
        )
    values = np.frombuffer(body, dtype=_BINARY_DTYPE, count=count * 4)
    return values.reshape(count, 4).astype(np.float64)


def load_cloud(path: Path | str, timestamp: float = 0.0, frame_id: str | None = None) -> PointCloud:
    """Load a CSV or binary point cloud.

    Args:
        path: Cloud file; the suffix selects the format
        timestamp: Acquisition time in seconds
        frame_id: Label for the sensor frame (defaults to the file stem)

    Returns:
        All points in file order.

    Raises:
        CloudFormatError: Malformed record, non-finite value or negative intensity
        EmptyInputError: The file holds no points
        ManifestError: The file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"cloud file not found: {path}", path=path)
    suffix = path.suffix.lower()
    if suffix in _BINARY_SUFFIXES:
        points = _load_binary(path)
    elif suffix in _CSV_SUFFIXES:
        points = _load_csv(path)
    else:
        raise CloudFormatError(f"{path}: unsupported cloud format {suffix!r}", path=path)
    if points.shape[0] == 0:
        raise EmptyInputError(f"{path}: cloud is empty")
    _check_points(points, path)
    logger.debug(msg=f"Loaded {points.shape[0]} points from {path}")
    return PointCloud(points, timestamp=timestamp, frame_id=frame_id or path.stem)


def save_cloud(cloud: PointCloud, path: Path | str) -> Path:
    """Write a cloud; binary output stores float32 and is lossy for float64 input.

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = path.suffix.lower()
    if suffix in _BINARY_SUFFIXES:
        body = np.ascontiguousarray(cloud.points, dtype=_BINARY_DTYPE).tobytes()
        path.write_bytes(_BINARY_HEADER.pack(len(cloud)) + body)
    elif suffix in _CSV_SUFFIXES:
        lines = [",".join(f"{value:.17g}" for value in row) for row in cloud.points]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise CloudFormatError(f"{path}: unsupported cloud format {suffix!r}", path=path)
    return path


def _format_pose(pose: PoseSE3) -> str:
    rt = np.hstack([pose.rotation, pose.translation[:, None]])
    return " ".join(f"{value:.17g}" for value in rt.reshape(-1))


def _parse_entry(tokens: Sequence[str], root: Path, path: Path, line_no: int) -> ManifestEntry:
    if len(tokens) != _MANIFEST_FIELDS:
        raise ManifestError(
            f"{path}:{line_no}: expected {_MANIFEST_FIELDS} fields, got {len(tokens)}",
            path=path,
            record=line_no,
        )
    try:
        numbers = np.array([float(token) for token in tokens[1:]], dtype=np.float64)
    except ValueError as err:
        raise ManifestError(f"{path}:{line_no}: {err}", path=path, record=line_no) from err
    pose = PoseSE3.from_matrix(numbers[:12].reshape(3, 4))
    try:
        pose.check(tol=MANIFEST_POSE_TOLERANCE, record=line_no)
    except PoseValidationError as err:
        raise PoseValidationError(f"{path}:{line_no}: {err}", record=line_no) from err
    cloud_path = Path(os.path.normpath(root / tokens[0]))
    return ManifestEntry(path=cloud_path, pose=pose, timestamp=float(numbers[12]))


def load_manifest(path: Path | str, check_files: bool = True) -> DatasetManifest:
    """Load a dataset manifest.

    Args:
        path: Manifest file
        check_files: Require every referenced cloud file to exist

    Returns:
        Entries in file order with validated poses.

    Raises:
        ManifestError: Unreadable manifest, bad line, duplicate cloud id,
            decreasing timestamps or (with ``check_files``) a missing cloud
        PoseValidationError: A rotation off SO(3) by more than 1e-6
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}", path=path)
    root = path.parent
    sensor = SensorKind.PANORAMIC
    entries: list[ManifestEntry] = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "sensor":
            try:
                sensor = SensorKind(tokens[1] if len(tokens) == 2 else "")
            except ValueError as err:
                raise ManifestError(
                    f"{path}:{line_no}: unknown sensor line {line!r}", path=path, record=line_no
                ) from err
            continue
        entry = _parse_entry(tokens, root, path, line_no)
        if check_files and not entry.path.is_file():
            raise ManifestError(
                f"{path}:{line_no}: cloud file not found: {entry.path}",
                path=entry.path,
                record=line_no,
            )
        if entries and entry.timestamp < entries[-1].timestamp:
            raise ManifestError(
                f"{path}:{line_no}: timestamp {entry.timestamp} precedes {entries[-1].timestamp}",
                path=path,
                record=line_no,
            )
        entries.append(entry)

    names = [entry.name for entry in entries]
    if len(set(names)) != len(names):
        raise ManifestError(f"{path}: cloud ids (file stems) must be unique", path=path)
    logger.info(msg=f"Loaded manifest {path} with {len(entries)} entries ({sensor})")
    return DatasetManifest(entries=tuple(entries), sensor=sensor, root=root)


def save_manifest(manifest: DatasetManifest, path: Path | str) -> Path:
    """Write a manifest; cloud paths are stored relative to the manifest.

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"sensor {manifest.sensor.value}"]
    for entry in manifest.entries:
        relative = os.path.relpath(entry.path, start=path.parent)
        lines.append(f"{relative} {_format_pose(entry.pose)} {entry.timestamp:.17g}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def save_trajectory(
    path: Path | str,
    poses: Sequence[PoseSE3],
    names: Sequence[str] | None = None,
    timestamps: Sequence[float] | None = None,
) -> Path:
    """Write poses in manifest pose format (one ``name [R|t] timestamp`` line each).

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = names if names is not None else [f"node_{k:06d}" for k in range(len(poses))]
    stamps: Iterable[float] = timestamps if timestamps is not None else range(len(poses))
    lines = [
        f"{name} {_format_pose(pose)} {float(stamp):.17g}"
        for name, pose, stamp in zip(names, poses, stamps, strict=True)
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def travel_distance(poses: Sequence[PoseSE3]) -> NDArray[np.float64]:
    """Cumulative path length along a pose sequence, starting at 0."""
    if not poses:
        return np.zeros(0)
    positions = np.array([pose.translation for pose in poses])
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def split_by_travel_distance(
    manifest: DatasetManifest, fraction: float = 0.5
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split a sequence into database and query parts by travelled distance.

    Entries within the first ``fraction`` of the total path length form the
    database; the remainder are queries.

    Raises:
        EmptyInputError: Either part would be empty
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    distance = travel_distance(manifest.poses)
    if distance.size == 0:
        raise EmptyInputError("cannot split an empty manifest")
    cutoff = fraction * distance[-1]
    split = int(np.searchsorted(distance, cutoff, side="right"))
    if split == 0 or split == len(manifest):
        raise EmptyInputError("split leaves the database or the query part empty")
    database = DatasetManifest(manifest.entries[:split], manifest.sensor, manifest.root)
    queries = DatasetManifest(manifest.entries[split:], manifest.sensor, manifest.root)
    return database, queries
