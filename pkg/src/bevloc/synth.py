"""Synthetic worlds and simulated LiDAR scans with exact ground truth.

Scenes are sets of analytic primitives: yawed boxes, vertical capped
cylinders and horizontal rectangular patches (the ground and high
reflectivity road markings). Scans cast a grid of rays from the sensor
pose, keep the nearest hit inside the range limits and return points in
the sensor frame with intensity ``reflectivity / (1 + range / 50)``.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .cloud_io import DatasetManifest, ManifestEntry, PointCloud, SensorKind, save_cloud, save_manifest
from .exceptions import ConfigurationError, EmptyScanError, SceneError
from .se3 import PoseSE3

logger: logging.Logger = logging.getLogger(name=__name__)

SENSOR_HEIGHT = 1.8
INTENSITY_FALLOFF = 50.0
_HIT_EPS = 1e-9


class Primitive(Protocol):
    """Ray-castable scene element."""

    reflectivity: float

    def intersect(self, origins: NDArray[np.float64], directions: NDArray[np.float64]) -> NDArray[np.float64]:
        """Nearest positive hit distance per ray, ``inf`` on a miss."""
        ...

    def distance(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        """Unsigned distance from each point to the surface."""
        ...

    def footprint(self) -> NDArray[np.float64]:
        """(K, 2) xy points bounding the primitive."""
        ...


def _check_reflectivity(value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise SceneError(f"reflectivity must lie in [0, 1], got {value}")


def _first_hit(t_near: NDArray[np.float64], t_far: NDArray[np.float64]) -> NDArray[np.float64]:
    hit = (t_near <= t_far) & (t_far > _HIT_EPS)
    return np.where(hit, np.where(t_near > _HIT_EPS, t_near, t_far), np.inf)


@dataclass(frozen=True)
class Box:
    """Box yawed about +z around its center."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw_deg: float = 0.0
    reflectivity: float = 0.5

    def __post_init__(self) -> None:
        """Validate dimensions."""
        if min(self.size) <= 0:
            raise SceneError(f"box size must be positive, got {self.size}")
        _check_reflectivity(self.reflectivity)

    @property
    def _rotation(self) -> NDArray[np.float64]:
        return Rotation.from_euler("z", self.yaw_deg, degrees=True).as_matrix()

    def _local(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        return (points - np.asarray(self.center)) @ self._rotation

    def intersect(self, origins: NDArray[np.float64], directions: NDArray[np.float64]) -> NDArray[np.float64]:
        """Slab test in the box frame."""
        o = self._local(origins)
        d = directions @ self._rotation
        half = np.asarray(self.size) / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        t_near = np.nanmax(np.fmin(t1, t2), axis=1)
        t_far = np.nanmin(np.fmax(t1, t2), axis=1)
        return _first_hit(t_near, t_far)

    def distance(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        """Distance to the box faces."""
        q = np.abs(self._local(points)) - np.asarray(self.size) / 2.0
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def footprint(self) -> NDArray[np.float64]:
        """The four ground corners."""
        hx, hy = self.size[0] / 2.0, self.size[1] / 2.0
        corners = np.array([[-hx, -hy, 0.0], [hx, -hy, 0.0], [hx, hy, 0.0], [-hx, hy, 0.0]])
        return (corners @ self._rotation.T + np.asarray(self.center))[:, :2]


@dataclass(frozen=True)
class Cylinder:
    """Vertical capped cylinder standing on ``base``."""

    center: tuple[float, float]
    radius: float
    height: float
    base: float = 0.0
    reflectivity: float = 0.5

    def __post_init__(self) -> None:
        """Validate dimensions."""
        if self.radius <= 0 or self.height <= 0:
            raise SceneError("cylinder radius and height must be positive")
        _check_reflectivity(self.reflectivity)

    def intersect(self, origins: NDArray[np.float64], directions: NDArray[np.float64]) -> NDArray[np.float64]:
        """Side wall roots plus the two caps."""
        oxy = origins[:, :2] - np.asarray(self.center)
        dxy = directions[:, :2]
        a = np.einsum("ij,ij->i", dxy, dxy)
        b = 2.0 * np.einsum("ij,ij->i", oxy, dxy)
        c = np.einsum("ij,ij->i", oxy, oxy) - self.radius**2
        disc = b * b - 4.0 * a * c
        best = np.full(origins.shape[0], np.inf)
        top = self.base + self.height
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.sqrt(np.where(disc >= 0, disc, np.nan))
            for t in ((-b - root) / (2.0 * a), (-b + root) / (2.0 * a)):
                z = origins[:, 2] + t * directions[:, 2]
                valid = (t > _HIT_EPS) & (z >= self.base) & (z <= top)
                best = np.where(valid & (t < best), t, best)
            for level in (self.base, top):
                t = (level - origins[:, 2]) / directions[:, 2]
                xy = oxy + t[:, None] * dxy
                valid = (t > _HIT_EPS) & (np.einsum("ij,ij->i", xy, xy) <= self.radius**2)
                best = np.where(valid & (t < best), t, best)
        return best

    def distance(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        """Distance to the wall or caps."""
        radial = np.linalg.norm(points[:, :2] - np.asarray(self.center), axis=1) - self.radius
        vertical = np.abs(points[:, 2] - (self.base + self.height / 2.0)) - self.height / 2.0
        q = np.column_stack([radial, vertical])
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def footprint(self) -> NDArray[np.float64]:
        """Axis-aligned square around the disc."""
        cx, cy = self.center
        r = self.radius
        return np.array([[cx - r, cy - r], [cx + r, cy - r], [cx + r, cy + r], [cx - r, cy + r]])


@dataclass(frozen=True)
class Plane:
    """Horizontal axis-aligned rectangle at height ``center[2]``."""

    center: tuple[float, float, float]
    size: tuple[float, float]
    reflectivity: float = 0.2

    def __post_init__(self) -> None:
        """Validate dimensions."""
        if min(self.size) <= 0:
            raise SceneError(f"plane size must be positive, got {self.size}")
        _check_reflectivity(self.reflectivity)

    def intersect(self, origins: NDArray[np.float64], directions: NDArray[np.float64]) -> NDArray[np.float64]:
        """Ray-plane hit inside the rectangle."""
        cx, cy, cz = self.center
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (cz - origins[:, 2]) / directions[:, 2]
            x = origins[:, 0] + t * directions[:, 0]
            y = origins[:, 1] + t * directions[:, 1]
            valid = (t > _HIT_EPS) & (np.abs(x - cx) <= self.size[0] / 2.0) & (np.abs(y - cy) <= self.size[1] / 2.0)
            return np.where(valid, t, np.inf)

    def distance(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        """Distance to the rectangle."""
        ex = np.maximum(np.abs(points[:, 0] - self.center[0]) - self.size[0] / 2.0, 0.0)
        ey = np.maximum(np.abs(points[:, 1] - self.center[1]) - self.size[1] / 2.0, 0.0)
        return np.sqrt(ex**2 + ey**2 + (points[:, 2] - self.center[2]) ** 2)

    def footprint(self) -> NDArray[np.float64]:
        """The four corners."""
        cx, cy, _ = self.center
        hx, hy = self.size[0] / 2.0, self.size[1] / 2.0
        return np.array([[cx - hx, cy - hy], [cx + hx, cy - hy], [cx + hx, cy + hy], [cx - hx, cy + hy]])


@dataclass(frozen=True)
class SceneSpec:
    """Random landmark counts, world extent and a kept-clear trajectory corridor.

    ``extent`` is the side length of the square world centred on the origin.
    Landmarks never come within ``clearance`` meters of the ``waypoints``
    polyline. ``primitives`` are added as given.
    """

    seed: int = 0
    extent: float = 120.0
    boxes: int = 40
    cylinders: int = 30
    markings: int = 20
    ground: bool = True
    clearance: float = 3.0
    waypoints: tuple[tuple[float, float], ...] = ()
    primitives: tuple[Primitive, ...] = ()


@dataclass(frozen=True)
class Scene:
    """Immutable primitive set; the ground, when present, comes first."""

    primitives: tuple[Primitive, ...]
    extent: float
    seed: int = 0

    @property
    def landmarks(self) -> int:
        """Number of primitives."""
        return len(self.primitives)

    def cast(
        self, origins: NDArray[np.float64], directions: NDArray[np.float64]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Nearest hit distance and the hit primitive's reflectivity per ray."""
        hits = np.stack([p.intersect(origins, directions) for p in self.primitives])
        nearest = np.argmin(hits, axis=0)
        t = hits[nearest, np.arange(origins.shape[0])]
        reflectivity = np.array([p.reflectivity for p in self.primitives])[nearest]
        return t, reflectivity

    def contains(self, xy: ArrayLike) -> bool:
        """Whether ``xy`` lies inside the world square."""
        x, y = np.asarray(xy, dtype=np.float64)[:2]
        half = self.extent / 2.0
        return bool(abs(x) <= half and abs(y) <= half)


def _segment_distance(points: NDArray[np.float64], polyline: NDArray[np.float64]) -> NDArray[np.float64]:
    """Distance from (N, 2) points to a polyline (or a single point)."""
    if polyline.shape[0] == 1:
        return np.linalg.norm(points - polyline[0], axis=1)
    a, b = polyline[:-1], polyline[1:]
    ab = b - a
    ap = points[:, None, :] - a[None, :, :]
    length2 = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-12)
    s = np.clip(np.einsum("nij,ij->ni", ap, ab) / length2, 0.0, 1.0)
    closest = a[None] + s[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2).min(axis=1)


def _within(primitive: Primitive, half: float) -> bool:
    return bool(np.all(np.abs(primitive.footprint()) <= half + 1e-9))


def _random_landmark(kind: str, rng: np.random.Generator, half: float) -> Primitive:
    x, y = rng.uniform(-half, half, size=2)
    if kind == "box":
        size = (rng.uniform(1.0, 6.0), rng.uniform(1.0, 6.0), rng.uniform(2.0, 8.0))
        return Box((x, y, size[2] / 2.0), size, rng.uniform(0.0, 180.0), rng.uniform(0.1, 0.7))
    if kind == "cylinder":
        return Cylinder((x, y), rng.uniform(0.2, 1.0), rng.uniform(2.0, 10.0), 0.0, rng.uniform(0.1, 0.7))
    size = (rng.uniform(0.3, 0.8), rng.uniform(2.0, 6.0))
    if rng.random() < 0.5:
        size = (size[1], size[0])
    return Plane((x, y, 0.02), size, rng.uniform(0.85, 1.0))


def generate_scene(spec: SceneSpec) -> Scene:
    """Place random landmarks deterministically from ``spec.seed``.

    Raises:
        SceneError: Non-positive extent, no landmarks, or a given primitive outside the world
    """
    if not spec.extent > 0:
        raise SceneError(f"world extent must be positive, got {spec.extent}")
    requested = spec.boxes + spec.cylinders + spec.markings + len(spec.primitives)
    if requested == 0:
        raise SceneError("scene has no landmark primitives")
    half = spec.extent / 2.0
    for primitive in spec.primitives:
        if not _within(primitive, half):
            raise SceneError(f"{primitive!r} lies outside the {spec.extent} m world")

    rng = np.random.default_rng(spec.seed)
    corridor = np.asarray(spec.waypoints, dtype=np.float64).reshape(-1, 2)
    placed: list[Primitive] = []
    for kind, count in (("box", spec.boxes), ("cylinder", spec.cylinders), ("marking", spec.markings)):
        done, attempts = 0, 0
        while done < count and attempts < 100 * count:
            attempts += 1
            candidate = _random_landmark(kind, rng, half)
            if not _within(candidate, half):
                continue
            if kind != "marking" and corridor.size and _segment_distance(candidate.footprint(), corridor).min() < spec.clearance:
                continue
            placed.append(candidate)
            done += 1
        if done < count:
            logger.warning(msg=f"Placed only {done} of {count} {kind} landmarks in {attempts} attempts")

    primitives: list[Primitive] = []
    if spec.ground:
        primitives.append(Plane((0.0, 0.0, 0.0), (spec.extent, spec.extent), 0.2))
    primitives.extend(placed)
    primitives.extend(spec.primitives)
    logger.debug(msg=f"Generated scene seed={spec.seed} with {len(primitives)} primitives")
    return Scene(tuple(primitives), spec.extent, spec.seed)


@dataclass(frozen=True)
class ScanSpec:
    """Sensor model: coverage, range gate, angular grid, noise and its seed."""

    kind: SensorKind = SensorKind.PANORAMIC
    fov_deg: float = 360.0
    min_range: float = 0.5
    max_range: float = 60.0
    azimuth_resolution_deg: float = 1.0
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 15.0
    elevation_resolution_deg: float = 2.0
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the sensor model."""
        object.__setattr__(self, "kind", SensorKind(self.kind))
        if not 0.0 < self.fov_deg <= 360.0:
            raise ConfigurationError(f"fov must lie in (0, 360], got {self.fov_deg}")
        if self.azimuth_resolution_deg <= 0 or self.elevation_resolution_deg <= 0:
            raise ConfigurationError("angular resolutions must be positive")
        if not 0 <= self.min_range < self.max_range:
            raise ConfigurationError("range limits must satisfy 0 <= min < max")
        if self.elevation_max_deg < self.elevation_min_deg:
            raise ConfigurationError("elevation_max_deg must not be below elevation_min_deg")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")

    @classmethod
    def fov_limited(cls, fov_deg: float = 70.0, seed: int = 0) -> "ScanSpec":
        """Forward-facing wedge sensor."""
        return cls(kind=SensorKind.FOV_LIMITED, fov_deg=fov_deg, seed=seed)

    def directions(self) -> NDArray[np.float64]:
        """(R, 3) unit ray directions in the sensor frame, +x forward."""
        if self.kind is SensorKind.PANORAMIC:
            azimuth = np.arange(0.0, 360.0, self.azimuth_resolution_deg)
        else:
            steps = int(np.floor(self.fov_deg / self.azimuth_resolution_deg)) + 1
            azimuth = np.linspace(-self.fov_deg / 2.0, self.fov_deg / 2.0, steps)
        span = self.elevation_max_deg - self.elevation_min_deg
        rows = int(np.floor(span / self.elevation_resolution_deg + 1e-9)) + 1
        elevation = self.elevation_min_deg + self.elevation_resolution_deg * np.arange(rows)
        az, el = np.meshgrid(np.radians(azimuth), np.radians(elevation))
        az, el = az.reshape(-1), el.reshape(-1)
        return np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def render_scan(
    scene: Scene,
    pose: PoseSE3,
    spec: ScanSpec | None = None,
    seed: int | None = None,
    timestamp: float = 0.0,
) -> PointCloud:
    """Ray-cast a scan from ``pose``; points are in the sensor frame.

    Range noise is Gaussian with ``spec.noise_sigma``, drawn from ``seed``
    (default ``spec.seed``). Intensity uses the noiseless range.

    Raises:
        SceneError: The pose lies outside the world
        EmptyScanError: No ray hits within the range gate
    """
    spec = spec or ScanSpec()
    if not scene.contains(pose.translation):
        raise SceneError(f"sensor position {pose.translation} lies outside the world")
    local = spec.directions()
    world = local @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, world.shape)
    t, reflectivity = scene.cast(np.ascontiguousarray(origins), world)
    keep = np.isfinite(t) & (t >= spec.min_range) & (t <= spec.max_range)
    if not np.any(keep):
        raise EmptyScanError(f"no ray hit the scene from {pose.translation}")
    t, reflectivity, local = t[keep], reflectivity[keep], local[keep]
    ranges = t
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        ranges = t + rng.normal(0.0, spec.noise_sigma, size=t.shape)
    intensity = np.clip(reflectivity / (1.0 + t / INTENSITY_FALLOFF), 0.0, 1.0)
    points = np.column_stack([local * ranges[:, None], intensity])
    return PointCloud(points, timestamp=timestamp)


def surface_distance(scene: Scene, points: ArrayLike) -> NDArray[np.float64]:
    """Distance from world-frame points to the nearest primitive surface."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.min(np.stack([p.distance(pts) for p in scene.primitives]), axis=0)


def trajectory_poses(
    waypoints: ArrayLike, count: int, height: float = SENSOR_HEIGHT, closed: bool = False
) -> list[PoseSE3]:
    """``count`` poses evenly spaced by arc length along a polyline, heading along it."""
    path = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2)
    if closed:
        path = np.vstack([path, path[:1]])
    if path.shape[0] < 2 or count < 1:
        raise SceneError("a trajectory needs at least two waypoints and one pose")
    steps = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    end = arc[-1] * ((count - 1) / count if closed else 1.0)
    samples = np.linspace(0.0, end, count) if count > 1 else np.zeros(1)
    poses = []
    for s in samples:
        k = min(int(np.searchsorted(arc, s, side="right")) - 1, len(steps) - 1)
        frac = (s - arc[k]) / steps[k] if steps[k] > 0 else 0.0
        xy = path[k] + frac * (path[k + 1] - path[k])
        heading = np.degrees(np.arctan2(*(path[k + 1] - path[k])[::-1]))
        poses.append(PoseSE3.from_yaw(heading, (xy[0], xy[1], height)))
    return poses


@dataclass(frozen=True)
class Benchmark:
    """Paths of a generated desk benchmark."""

    directory: Path
    database: Path
    queries: Path
    scene: Scene = field(repr=False)


BENCHMARK_WAYPOINTS = ((-30.0, -20.0), (30.0, -20.0), (30.0, 20.0), (-30.0, 20.0))


def _write_sequence(
    scene: Scene,
    poses: Sequence[PoseSE3],
    spec: ScanSpec,
    directory: Path,
    prefix: str,
    seed: int,
) -> DatasetManifest:
    entries = []
    for k, pose in enumerate(poses):
        cloud = render_scan(scene, pose, spec, seed=seed + k, timestamp=float(k))
        path = save_cloud(cloud, directory / f"{prefix}_{k:04d}.bin")
        entries.append(ManifestEntry(path=path, pose=pose, timestamp=float(k)))
    return DatasetManifest(tuple(entries), spec.kind, directory)


def make_benchmark(
    directory: Path | str,
    tier: str = "easy",
    database_scans: int = 50,
    query_scans: int = 50,
    seed: int = 0,
    max_offset: float = 5.0,
    max_yaw_deg: float = 180.0,
    fov_deg: float = 70.0,
) -> Benchmark:
    """Write a database pass and an offset query pass of one synthetic scene.

    Database scans are evenly spaced around a closed 200 m loop. Each query
    starts from a random database pose, moves up to ``max_offset`` meters
    and turns up to ``max_yaw_deg`` degrees. The ``easy`` tier uses a
    panoramic sensor, ``fov`` a ``fov_deg`` forward wedge.

    Returns:
        Paths of ``database.txt`` and ``queries.txt`` under ``directory``.
    """
    if tier not in {"easy", "fov"}:
        raise ConfigurationError(f"unknown benchmark tier {tier!r}; use 'easy' or 'fov'")
    directory = Path(directory)
    clearance = max_offset + 2.0
    scene = generate_scene(SceneSpec(seed=seed, waypoints=BENCHMARK_WAYPOINTS + BENCHMARK_WAYPOINTS[:1], clearance=clearance))
    spec = ScanSpec(seed=seed) if tier == "easy" else ScanSpec.fov_limited(fov_deg, seed=seed)
    database_poses = trajectory_poses(BENCHMARK_WAYPOINTS, database_scans, closed=True)

    rng = np.random.default_rng([seed, 1])
    query_poses = []
    for anchor in rng.integers(0, database_scans, size=query_scans):
        base = database_poses[int(anchor)]
        radius = max_offset * np.sqrt(rng.random())
        angle = rng.uniform(0.0, 2.0 * np.pi)
        offset = np.array([radius * np.cos(angle), radius * np.sin(angle), 0.0])
        yaw = np.degrees(np.arctan2(base.rotation[1, 0], base.rotation[0, 0])) + rng.uniform(-max_yaw_deg, max_yaw_deg)
        query_poses.append(PoseSE3.from_yaw(yaw, base.translation + offset))

    database = _write_sequence(scene, database_poses, spec, directory / "database", "db", seed * 100_000)
    queries = _write_sequence(scene, query_poses, spec, directory / "queries", "q", seed * 100_000 + 50_000)
    database_path = save_manifest(database, directory / "database.txt")
    queries_path = save_manifest(queries, directory / "queries.txt")
    logger.info(msg=f"Wrote {tier} benchmark: {database_scans} database and {query_scans} query scans to {directory}")
    return Benchmark(directory, database_path, queries_path, scene)
