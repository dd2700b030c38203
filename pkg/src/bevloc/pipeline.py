"""End-to-end global localization: retrieval, registration, loop closure.

A query is localized by retrieving its nearest database scan by global
descriptor and registering the two scans. The registration estimate ``dT``
maps query coordinates into the retrieved scan's frame, so the query's
world pose is ``T_db @ dT``.
"""

import csv
import logging
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from types import TracebackType

import numpy as np

from .bev import BevPair, encode
from .cache import FeatureCache
from .cloud_io import DatasetManifest, ManifestEntry, PointCloud
from .config import RunConfig
from .exceptions import BevLocError, EmptyIndexError
from .features import FeatureBackend, FeatureSet, extract
from .registration import RegistrationResult, ScanFeatures, localize, pose_metrics
from .retrieval import DescriptorIndex, query
from .se3 import PoseSE3

logger: logging.Logger = logging.getLogger(name=__name__)

RECORD_FIELDS = (
    "query",
    "database",
    "descriptor_distance",
    "status",
    "success",
    "translation_error",
    "rotation_error",
    "inliers",
    "correspondences",
    "iterations",
    "converged",
    "estimate",
    "error",
)


@dataclass(frozen=True, eq=False)
class EncodedScan:
    """A loaded cloud with its BEV pair and extracted features."""

    name: str
    cloud: PointCloud
    bev: BevPair
    features: FeatureSet

    @property
    def scan_features(self) -> ScanFeatures:
        """The registration view of this scan."""
        return ScanFeatures(self.cloud, self.bev, self.features.local_map)


def encode_entry(entry: ManifestEntry, run_config: RunConfig, backend: FeatureBackend) -> EncodedScan:
    """Load, encode and extract one manifest entry."""
    cloud = entry.load()
    bev = encode(cloud, run_config.bev)
    return EncodedScan(entry.name, cloud, bev, extract(bev, backend, cloud_id=entry.name))


@dataclass(frozen=True, eq=False)
class QueryRecord:
    """Outcome of localizing one query; ``error`` is set when a stage failed."""

    query: str
    database: str = ""
    descriptor_distance: float = float("nan")
    estimate: PoseSE3 | None = None
    translation_error: float = float("nan")
    rotation_error: float = float("nan")
    success: bool = False
    inliers: int = 0
    correspondences: int = 0
    iterations: int = 0
    converged: bool = False
    retrieval_time: float = 0.0
    registration_time: float = 0.0
    error: str = ""

    @property
    def failed(self) -> bool:
        """Whether a stage raised."""
        return bool(self.error)

    def row(self) -> list[str]:
        """CSV cells in :data:`RECORD_FIELDS` order; timings are left out."""
        estimate = ""
        if self.estimate is not None:
            rt = np.hstack([self.estimate.rotation, self.estimate.translation[:, None]]).reshape(-1)
            estimate = " ".join(f"{v:.17g}" for v in rt)
        return [
            self.query,
            self.database,
            f"{self.descriptor_distance:.17g}",
            "error" if self.failed else "ok",
            str(self.success).lower(),
            f"{self.translation_error:.17g}",
            f"{self.rotation_error:.17g}",
            str(self.inliers),
            str(self.correspondences),
            str(self.iterations),
            str(self.converged).lower(),
            estimate,
            self.error,
        ]


@dataclass(frozen=True)
class SuccessSummary:
    """Aggregate localization outcome; errored queries count as failures."""

    total: int
    successes: int
    errors: int
    success_rate: float
    median_translation_error: float
    median_rotation_error: float

    def summary_lines(self) -> list[str]:
        """Human-readable summary."""
        return [
            f"queries: {self.total}",
            f"successes: {self.successes}",
            f"errors: {self.errors}",
            f"success rate: {self.success_rate:.6f}",
            f"median translation error (m): {self.median_translation_error:.6f}",
            f"median rotation error (deg): {self.median_rotation_error:.6f}",
        ]


def aggregate_success(records: Sequence[QueryRecord]) -> SuccessSummary:
    """Success rate over every record and median errors over the non-errored ones."""
    total = len(records)
    successes = sum(1 for r in records if r.success)
    errors = sum(1 for r in records if r.failed)
    done = [r for r in records if not r.failed]
    median_t = float(np.median([r.translation_error for r in done])) if done else float("nan")
    median_r = float(np.median([r.rotation_error for r in done])) if done else float("nan")
    return SuccessSummary(total, successes, errors, successes / total if total else 0.0, median_t, median_r)


def write_records_csv(records: Iterable[QueryRecord], path: Path | str) -> Path:
    """Write one row per query in input order.

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for record in records:
            writer.writerow(record.row())
    return path


class LocalizationPipeline:
    """Database map (descriptor index plus cached features) serving queries in parallel."""

    def __init__(
        self,
        database: DatasetManifest,
        run_config: RunConfig,
        backend: FeatureBackend | None = None,
    ) -> None:
        """Initialize the LocalizationPipeline.

        Encodes every database entry once; entries that fail are left out of
        the index and listed in ``excluded``.

        Args:
            database: Database manifest
            run_config: Run settings
            backend: Feature backend; built from ``run_config`` when omitted

        Raises:
            EmptyIndexError: No database entry could be encoded
        """
        self.database = database
        self.run_config = run_config
        self.backend = backend or run_config.make_backend()
        self.cache: FeatureCache[EncodedScan] = FeatureCache(max_size=run_config.cache_size)
        self._executor = ThreadPoolExecutor(max_workers=run_config.workers, thread_name_prefix="bevloc")

        encoded = list(self._executor.map(self._try_encode, database.entries))
        descriptors: dict[int, np.ndarray] = {}
        names: list[str] = []
        self.excluded: list[str] = []
        for k, scan in enumerate(encoded):
            if scan is None:
                self.excluded.append(database.entries[k].name)
                continue
            descriptors[k] = scan.features.global_descriptor
            names.append(scan.name)
            self.cache.put(k, scan)
        if not descriptors:
            self.close()
            raise EmptyIndexError("no database entry could be encoded")
        self.index = DescriptorIndex.build(descriptors, names)
        logger.info(msg=f"Database map: {len(self.index)} scans indexed, {len(self.excluded)} excluded")

    def _try_encode(self, entry: ManifestEntry) -> EncodedScan | None:
        try:
            return encode_entry(entry, self.run_config, self.backend)
        except BevLocError as err:
            logger.warning(msg=f"Excluding database scan {entry.name}: {err}")
            return None

    def __enter__(self) -> "LocalizationPipeline":
        """Enter the context."""
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        """Shut the worker pool down."""
        self.close()

    def close(self) -> None:
        """Shut the worker pool down."""
        self._executor.shutdown(wait=True)

    def database_scan(self, entry_id: int) -> EncodedScan:
        """Features of database entry ``entry_id``, re-encoded after cache eviction."""
        entry = self.database.entries[entry_id]
        return self.cache.get_or_compute(
            entry_id, lambda: encode_entry(entry, self.run_config, self.backend)
        )

    def register(self, scan: EncodedScan, entry_id: int) -> RegistrationResult:
        """Register ``scan`` against database entry ``entry_id``."""
        target = self.database_scan(entry_id)
        return localize(
            scan.scan_features,
            target.scan_features,
            self.run_config.matching,
            self.run_config.gnc,
        )

    def localize_entry(self, entry: ManifestEntry) -> QueryRecord:
        """Retrieve, register and score one query; failures become an errored record."""
        started = time.perf_counter()
        database_name = ""
        distance = float("nan")
        try:
            scan = encode_entry(entry, self.run_config, self.backend)
            best = query(self.index, scan.features.global_descriptor, self.run_config.k)[0]
            database_name, distance = self.index.name_of(best.id), best.distance
            retrieved = time.perf_counter()
            result = self.register(scan, best.id)
            registered = time.perf_counter()
        except BevLocError as err:
            logger.warning(msg=f"Query {entry.name} failed: {type(err).__name__}: {err}")
            return QueryRecord(
                entry.name,
                database_name,
                distance,
                error=f"{type(err).__name__}: {err}",
                retrieval_time=time.perf_counter() - started,
            )

        estimate = self.database.entries[best.id].pose @ result.pose
        metrics = pose_metrics(estimate, entry.pose)
        logger.debug(
            msg=f"Query {entry.name} -> {database_name}: e_t {metrics.translation_error:.3f} m, "
            f"e_R {metrics.rotation_error:.3f} deg"
        )
        return QueryRecord(
            query=entry.name,
            database=database_name,
            descriptor_distance=distance,
            estimate=estimate,
            translation_error=metrics.translation_error,
            rotation_error=metrics.rotation_error,
            success=metrics.success,
            inliers=result.inliers,
            correspondences=int(result.weights.size),
            iterations=result.iterations,
            converged=result.converged,
            retrieval_time=retrieved - started,
            registration_time=registered - retrieved,
        )

    def localize_queries(self, entries: Iterable[ManifestEntry]) -> list[QueryRecord]:
        """Localize ``entries`` on the worker pool; records keep input order."""
        return list(self._executor.map(self.localize_entry, entries))


@dataclass(frozen=True, eq=False)
class LoopClosure:
    """Accepted loop edge: ``measurement`` maps frame ``i`` into frame ``j`` (``i > j``)."""

    i: int
    j: int
    measurement: PoseSE3
    descriptor_distance: float
    inliers: int


def detect_loop_closures(
    manifest: DatasetManifest,
    run_config: RunConfig,
    backend: FeatureBackend | None = None,
) -> list[LoopClosure]:
    """Revisit detection along a sequence.

    Frame ``i`` retrieves its nearest frame among those at least
    ``min_separation`` older; when the descriptor distance is within
    ``max_descriptor_distance`` the pair is registered and a converged
    registration becomes a loop edge. Frames that cannot be encoded take no
    part, neither as query nor as candidate.
    """
    backend = backend or run_config.make_backend()

    def try_encode(entry: ManifestEntry) -> EncodedScan | None:
        try:
            return encode_entry(entry, run_config, backend)
        except BevLocError as err:
            logger.warning(msg=f"Skipping frame {entry.name} in loop detection: {err}")
            return None

    with ThreadPoolExecutor(max_workers=run_config.workers, thread_name_prefix="bevloc") as pool:
        scans = list(pool.map(try_encode, manifest.entries))
    encoded = {i: scan for i, scan in enumerate(scans) if scan is not None}

    def attempt(i: int) -> LoopClosure | None:
        newest = i - run_config.min_separation
        older = {j: scan.features.global_descriptor for j, scan in encoded.items() if j <= newest}
        if not older:
            return None
        best = query(DescriptorIndex.build(older), encoded[i].features.global_descriptor, 1)[0]
        if best.distance > run_config.max_descriptor_distance:
            return None
        try:
            result = localize(
                encoded[i].scan_features, encoded[best.id].scan_features, run_config.matching, run_config.gnc
            )
        except BevLocError as err:
            logger.debug(msg=f"Loop candidate ({i}, {best.id}) rejected: {err}")
            return None
        if not result.converged:
            return None
        logger.info(msg=f"Loop closure {i} -> {best.id} with {result.inliers} inliers")
        return LoopClosure(i, best.id, result.pose, best.distance, result.inliers)

    candidates = [i for i in encoded if i >= run_config.min_separation]
    with ThreadPoolExecutor(max_workers=run_config.workers, thread_name_prefix="bevloc") as pool:
        found = list(pool.map(attempt, candidates))
    return [closure for closure in found if closure is not None]
