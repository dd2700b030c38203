"""Pose recovery between a query and a database scan.

Local features are matched pixel to pixel per BEV channel, matched pixels
are lifted back to 3D points, and the relative pose is estimated with
graduated non-convexity (GNC) over a truncated least squares (TLS) cost:
weighted SVD solves alternate with closed-form weight updates while the
surrogate's control parameter ``mu`` grows until the surrogate matches TLS.

Correspondences pair a query point ``q`` with a database point ``d``; the
estimate ``dT`` maps query coordinates into database coordinates,
``d ~ dT @ q``, i.e. ``dT = T_db^-1 @ T_q`` for world poses ``T``.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import cdist

from .bev import BevPair, Channel, lift_keypoints
from .cloud_io import PointCloud
from .exceptions import (
    ConfigurationError,
    DegenerateConfigurationError,
    InsufficientMatchesError,
    NoConsensusError,
)
from .features import ChannelSet, LocalFeatureMap, interpolate_many
from .se3 import PoseSE3, so3_log

logger: logging.Logger = logging.getLogger(name=__name__)

SUCCESS_TRANSLATION = 2.0
SUCCESS_ROTATION_DEG = 5.0
_RANK_TOLERANCE = 1e-10
_KEYPOINT_SIGMA = 1.0
_CONSISTENCY_BLOCK = 256


class CandidatePixels(StrEnum):
    """Database pixels a query keypoint may match."""

    KEYPOINTS = "keypoints"
    OCCUPIED = "occupied"


@dataclass(frozen=True)
class MatchConfig:
    """Keypoint budget, match filters and the consistency check.

    ``ratio`` caps the best-to-second-best feature distance; 1.0 accepts any
    strictly better best match. The second best is sought outside a
    ``patch_size`` (Chebyshev) neighbourhood of the best pixel. A keypoint
    that fails the ratio check keeps up to ``top_k`` such separated
    candidates instead of its best one; with ``top_k = 1`` it is dropped.
    ``suppression`` is the keypoint non-maximum suppression radius in
    pixels. ``consistency`` (m) is the pairwise length tolerance of the
    outlier pruning run before GNC; 0 disables pruning.
    """

    max_keypoints: int = 512
    mutual: bool = True
    ratio: float = 0.95
    channels: ChannelSet = ChannelSet.BOTH
    candidates: CandidatePixels = CandidatePixels.OCCUPIED
    top_k: int = 3
    suppression: int = 2
    consistency: float = 1.0

    def __post_init__(self) -> None:
        """Validate and coerce enum fields."""
        if self.max_keypoints < 1:
            raise ConfigurationError("matching.max_keypoints must be at least 1")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigurationError(f"matching.ratio must lie in (0, 1], got {self.ratio}")
        if self.top_k < 1:
            raise ConfigurationError("matching.top_k must be at least 1")
        if self.suppression < 0:
            raise ConfigurationError("matching.suppression must not be negative")
        if not self.consistency >= 0.0:
            raise ConfigurationError(f"matching.consistency must not be negative, got {self.consistency}")
        object.__setattr__(self, "channels", ChannelSet(self.channels))
        object.__setattr__(self, "candidates", CandidatePixels(self.candidates))

    @property
    def channel_list(self) -> list[Channel]:
        """Channels to match, spatial first."""
        if self.channels is ChannelSet.BOTH:
            return [Channel.SPATIAL, Channel.INTENSITY]
        return [Channel(self.channels.value)]


@dataclass(frozen=True)
class GncConfig:
    """TLS truncation ``xi`` (m), ``mu`` growth, iteration cap, weight tolerance."""

    truncation: float = 0.5
    growth: float = 1.4
    max_iterations: int = 100
    tolerance: float = 1e-6
    min_inliers: int = 10

    def __post_init__(self) -> None:
        """Validate the schedule."""
        if not self.truncation > 0:
            raise ConfigurationError(f"gnc.truncation must be positive, got {self.truncation}")
        if not self.growth > 1:
            raise ConfigurationError(f"gnc.growth must exceed 1, got {self.growth}")
        if self.max_iterations < 1:
            raise ConfigurationError("gnc.max_iterations must be at least 1")
        if self.min_inliers < 1:
            raise ConfigurationError("gnc.min_inliers must be at least 1")


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Paired query/database points with their channel and feature distance."""

    query: NDArray[np.float64]
    database: NDArray[np.float64]
    channels: tuple[Channel, ...] = ()
    distances: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    query_pixels: NDArray[np.int64] = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    database_pixels: NDArray[np.int64] = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self) -> None:
        """Validate shapes and finiteness; fill optional fields."""
        q = np.array(self.query, dtype=np.float64).reshape(-1, 3)
        d = np.array(self.database, dtype=np.float64).reshape(-1, 3)
        if q.shape != d.shape:
            raise ValueError(f"point sets differ in shape: {q.shape} vs {d.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(d))):
            raise ValueError("correspondence coordinates must be finite")
        n = q.shape[0]
        channels = tuple(Channel(c) for c in self.channels) or (Channel.SPATIAL,) * n
        distances = np.array(self.distances, dtype=np.float64).reshape(-1)
        if distances.size == 0:
            distances = np.zeros(n)
        if len(channels) != n or distances.size != n:
            raise ValueError("channels and distances need one entry per pair")
        for name, value in (("query", q), ("database", d), ("distances", distances)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "channels", channels)

    def __len__(self) -> int:
        """Number of pairs."""
        return int(self.query.shape[0])

    def count(self, channel: Channel | str) -> int:
        """Pairs from ``channel``."""
        channel = Channel(channel)
        return sum(1 for c in self.channels if c is channel)

    def subset(self, indices: ArrayLike) -> "CorrespondenceSet":
        """The pairs at ``indices``, in that order."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        q_pix = np.asarray(self.query_pixels, dtype=np.int64).reshape(-1, 2)
        db_pix = np.asarray(self.database_pixels, dtype=np.int64).reshape(-1, 2)
        return CorrespondenceSet(
            query=self.query[idx],
            database=self.database[idx],
            channels=tuple(self.channels[i] for i in idx),
            distances=self.distances[idx],
            query_pixels=q_pix[idx] if q_pix.shape[0] == len(self) else q_pix[:0],
            database_pixels=db_pix[idx] if db_pix.shape[0] == len(self) else db_pix[:0],
        )


@dataclass(frozen=True)
class ScanFeatures:
    """A scan with its BEV pair and local feature map."""

    cloud: PointCloud
    bev: BevPair
    local_map: LocalFeatureMap


class SurrogateStep(NamedTuple):
    """Surrogate cost at one ``mu``: before and after the weight update, after the pose solve."""

    mu: float
    before_weights: float
    after_weights: float
    after_pose: float


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    """Estimated relative pose with TLS weights and diagnostics."""

    pose: PoseSE3
    weights: NDArray[np.float64]
    iterations: int
    converged: bool
    mu: float = 0.0
    surrogate_steps: tuple[SurrogateStep, ...] = ()
    matches: dict[str, int] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def inliers(self) -> int:
        """Pairs with weight above 0.5."""
        return int(np.count_nonzero(self.weights > 0.5))

    @property
    def inlier_ratio(self) -> float:
        """Fraction of pairs that are inliers."""
        return self.inliers / self.weights.size if self.weights.size else 0.0


class PoseMetrics(NamedTuple):
    """Translation error (m), rotation error (deg) and the success flag."""

    translation_error: float
    rotation_error: float
    success: bool


def select_keypoints(
    bev: BevPair, channel: Channel | str, max_keypoints: int, suppression: int = 2
) -> NDArray[np.int64]:
    """Strongest occupied pixels of the smoothed channel image, greedily suppressed.

    Pixels are ranked by the Gaussian-smoothed channel value (ties in
    row-major order); a pixel is taken unless an already taken one lies
    within ``suppression`` pixels (Chebyshev).

    Returns:
        (K, 2) ``(u, v)`` pixels, strongest first, ``K <= max_keypoints``.
    """
    pixels = bev.occupied_pixels()
    if pixels.shape[0] == 0:
        return pixels
    response = gaussian_filter(bev.image(channel), sigma=_KEYPOINT_SIGMA)[pixels[:, 1], pixels[:, 0]]
    order = np.lexsort((np.arange(pixels.shape[0]), -response))
    taken = np.zeros(bev.spatial.shape, dtype=bool)
    r = suppression
    chosen: list[int] = []
    for k in order:
        u, v = pixels[k]
        if taken[v, u]:
            continue
        chosen.append(int(k))
        if len(chosen) == max_keypoints:
            break
        taken[max(v - r, 0) : v + r + 1, max(u - r, 0) : u + r + 1] = True
    return pixels[chosen]


def _feature_distances(q: NDArray[np.float64], db: NDArray[np.float64]) -> NDArray[np.float64]:
    squared = np.sum(q**2, axis=1)[:, None] + np.sum(db**2, axis=1)[None, :] - 2.0 * q @ db.T
    return np.sqrt(np.maximum(squared, 0.0))


def match_descriptors(
    query_feats: ArrayLike,
    database_feats: ArrayLike,
    database_pixels: ArrayLike,
    mutual: bool = True,
    ratio: float = 0.95,
    exclusion: int = 8,
    top_k: int = 1,
) -> tuple[NDArray[np.int64], NDArray[np.int64], NDArray[np.float64]]:
    """Nearest database features for every query feature, then filters.

    Candidates are taken in rounds: each round picks the nearest database
    feature not within ``exclusion`` pixels (Chebyshev) of an earlier pick.
    A query feature passes the ratio check when its best distance is
    strictly below ``ratio`` times the second round's; it then keeps its
    best candidate only. One that fails keeps its first ``top_k``
    candidates when ``top_k > 1`` and none otherwise. A kept pair survives
    the mutual check when the database feature's own nearest query feature
    is the same one.

    Returns:
        Query row indices, database row indices and feature distances,
        ordered by query row then candidate rank.
    """
    q = np.asarray(query_feats, dtype=np.float64)
    db = np.asarray(database_feats, dtype=np.float64)
    pix = np.asarray(database_pixels, dtype=np.int64).reshape(-1, 2)
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
    if q.shape[0] == 0 or db.shape[0] == 0:
        return empty
    dist = _feature_distances(q, db)
    rows = np.arange(q.shape[0])
    masked = dist.copy()
    picks, pick_dists = [], []
    for _ in range(max(top_k, 2)):
        best = np.argmin(masked, axis=1)
        picks.append(best)
        pick_dists.append(masked[rows, best])
        near = (np.abs(pix[None, :, 0] - pix[best, 0][:, None]) <= exclusion) & (
            np.abs(pix[None, :, 1] - pix[best, 1][:, None]) <= exclusion
        )
        masked[near] = np.inf
    distinctive = pick_dists[0] < ratio * pick_dists[1]

    q_rows, db_rows = [], []
    for rank in range(top_k):
        if rank == 0:
            keep = distinctive if top_k == 1 else np.ones_like(distinctive)
        else:
            keep = ~distinctive
        keep = keep & np.isfinite(pick_dists[rank])
        q_rows.append(rows[keep])
        db_rows.append(picks[rank][keep])
    qi, di = np.concatenate(q_rows), np.concatenate(db_rows)
    if mutual:
        reverse = np.argmin(dist, axis=0)
        keep = reverse[di] == qi
        qi, di = qi[keep], di[keep]
    order = np.argsort(qi, kind="stable")
    qi, di = qi[order], di[order]
    return qi, di, np.linalg.norm(q[qi] - db[di], axis=1)


def _candidate_pixels(bev: BevPair, channel: Channel, cfg: MatchConfig) -> NDArray[np.int64]:
    if cfg.candidates is CandidatePixels.OCCUPIED:
        return bev.occupied_pixels()
    return select_keypoints(bev, channel, cfg.max_keypoints, cfg.suppression)


def match_features(
    query: ScanFeatures, database: ScanFeatures, cfg: MatchConfig | None = None
) -> CorrespondenceSet:
    """Match keypoints per channel and lift both ends to 3D points.

    Raises:
        InsufficientMatchesError: Fewer than three distinct query pixels survive
    """
    cfg = cfg or MatchConfig()
    q_points, db_points, channels, distances, q_pixels, db_pixels = [], [], [], [], [], []
    for channel in cfg.channel_list:
        q_pix = select_keypoints(query.bev, channel, cfg.max_keypoints, cfg.suppression)
        db_pix = _candidate_pixels(database.bev, channel, cfg)
        if q_pix.shape[0] == 0 or db_pix.shape[0] == 0:
            continue
        q_feats = interpolate_many(query.local_map, q_pix, channel)
        db_feats = interpolate_many(database.local_map, db_pix, channel)
        qi, di, dist = match_descriptors(
            q_feats,
            db_feats,
            db_pix,
            cfg.mutual,
            cfg.ratio,
            exclusion=database.bev.config.patch_size,
            top_k=cfg.top_k,
        )
        if qi.size == 0:
            continue
        q_points.append(lift_keypoints(query.bev, query.cloud, q_pix[qi], channel))
        db_points.append(lift_keypoints(database.bev, database.cloud, db_pix[di], channel))
        channels.extend([channel] * qi.size)
        distances.append(dist)
        q_pixels.append(q_pix[qi])
        db_pixels.append(db_pix[di])

    unique = np.unique(np.vstack(q_pixels), axis=0).shape[0] if q_pixels else 0
    if unique < 3:
        raise InsufficientMatchesError(
            f"only {unique} distinct query pixels matched, need at least 3", count=unique
        )
    logger.debug(msg=f"Matched {len(channels)} pairs over {unique} query pixels")
    return CorrespondenceSet(
        query=np.vstack(q_points),
        database=np.vstack(db_points),
        channels=tuple(channels),
        distances=np.concatenate(distances),
        query_pixels=np.vstack(q_pixels),
        database_pixels=np.vstack(db_pixels),
    )


def consistent_subset(correspondences: CorrespondenceSet, tolerance: float) -> NDArray[np.int64]:
    """Indices of a mutually consistent set of pairs.

    Two pairs are consistent when the distance between their query points
    and the distance between their database points differ by at most
    ``tolerance``; a rigid motion keeps every such length. Pairs are peeled
    off in order of fewest consistent partners (lowest index first) until
    every remaining pair is consistent with every other one. A tolerance of
    0 keeps all pairs.

    Returns:
        Sorted indices into ``correspondences``.
    """
    n = len(correspondences)
    if n == 0 or tolerance <= 0.0:
        return np.arange(n)
    q, d = correspondences.query, correspondences.database
    adjacency = np.zeros((n, n), dtype=bool)
    for start in range(0, n, _CONSISTENCY_BLOCK):
        stop = min(start + _CONSISTENCY_BLOCK, n)
        adjacency[start:stop] = np.abs(cdist(q[start:stop], q) - cdist(d[start:stop], d)) <= tolerance
    np.fill_diagonal(adjacency, False)
    alive = np.ones(n, dtype=bool)
    degree = adjacency.sum(axis=1)
    remaining = n
    while remaining > 1:
        weakest = int(np.argmin(np.where(alive, degree, n)))
        if degree[weakest] >= remaining - 1:
            break
        alive[weakest] = False
        degree -= adjacency[weakest]
        remaining -= 1
    kept = np.flatnonzero(alive)
    logger.debug(msg=f"Consistency check kept {kept.size} of {n} pairs")
    return kept


def solve_weighted(correspondences: CorrespondenceSet, weights: ArrayLike | None = None) -> PoseSE3:
    """Closed-form minimizer of ``sum w_i |dT q_i - d_i|^2``.

    Weighted centroids, SVD of the weighted cross-covariance and a
    determinant correction against reflections.

    Raises:
        DegenerateConfigurationError: Zero total weight or a cross-covariance of rank < 2
    """
    q, d = correspondences.query, correspondences.database
    w = np.ones(len(correspondences)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (q.shape[0],) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite, non-negative and one per pair")
    total = float(w.sum())
    if len(correspondences) < 3 or total <= 0.0:
        raise DegenerateConfigurationError("need at least three pairs with positive total weight")
    q_mean = w @ q / total
    d_mean = w @ d / total
    cov = (q - q_mean).T @ (w[:, None] * (d - d_mean))
    u, s, vt = np.linalg.svd(cov)
    if s[0] <= 0.0 or s[1] <= _RANK_TOLERANCE * s[0]:
        raise DegenerateConfigurationError(
            f"weighted point sets are collinear or coincident (singular values {s})"
        )
    v = vt.T
    sign = 1.0 if np.linalg.det(v @ u.T) >= 0.0 else -1.0
    rotation = v @ np.diag([1.0, 1.0, sign]) @ u.T
    return PoseSE3(rotation, d_mean - rotation @ q_mean)


def _residuals(pose: PoseSE3, correspondences: CorrespondenceSet) -> NDArray[np.float64]:
    return np.linalg.norm(pose.apply(correspondences.query) - correspondences.database, axis=1)


def tls_weights(residuals: ArrayLike, mu: float, truncation: float) -> NDArray[np.float64]:
    """Closed-form GNC-TLS weights at control parameter ``mu``."""
    r = np.asarray(residuals, dtype=np.float64)
    r2 = r**2
    c2 = truncation**2
    upper = (mu + 1.0) / mu * c2
    lower = mu / (mu + 1.0) * c2
    weights = np.zeros_like(r)
    weights[r2 <= lower] = 1.0
    middle = (r2 > lower) & (r2 < upper)
    weights[middle] = truncation / r[middle] * np.sqrt(mu * (mu + 1.0)) - mu
    return np.clip(weights, 0.0, 1.0)


def surrogate_cost(
    residuals: ArrayLike, weights: ArrayLike, mu: float, truncation: float
) -> float:
    """GNC-TLS surrogate ``sum w r^2 + mu (1 - w) / (mu + w) xi^2``."""
    r2 = np.asarray(residuals, dtype=np.float64) ** 2
    w = np.asarray(weights, dtype=np.float64)
    penalty = mu * (1.0 - w) / (mu + w) * truncation**2
    return float(np.sum(w * r2 + penalty))


def gnc_register(correspondences: CorrespondenceSet, cfg: GncConfig | None = None) -> RegistrationResult:
    """Robust relative pose by GNC over the TLS cost.

    ``mu`` starts at ``xi^2 / (2 r_max^2 - xi^2)`` from the largest initial
    residual and grows by ``cfg.growth`` per outer iteration; iteration stops
    once no weight moves by more than ``cfg.tolerance``.

    Raises:
        InsufficientMatchesError: Fewer than three pairs
        DegenerateConfigurationError: The unweighted problem is degenerate
        NoConsensusError: Weights collapse, or fewer than ``min_inliers`` survive
    """
    cfg = cfg or GncConfig()
    n = len(correspondences)
    if n < 3:
        raise InsufficientMatchesError(f"need at least 3 correspondences, got {n}", count=n)
    weights = np.ones(n)
    pose = solve_weighted(correspondences, weights)
    residuals = _residuals(pose, correspondences)
    c2 = cfg.truncation**2
    r_max2 = float(np.max(residuals**2))
    if r_max2 <= c2:
        return RegistrationResult(pose, weights, 0, True, 0.0)

    mu = c2 / (2.0 * r_max2 - c2)
    steps: list[SurrogateStep] = []
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        before = surrogate_cost(residuals, weights, mu, cfg.truncation)
        new_weights = tls_weights(residuals, mu, cfg.truncation)
        after_weights = surrogate_cost(residuals, new_weights, mu, cfg.truncation)
        try:
            pose = solve_weighted(correspondences, new_weights)
        except DegenerateConfigurationError as err:
            raise NoConsensusError(
                f"weights collapsed after {iterations} iterations: {err}",
                inliers=int(np.count_nonzero(new_weights > 0.5)),
            ) from err
        residuals = _residuals(pose, correspondences)
        steps.append(
            SurrogateStep(mu, before, after_weights, surrogate_cost(residuals, new_weights, mu, cfg.truncation))
        )
        change = float(np.max(np.abs(new_weights - weights)))
        weights = new_weights
        if change < cfg.tolerance:
            converged = True
            break
        mu *= cfg.growth

    result = RegistrationResult(pose, weights, iterations, converged, mu, tuple(steps))
    required = min(cfg.min_inliers, n)
    if result.inliers < required:
        raise NoConsensusError(
            f"only {result.inliers} of {n} correspondences are inliers (need {required})",
            inliers=result.inliers,
        )
    logger.debug(
        msg=f"GNC finished after {iterations} iterations (converged={converged}), "
        f"{result.inliers}/{n} inliers"
    )
    return result


def localize(
    query: ScanFeatures,
    database: ScanFeatures,
    match_cfg: MatchConfig | None = None,
    gnc_cfg: GncConfig | None = None,
) -> RegistrationResult:
    """Match features, prune inconsistent pairs, then register.

    The result carries one weight per matched pair (zero for pruned pairs),
    per-channel match counts and stage timings.
    """
    match_cfg = match_cfg or MatchConfig()
    gnc_cfg = gnc_cfg or GncConfig()
    started = time.perf_counter()
    correspondences = match_features(query, database, match_cfg)
    matched = time.perf_counter()
    kept = consistent_subset(correspondences, match_cfg.consistency)
    pruned = gnc_register(correspondences.subset(kept), gnc_cfg)
    weights = np.zeros(len(correspondences))
    weights[kept] = pruned.weights
    result = replace(pruned, weights=weights, matches={}, timings={})
    finished = time.perf_counter()
    required = min(gnc_cfg.min_inliers, len(correspondences))
    if result.inliers < required:
        raise NoConsensusError(
            f"only {result.inliers} of {len(correspondences)} matches are inliers (need {required})",
            inliers=result.inliers,
        )
    result.matches.update(
        {
            Channel.SPATIAL.value: correspondences.count(Channel.SPATIAL),
            Channel.INTENSITY.value: correspondences.count(Channel.INTENSITY),
        }
    )
    result.timings.update({"matching": matched - started, "registration": finished - matched})
    return result


def pose_metrics(estimate: PoseSE3, truth: PoseSE3) -> PoseMetrics:
    """Translation error, geodesic rotation error in degrees, and success (< 2 m and < 5 deg)."""
    e_t = float(np.linalg.norm(estimate.translation - truth.translation))
    e_r = float(np.degrees(np.linalg.norm(so3_log(estimate.rotation.T @ truth.rotation))))
    return PoseMetrics(e_t, e_r, e_t < SUCCESS_TRANSLATION and e_r < SUCCESS_ROTATION_DEG)


def format_result(result: RegistrationResult) -> str:
    """Text record: ``pose`` (3x4 row-major), ``inliers``, ``iterations``, ``converged``."""
    rt = np.hstack([result.pose.rotation, result.pose.translation[:, None]]).reshape(-1)
    lines = [
        "pose " + " ".join(f"{v:.17g}" for v in rt),
        f"inliers {result.inliers}",
        f"pairs {result.weights.size}",
        f"iterations {result.iterations}",
        f"converged {str(result.converged).lower()}",
    ]
    return "\n".join(lines) + "\n"


def parse_result(text: str) -> tuple[PoseSE3, dict[str, str]]:
    """Read the pose and fields back from :func:`format_result` output."""
    fields: dict[str, str] = {}
    pose = PoseSE3.identity()
    for line in text.splitlines():
        key, _, value = line.partition(" ")
        if key == "pose":
            pose = PoseSE3.from_matrix(np.array([float(v) for v in value.split()]).reshape(3, 4))
        elif key:
            fields[key] = value
    return pose, fields

