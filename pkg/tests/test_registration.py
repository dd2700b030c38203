"""Tests for the registration module."""

import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from bevloc.bev import BevConfig, Channel, encode
from bevloc.cloud_io import PointCloud
from bevloc.exceptions import (
    ConfigurationError,
    DegenerateConfigurationError,
    InsufficientMatchesError,
    NoConsensusError,
    RegistrationError,
)
from bevloc.features import ReferenceBackend
from bevloc.registration import (
    CorrespondenceSet,
    GncConfig,
    MatchConfig,
    ScanFeatures,
    consistent_subset,
    gnc_register,
    localize,
    match_descriptors,
    match_features,
    format_result,
    parse_result,
    pose_metrics,
    select_keypoints,
    solve_weighted,
    surrogate_cost,
    tls_weights,
)
from bevloc.se3 import PoseSE3
from bevloc.synth import SENSOR_HEIGHT, ScanSpec, SceneSpec, generate_scene, render_scan

PAIRS = 100
OUTLIER_FRACTION = 0.4
INLIER_NOISE = 0.01
ORACLE_INSTANCES = 1000
OPTIMALITY_INSTANCES = 100
PERTURBATIONS = 1000
GNC_SEEDS = 100
GNC_BUDGET_SECONDS = 0.05
SCENE_SEEDS = 50


def scan(cloud: PointCloud, config: BevConfig | None = None) -> ScanFeatures:
    """Encode and extract a cloud with the reference backend."""
    config = config or BevConfig()
    bev = encode(cloud, config)
    return ScanFeatures(cloud, bev, ReferenceBackend(patch_size=config.patch_size).local_map(bev))


def exact_pairs(rng: np.random.Generator, pose: PoseSE3, count: int = PAIRS) -> CorrespondenceSet:
    """Query points and their exact images under ``pose``."""
    query = rng.uniform(-20.0, 20.0, size=(count, 3))
    return CorrespondenceSet(query, pose.apply(query))


def rotation_deg(a: PoseSE3, b: PoseSE3) -> float:
    """Rotation angle between two poses in degrees."""
    return pose_metrics(a, b).rotation_error


def horn_alignment(query: np.ndarray, database: np.ndarray) -> PoseSE3:
    """Unweighted least-squares rigid alignment from the unit-quaternion eigenproblem."""
    q_mean, d_mean = query.mean(axis=0), database.mean(axis=0)
    s = (query - q_mean).T @ (database - d_mean)
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = s
    n = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    _, vectors = np.linalg.eigh(n)
    w, x, y, z = vectors[:, -1]
    rotation = np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (y * x + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (z * x - w * y), 2 * (z * y + w * x), w * w - x * x - y * y + z * z],
        ]
    )
    return PoseSE3(rotation, d_mean - rotation @ q_mean)


class TestSolveWeighted:
    """Test cases for the closed-form weighted alignment."""

    def test_aligned_pairs(self, rng: np.random.Generator) -> None:
        """Identical point sets give the identity."""
        pairs = exact_pairs(rng, PoseSE3.identity())
        assert solve_weighted(pairs).is_close(PoseSE3.identity(), atol=1e-9)

    def test_known_transform(self, rng: np.random.Generator) -> None:
        """A 90 degree yaw plus (1, 2, 0) is recovered exactly."""
        truth = PoseSE3.from_yaw(90.0, (1.0, 2.0, 0.0))
        pairs = exact_pairs(rng, truth)
        estimate = solve_weighted(pairs)
        residual = np.linalg.norm(estimate.apply(pairs.query) - pairs.database, axis=1)
        assert residual.max() < 1e-9

    def test_uniform_weights_match_unweighted(self, rng: np.random.Generator) -> None:
        """Uniform weights reproduce the quaternion closed-form alignment."""
        for _ in range(ORACLE_INSTANCES):
            count = int(rng.integers(4, 40))
            pairs = exact_pairs(rng, PoseSE3.exp(rng.normal(size=6)), count=count)
            noisy = CorrespondenceSet(pairs.query, pairs.database + rng.normal(scale=0.1, size=(count, 3)))
            estimate = solve_weighted(noisy, np.full(count, rng.uniform(0.1, 10.0)))
            assert estimate.is_close(horn_alignment(noisy.query, noisy.database), atol=1e-12)

    @pytest.mark.integration
    def test_global_minimum(self, rng: np.random.Generator) -> None:
        """No perturbation of magnitude at most 0.1 lowers the weighted cost."""
        for _ in range(OPTIMALITY_INSTANCES):
            count = int(rng.integers(4, 12))
            pairs = exact_pairs(rng, PoseSE3.exp(rng.normal(size=6)), count=count)
            noisy = CorrespondenceSet(pairs.query, pairs.database + rng.normal(scale=0.3, size=(count, 3)))
            weights = rng.uniform(0.1, 1.0, size=count)
            best = solve_weighted(noisy, weights)

            def cost(pose: PoseSE3) -> float:
                return float(weights @ np.sum((pose.apply(noisy.query) - noisy.database) ** 2, axis=1))

            base = cost(best)
            steps = rng.normal(size=(PERTURBATIONS, 6))
            steps *= rng.uniform(0.0, 0.1, size=(PERTURBATIONS, 1)) / np.linalg.norm(steps, axis=1, keepdims=True)
            for step in steps:
                assert cost(best.retract(step)) >= base - 1e-9

    def test_equivariance(self, rng: np.random.Generator) -> None:
        """Moving both point sets by G maps the estimate to G dT G^-1."""
        pairs = exact_pairs(rng, PoseSE3.exp(rng.normal(size=6)), count=30)
        noisy = CorrespondenceSet(pairs.query, pairs.database + rng.normal(scale=0.05, size=(30, 3)))
        g = PoseSE3.exp(rng.normal(size=6))
        moved = CorrespondenceSet(g.apply(noisy.query), g.apply(noisy.database))
        expected = g @ solve_weighted(noisy) @ g.inverse()
        assert solve_weighted(moved).is_close(expected, atol=1e-9)

    def test_collinear_is_degenerate(self) -> None:
        """Points on one line do not determine a rotation."""
        line = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])
        with pytest.raises(DegenerateConfigurationError):
            solve_weighted(CorrespondenceSet(line, line))

    def test_zero_weights(self, rng: np.random.Generator) -> None:
        """All-zero weights are degenerate."""
        with pytest.raises(DegenerateConfigurationError):
            solve_weighted(exact_pairs(rng, PoseSE3.identity(), count=5), np.zeros(5))


class TestGnc:
    """Test cases for robust registration."""

    def test_tls_weights(self) -> None:
        """Small residuals weigh 1, large ones 0, the rest in between."""
        weights = tls_weights([0.1, 0.5, 5.0], mu=1.0, truncation=0.5)
        assert weights[0] == 1.0
        assert 0.0 < weights[1] < 1.0
        assert weights[2] == 0.0

    def test_noiseless_fixed_point(self, rng: np.random.Generator) -> None:
        """Outlier-free pairs return the exact pose with unit weights."""
        truth = PoseSE3.from_yaw(40.0, (3.0, -1.0, 0.5))
        result = gnc_register(exact_pairs(rng, truth))
        assert result.pose.is_close(truth, atol=1e-9)
        assert np.all(result.weights == 1.0)
        assert result.converged

    def test_outliers_rejected(self) -> None:
        """40% outliers are rejected and the pose recovered on at least 95 of 100 seeds."""
        passed = 0
        for seed in range(GNC_SEEDS):
            rng = np.random.default_rng(seed)
            truth = PoseSE3.from_yaw(rng.uniform(-180, 180), rng.uniform(-5, 5, size=3))
            query = rng.uniform(-20.0, 20.0, size=(PAIRS, 3))
            database = truth.apply(query) + rng.normal(scale=INLIER_NOISE, size=(PAIRS, 3))
            outliers = rng.choice(PAIRS, size=int(OUTLIER_FRACTION * PAIRS), replace=False)
            database[outliers] = rng.uniform(-25.0, 25.0, size=(outliers.size, 3))
            started = time.perf_counter()
            try:
                result = gnc_register(CorrespondenceSet(query, database), GncConfig(truncation=0.5))
            except NoConsensusError:
                continue
            elapsed = time.perf_counter() - started

            for step in result.surrogate_steps:
                assert step.after_weights <= step.before_weights + 1e-9
                assert step.after_pose <= step.after_weights + 1e-9
            passed += (
                np.linalg.norm(result.pose.translation - truth.translation) < 0.05
                and rotation_deg(result.pose, truth) < 0.5
                and bool(np.all(result.weights[outliers] < 0.5))
                and elapsed < GNC_BUDGET_SECONDS
            )
        assert passed >= 95

    def test_all_outliers(self, rng: np.random.Generator) -> None:
        """Pure noise yields no consensus or no convergence."""
        pairs = CorrespondenceSet(
            rng.uniform(-20.0, 20.0, size=(PAIRS, 3)), rng.uniform(-20.0, 20.0, size=(PAIRS, 3))
        )
        try:
            result = gnc_register(pairs)
        except NoConsensusError as err:
            assert err.inliers < GncConfig().min_inliers
        else:
            assert not result.converged

    def test_too_few_pairs(self) -> None:
        """Two pairs cannot be registered."""
        with pytest.raises(InsufficientMatchesError):
            gnc_register(CorrespondenceSet(np.eye(3)[:2], np.eye(3)[:2]))

    def test_surrogate_cost(self) -> None:
        """w = 1 leaves plain squared residuals, w = 0 the full penalty."""
        assert surrogate_cost([2.0], [1.0], mu=1.0, truncation=0.5) == pytest.approx(4.0)
        assert surrogate_cost([2.0], [0.0], mu=1.0, truncation=0.5) == pytest.approx(0.25)

    def test_config_validation(self) -> None:
        """Growth must exceed one."""
        with pytest.raises(ConfigurationError):
            GncConfig(growth=1.0)
        with pytest.raises(ConfigurationError):
            MatchConfig(ratio=0.0)
        with pytest.raises(ConfigurationError):
            MatchConfig(top_k=0)
        with pytest.raises(ConfigurationError):
            MatchConfig(consistency=-1.0)


class TestMatching:
    """Test cases for feature matching."""

    def test_planted_matches(self) -> None:
        """Each query feature finds its planted database twin."""
        query = np.eye(6)[:4]
        database = np.vstack([np.eye(6)[[5, 4]], query[[2, 0, 3, 1]]])
        pixels = np.array([[0, 0], [20, 0], [40, 0], [60, 0], [80, 0], [100, 0]])
        qi, di, dist = match_descriptors(query, database, pixels)
        assert qi.tolist() == [0, 1, 2, 3]
        assert di.tolist() == [3, 5, 2, 4]
        np.testing.assert_array_equal(dist, 0.0)

    def test_ratio_ignores_neighbouring_pixels(self) -> None:
        """A near-duplicate within the exclusion window does not fail the ratio test."""
        query = np.array([[1.0, -0.01]])
        database = np.array([[1.0, 0.0], [1.0, 0.0005], [0.0, 1.0]])
        pixels = np.array([[10, 10], [11, 10], [40, 40]])
        qi, _, _ = match_descriptors(query, database, pixels, mutual=False, exclusion=8)
        assert qi.tolist() == [0]
        qi, _, _ = match_descriptors(query, database, pixels, mutual=False, exclusion=0)
        assert qi.tolist() == []

    def test_ambiguous_keypoint_keeps_top_k(self) -> None:
        """A keypoint failing the ratio check keeps its separated candidates when top_k > 1."""
        query = np.array([[1.0, -0.01]])
        database = np.array([[1.0, 0.0], [1.0, 0.0005], [0.0, 1.0]])
        pixels = np.array([[10, 10], [40, 40], [70, 70]])
        qi, di, _ = match_descriptors(query, database, pixels, mutual=False, top_k=2)
        assert qi.tolist() == [0, 0]
        assert di.tolist() == [0, 1]
        qi, _, _ = match_descriptors(query, database, pixels, mutual=False, top_k=1)
        assert qi.tolist() == []

    def test_keypoints_are_suppressed(self, structured_cloud: PointCloud) -> None:
        """Keypoints are occupied, strongest first and farther apart than the suppression radius."""
        bev = encode(structured_cloud)
        keypoints = select_keypoints(bev, Channel.INTENSITY, 50, suppression=2)
        assert len(keypoints) == 50
        assert np.all(bev.occupancy[keypoints[:, 1], keypoints[:, 0]])
        gaps = np.abs(keypoints[:, None, :] - keypoints[None, :, :]).max(axis=2)
        np.fill_diagonal(gaps, 99)
        assert gaps.min() > 2
        response = gaussian_filter(bev.intensity, sigma=1.0)
        occupied = bev.occupied_pixels()
        u, v = keypoints[0]
        assert response[v, u] == response[occupied[:, 1], occupied[:, 0]].max()

    def test_self_matching(self, structured_cloud: PointCloud) -> None:
        """A scan matched with itself pairs identical points."""
        features = scan(structured_cloud)
        pairs = match_features(features, features)
        assert len(pairs) >= 3
        np.testing.assert_allclose(pairs.query, pairs.database)
        np.testing.assert_allclose(pairs.distances, 0.0, atol=1e-12)
        assert pairs.count("spatial") + pairs.count("intensity") == len(pairs)

    def test_two_pixels_are_insufficient(self) -> None:
        """A query with two occupied pixels cannot be matched."""
        small = BevConfig(resolution=0.5, width=32, height=32, patch_size=8)
        query = scan(PointCloud(np.array([[1.0, 1.0, 0.0, 1.0], [-5.0, 3.0, 0.0, 2.0]])), small)
        with pytest.raises(InsufficientMatchesError) as exc_info:
            match_features(query, query)
        assert exc_info.value.count <= 2


class TestConsistency:
    """Test cases for pairwise-consistency pruning."""

    def test_keeps_rigid_pairs(self, rng: np.random.Generator) -> None:
        """Pairs related by one rigid motion survive; random ones are peeled off."""
        truth = PoseSE3.from_yaw(75.0, (4.0, -2.0, 0.0))
        pairs = exact_pairs(rng, truth, count=60)
        database = pairs.database.copy()
        database[40:] = rng.uniform(-20.0, 20.0, size=(20, 3))
        kept = consistent_subset(CorrespondenceSet(pairs.query, database), tolerance=0.5)
        assert set(range(40)) <= set(kept.tolist())
        assert kept.size <= 42

    def test_kept_pairs_are_consistent(self, rng: np.random.Generator) -> None:
        """Every two kept pairs preserve their length within the tolerance."""
        pairs = CorrespondenceSet(rng.uniform(-20, 20, size=(80, 3)), rng.uniform(-20, 20, size=(80, 3)))
        kept = pairs.subset(consistent_subset(pairs, tolerance=1.0))
        q_len = np.linalg.norm(kept.query[:, None] - kept.query[None], axis=2)
        d_len = np.linalg.norm(kept.database[:, None] - kept.database[None], axis=2)
        assert np.all(np.abs(q_len - d_len) <= 1.0)

    def test_zero_tolerance_keeps_all(self, rng: np.random.Generator) -> None:
        """A zero tolerance disables pruning."""
        pairs = CorrespondenceSet(rng.uniform(-20, 20, size=(10, 3)), rng.uniform(-20, 20, size=(10, 3)))
        assert consistent_subset(pairs, tolerance=0.0).tolist() == list(range(10))

    def test_subset_keeps_order_and_channels(self) -> None:
        """subset picks pairs, channels and distances at the given indices."""
        points = np.arange(12.0).reshape(4, 3)
        channels = ("spatial", "intensity", "spatial", "intensity")
        pairs = CorrespondenceSet(points, points + 1.0, channels=channels, distances=[0.1, 0.2, 0.3, 0.4])
        picked = pairs.subset([3, 0])
        np.testing.assert_array_equal(picked.query, points[[3, 0]])
        assert picked.channels == (Channel.INTENSITY, Channel.SPATIAL)
        np.testing.assert_array_equal(picked.distances, [0.4, 0.1])


class TestLocalize:
    """Test cases for the full registration pipeline."""

    def test_self_localization(self, structured_cloud: PointCloud) -> None:
        """A cloud against itself gives the identity."""
        features = scan(structured_cloud)
        result = localize(features, features)
        assert result.pose.is_close(PoseSE3.identity(), atol=1e-6)
        assert set(result.matches) == {"spatial", "intensity"}
        assert set(result.timings) == {"matching", "registration"}

    def test_weights_cover_every_match(self, structured_cloud: PointCloud) -> None:
        """One weight per matched pair; pairs pruned before GNC weigh zero."""
        features = scan(structured_cloud)
        result = localize(features, features)
        assert result.weights.size == result.matches["spatial"] + result.matches["intensity"]
        assert np.all((result.weights >= 0.0) & (result.weights <= 1.0))

    @pytest.mark.integration
    def test_rigid_copies_of_synthetic_scans(self) -> None:
        """Yawed and shifted copies of panoramic scans register within 0.2 m and 2 degrees."""
        passed = 0
        for seed in range(SCENE_SEEDS):
            rng = np.random.default_rng(seed)
            scene = generate_scene(SceneSpec(seed=seed, waypoints=((0.0, 0.0),)))
            cloud = render_scan(scene, PoseSE3.from_yaw(0.0, (0.0, 0.0, SENSOR_HEIGHT)), ScanSpec(seed=seed))
            radius, angle = rng.uniform(0.0, 10.0), rng.uniform(0.0, 2.0 * np.pi)
            shift = (radius * np.cos(angle), radius * np.sin(angle), 0.0)
            move = PoseSE3.from_yaw(rng.uniform(-180.0, 180.0), shift)
            moved = PointCloud(np.column_stack([move.apply(cloud.xyz), cloud.intensity]))
            try:
                result = localize(scan(moved), scan(cloud))
            except RegistrationError:
                continue
            metrics = pose_metrics(result.pose, move.inverse())
            passed += metrics.translation_error < 0.2 and metrics.rotation_error < 2.0
        assert passed >= 45

    def test_unrelated_scenes(self, structured_cloud: PointCloud) -> None:
        """Scans of different places never yield a confident pose."""
        rng = np.random.default_rng(99)
        other = PointCloud(
            np.column_stack(
                [rng.uniform(-30, 30, size=(3000, 2)), rng.uniform(-1, 4, size=3000), rng.uniform(0, 80, size=3000)]
            )
        )
        try:
            result = localize(scan(other), scan(structured_cloud))
        except RegistrationError:
            return
        assert not result.converged or result.inlier_ratio <= 0.5


class TestMetrics:
    """Test cases for pose metrics and result records."""

    def test_exact(self) -> None:
        """Equal poses succeed with zero errors."""
        assert pose_metrics(PoseSE3.identity(), PoseSE3.identity()) == (0.0, 0.0, True)

    def test_translation_failure(self) -> None:
        """A 3 m offset fails."""
        metrics = pose_metrics(PoseSE3.from_yaw(0.0, (3.0, 0.0, 0.0)), PoseSE3.identity())
        assert metrics.translation_error == pytest.approx(3.0)
        assert not metrics.success

    def test_rotation_within_threshold(self) -> None:
        """A 4 degree yaw error still succeeds."""
        metrics = pose_metrics(PoseSE3.from_yaw(4.0), PoseSE3.identity())
        assert metrics.rotation_error == pytest.approx(4.0)
        assert metrics.success

    def test_result_record(self, rng: np.random.Generator) -> None:
        """The text record carries the pose and counters."""
        truth = PoseSE3.from_yaw(12.0, (1.0, 0.0, 0.0))
        result = gnc_register(exact_pairs(rng, truth, count=12))
        pose, fields = parse_result(format_result(result))
        assert pose.is_close(result.pose, atol=0.0)
        assert fields == {"inliers": "12", "pairs": "12", "iterations": "0", "converged": "true"}
