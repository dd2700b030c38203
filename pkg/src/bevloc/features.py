"""Global descriptors, patch-token feature maps and loss evaluators.

Any feature backend produces, for one BEV pair, a unit-norm global
descriptor (``D = 384`` by default) and a :class:`LocalFeatureMap`: one grid
of unit-norm patch tokens per BEV channel, ``(H / C) x (W / C)`` patches of
``C x C`` pixels. Pixel-level features are bilinear interpolations between
patch centers.

Two backends ship: :class:`ReferenceBackend`, a deterministic hand-built
extractor, and :class:`EmbeddingBackend`, which serves features imported
from an archive written by an external model.

Embedding archive (little-endian)::

    magic  b"BVEM"
    uint32 version (1), D, C, grid_h, grid_w, count
    count x record:
        uint16 id length, utf-8 cloud id
        float64[D]                      global descriptor
        float64[grid_h * grid_w * D]    spatial tokens, row-major
        float64[grid_h * grid_w * D]    intensity tokens, row-major

A zero-length file is an empty archive.
"""

import logging
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from .bev import BevPair, Channel, lift_keypoints
from .cloud_io import PointCloud
from .exceptions import (
    ConfigurationError,
    EmbeddingFormatError,
    FeatureError,
    LossArgumentError,
)
from .se3 import PoseSE3

logger: logging.Logger = logging.getLogger(name=__name__)

DESCRIPTOR_DIMENSION = 384
UNIT_TOLERANCE = 1e-6
LOAD_TOLERANCE = 1e-3
EXACT_TOLERANCE = 1e-12

_MAGIC = b"BVEM"
_VERSION = 1
_HEADER = struct.Struct("<4s6I")
_ID_LENGTH = struct.Struct("<H")
_FLOAT = np.dtype("<f8")

GlobalDescriptor = NDArray[np.float64]


class ChannelSet(StrEnum):
    """BEV channels feeding the global descriptor."""

    BOTH = "both"
    SPATIAL = "spatial"
    INTENSITY = "intensity"


def normalize(vectors: ArrayLike, axis: int = -1) -> NDArray[np.float64]:
    """L2-normalize along ``axis``.

    Raises:
        FeatureError: A vector is zero or non-finite
    """
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=axis, keepdims=True)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0.0):
        raise FeatureError("cannot normalize a zero or non-finite vector")
    return v / norms


@dataclass(frozen=True, eq=False)
class LocalFeatureMap:
    """Unit-norm patch tokens for both BEV channels."""

    spatial: NDArray[np.float64]
    intensity: NDArray[np.float64]
    patch_size: int

    def __post_init__(self) -> None:
        """Check grid consistency, finiteness and unit norms; freeze arrays."""
        for name in ("spatial", "intensity"):
            tokens = np.array(getattr(self, name), dtype=np.float64)
            if tokens.ndim != 3:
                raise ValueError(f"{name} tokens must have shape (grid_h, grid_w, D)")
            if not np.all(np.isfinite(tokens)):
                raise FeatureError(f"{name} tokens contain non-finite values")
            norms = np.linalg.norm(tokens, axis=-1)
            if tokens.size and np.max(np.abs(norms - 1.0)) > UNIT_TOLERANCE:
                raise FeatureError(f"{name} tokens are not unit-norm")
            tokens.setflags(write=False)
            object.__setattr__(self, name, tokens)
        if self.spatial.shape != self.intensity.shape:
            raise ValueError(
                f"channel grids differ: {self.spatial.shape} vs {self.intensity.shape}"
            )

    @property
    def grid_shape(self) -> tuple[int, int]:
        """``(grid_h, grid_w)``."""
        return int(self.spatial.shape[0]), int(self.spatial.shape[1])

    @property
    def dimension(self) -> int:
        """Token length ``D``."""
        return int(self.spatial.shape[2])

    @property
    def image_shape(self) -> tuple[int, int]:
        """Shape ``(H, W)`` of the source images."""
        gh, gw = self.grid_shape
        return gh * self.patch_size, gw * self.patch_size

    def tokens(self, channel: Channel | str) -> NDArray[np.float64]:
        """Token grid of ``channel``."""
        return self.spatial if Channel(channel) is Channel.SPATIAL else self.intensity


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Everything a backend extracts from one BEV pair."""

    global_descriptor: GlobalDescriptor
    local_map: LocalFeatureMap

    def __post_init__(self) -> None:
        """Validate and freeze the global descriptor."""
        values = np.array(self.global_descriptor, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise FeatureError("global descriptor contains non-finite values")
        if abs(float(np.linalg.norm(values)) - 1.0) > UNIT_TOLERANCE:
            raise FeatureError("global descriptor is not unit-norm")
        values.setflags(write=False)
        object.__setattr__(self, "global_descriptor", values)


@runtime_checkable
class FeatureBackend(Protocol):
    """Anything that turns a BEV pair into a :class:`FeatureSet`."""

    patch_size: int

    def extract(self, bev: BevPair, cloud_id: str | None = None) -> FeatureSet:
        """Extract features of ``bev`` (``cloud_id`` names it for lookup backends)."""
        ...


def _soft_bins(
    position: NDArray[np.float64], count: int, circular: bool = False
) -> tuple[NDArray[np.int64], NDArray[np.int64], NDArray[np.float64]]:
    """Split each position between its two nearest bins; bin ``k`` is centered on ``k + 0.5``."""
    s = position - 0.5
    if circular:
        lo = np.floor(s)
        frac = s - lo
        lo_bins = lo.astype(np.int64) % count
        return lo_bins, (lo_bins + 1) % count, frac
    s = np.clip(s, 0.0, count - 1)
    lo_bins = np.minimum(np.floor(s).astype(np.int64), max(count - 2, 0))
    return lo_bins, np.minimum(lo_bins + 1, count - 1), s - lo_bins


def polar_context(
    centers: ArrayLike,
    pixels: ArrayLike,
    weights: ArrayLike,
    ring_width: float,
    rings: int,
    sectors: int,
) -> NDArray[np.float64]:
    """Weighted ring/sector histograms of ``pixels`` around each center.

    Every pixel closer than ``rings * ring_width`` to a center spreads each of
    its weight columns over the two nearest rings and the two nearest
    (circular) sectors, so the histograms change smoothly with the center.

    Args:
        centers: (M, 2) ``(u, v)`` centers
        pixels: (N, 2) ``(u, v)`` pixels
        weights: (N, K) weight columns
        ring_width: Ring width in pixels
        rings: Number of rings
        sectors: Number of sectors

    Returns:
        (M, K, rings, sectors) histograms.
    """
    ctr = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    m, k = ctr.shape[0], w.shape[1]
    du = pix[None, :, 0] - ctr[:, None, 0]
    dv = pix[None, :, 1] - ctr[:, None, 1]
    radius = np.hypot(du, dv) / ring_width
    c, p = np.nonzero(radius < rings)
    r_lo, r_hi, r_frac = _soft_bins(radius[c, p], rings)
    angle = np.arctan2(dv[c, p], du[c, p]) * (sectors / (2.0 * np.pi))
    s_lo, s_hi, s_frac = _soft_bins(angle, sectors, circular=True)
    index = np.concatenate(
        [(c * rings + ring) * sectors + sector for ring in (r_lo, r_hi) for sector in (s_lo, s_hi)]
    )
    share = np.concatenate(
        [a * b for a in (1.0 - r_frac, r_frac) for b in (1.0 - s_frac, s_frac)]
    )
    source = np.tile(p, 4)
    cells = m * rings * sectors
    hist = np.stack(
        [np.bincount(index, weights=share * w[source, j], minlength=cells) for j in range(k)]
    )
    return hist.reshape(k, m, rings, sectors).transpose(1, 0, 2, 3)


def sector_spectrum(context: ArrayLike, harmonics: int) -> NDArray[np.float64]:
    """``log(1 + |FFT|)`` of the first ``harmonics`` sector frequencies of each ring.

    Magnitudes do not change when the sectors shift circularly, i.e. when the
    image rotates about the center.
    """
    spectrum = np.abs(np.fft.rfft(np.asarray(context, dtype=np.float64), axis=-1))
    return np.log1p(spectrum[..., :harmonics])


class ReferenceBackend:
    """Deterministic hand-built extractor standing in for a trained network.

    A patch token describes the image around its patch center: ring/sector
    histograms of the channel values and of occupancy, reduced to the
    magnitudes of their low sector frequencies. Those do not change when the
    image rotates about the center, so tokens are approximately yaw
    invariant, and soft binning keeps them smooth between patch centers. The
    global descriptor applies the same reduction to a larger polar grid
    around the sensor. Both are mapped to ``dimension`` by fixed seeded
    Gaussian projections and L2-normalized.
    """

    LOCAL_RINGS = 8
    LOCAL_SECTORS = 16
    LOCAL_HARMONICS = 5
    GLOBAL_RINGS = 20
    GLOBAL_SECTORS = 32
    GLOBAL_HARMONICS = 9

    def __init__(
        self,
        dimension: int = DESCRIPTOR_DIMENSION,
        patch_size: int = 8,
        seed: int = 7,
        channels: ChannelSet | str = ChannelSet.BOTH,
    ) -> None:
        """Initialize the ReferenceBackend.

        Args:
            dimension: Output length D
            patch_size: Patch edge C in pixels
            seed: Seed of the projection matrices
            channels: BEV channels feeding the global descriptor
        """
        if dimension <= 0 or patch_size <= 0:
            raise ConfigurationError("dimension and patch_size must be positive")
        self.dimension = dimension
        self.patch_size = patch_size
        self.seed = seed
        self.channels = ChannelSet(channels)
        self._ring_width = 0.75 * patch_size

        # value column, occupancy column, bias
        rng = np.random.default_rng(seed)
        local_inputs = 2 * self.LOCAL_RINGS * self.LOCAL_HARMONICS + 1
        self._local_projection = rng.standard_normal((local_inputs, dimension))
        global_columns = 3 if self.channels is ChannelSet.BOTH else 2
        global_inputs = global_columns * self.GLOBAL_RINGS * self.GLOBAL_HARMONICS + 1
        self._global_projection = rng.standard_normal((global_inputs, dimension))

    @staticmethod
    def _columns(
        bev: BevPair, channels: Sequence[Channel]
    ) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        pixels = bev.occupied_pixels()
        u, v = pixels[:, 0], pixels[:, 1]
        values = [bev.image(channel)[v, u] for channel in channels]
        return pixels, np.column_stack([*values, np.ones(pixels.shape[0])])

    def global_descriptor(self, bev: BevPair) -> GlobalDescriptor:
        """Unit-norm global descriptor of ``bev``."""
        channels = {
            ChannelSet.BOTH: [Channel.SPATIAL, Channel.INTENSITY],
            ChannelSet.SPATIAL: [Channel.SPATIAL],
            ChannelSet.INTENSITY: [Channel.INTENSITY],
        }[self.channels]
        pixels, weights = self._columns(bev, channels)
        h, w = bev.spatial.shape
        # sensor sits on the corner shared by pixels (W/2 - 1, H/2 - 1) and (W/2, H/2)
        center = [[w / 2 - 0.5, h / 2 - 0.5]]
        ring_width = min(h, w) / (2 * self.GLOBAL_RINGS)
        context = polar_context(
            center, pixels, weights, ring_width, self.GLOBAL_RINGS, self.GLOBAL_SECTORS
        )[0]
        raw = np.append(sector_spectrum(context, self.GLOBAL_HARMONICS).reshape(-1), 1.0)
        return normalize(raw @ self._global_projection)

    def local_map(self, bev: BevPair) -> LocalFeatureMap:
        """Patch tokens of both channels."""
        c = self.patch_size
        gh, gw = bev.spatial.shape[0] // c, bev.spatial.shape[1] // c
        pixels, weights = self._columns(bev, [Channel.SPATIAL, Channel.INTENSITY])
        centers_u = np.arange(gw) * c + (c - 1) / 2.0
        rows = []
        # one patch row per pass bounds the center x pixel arrays
        for b in range(gh):
            centers = np.column_stack([centers_u, np.full(gw, b * c + (c - 1) / 2.0)])
            context = polar_context(
                centers, pixels, weights, self._ring_width, self.LOCAL_RINGS, self.LOCAL_SECTORS
            )
            rows.append(sector_spectrum(context, self.LOCAL_HARMONICS).reshape(gw, 3, -1))
        spectra = np.stack(rows)
        bias = np.ones((gh, gw, 1))
        tokens = []
        for j in (0, 1):
            raw = np.concatenate([spectra[:, :, j], spectra[:, :, 2], bias], axis=-1)
            tokens.append(normalize(raw @ self._local_projection))
        return LocalFeatureMap(spatial=tokens[0], intensity=tokens[1], patch_size=c)

    def extract(self, bev: BevPair, cloud_id: str | None = None) -> FeatureSet:
        """Extract global and local features; ``cloud_id`` is ignored."""
        return FeatureSet(self.global_descriptor(bev), self.local_map(bev))


class EmbeddingBackend:
    """Serves features imported from an embedding archive by cloud id."""

    def __init__(self, archive: Mapping[str, FeatureSet], patch_size: int | None = None) -> None:
        """Initialize the EmbeddingBackend.

        Args:
            archive: Features by cloud id
            patch_size: Expected patch size; taken from the archive if omitted
        """
        self.archive = dict(archive)
        sizes = {fs.local_map.patch_size for fs in self.archive.values()}
        if patch_size is None:
            patch_size = sizes.pop() if len(sizes) == 1 else 8
        self.patch_size = patch_size

    @classmethod
    def from_file(cls, path: Path | str) -> "EmbeddingBackend":
        """Load an archive written by :func:`export_embeddings`."""
        return cls(import_embeddings(path))

    def extract(self, bev: BevPair, cloud_id: str | None = None) -> FeatureSet:
        """Look up the features of ``cloud_id``.

        Raises:
            FeatureError: Unknown cloud id
        """
        if cloud_id is None or cloud_id not in self.archive:
            raise FeatureError(f"no imported embedding for cloud {cloud_id!r}")
        return self.archive[cloud_id]


def extract(bev: BevPair, backend: FeatureBackend, cloud_id: str | None = None) -> FeatureSet:
    """Run ``backend`` on ``bev`` after checking that the geometry agrees.

    Raises:
        ConfigurationError: Patch size or token grid does not fit the BEV pair
    """
    config = bev.config
    if config.patch_size != backend.patch_size:
        raise ConfigurationError(
            f"bev patch size {config.patch_size} != backend patch size {backend.patch_size}"
        )
    if config.width % backend.patch_size or config.height % backend.patch_size:
        raise ConfigurationError("bev grid is not divisible by the patch size")
    features = backend.extract(bev, cloud_id)
    if features.local_map.grid_shape != config.grid_shape:
        raise ConfigurationError(
            f"token grid {features.local_map.grid_shape} does not match bev grid {config.grid_shape}"
        )
    return features


def _bilinear(
    coords: NDArray[np.float64], patch_size: int, cells: int
) -> tuple[NDArray[np.int64], NDArray[np.int64], NDArray[np.float64]]:
    g = np.clip((coords - (patch_size - 1) / 2.0) / patch_size, 0.0, cells - 1)
    lo = np.minimum(np.floor(g).astype(np.int64), max(cells - 2, 0))
    hi = np.minimum(lo + 1, cells - 1)
    return lo, hi, g - lo


def interpolate_many(
    feature_map: LocalFeatureMap, pixels: ArrayLike, channel: Channel | str = Channel.SPATIAL
) -> NDArray[np.float64]:
    """Bilinearly interpolate tokens at real-valued ``(u, v)`` pixels.

    Patch ``(a, b)`` (column, row) is centered on pixel
    ``(a * C + (C - 1) / 2, b * C + (C - 1) / 2)``; pixels beyond the outer
    centers are clamped to the edge. Results are L2-normalized.

    Raises:
        FeatureError: A pixel lies outside ``[0, W-1] x [0, H-1]``
    """
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    height, width = feature_map.image_shape
    outside = (uv[:, 0] < 0) | (uv[:, 0] > width - 1) | (uv[:, 1] < 0) | (uv[:, 1] > height - 1)
    if np.any(~np.isfinite(uv)) or np.any(outside):
        bad = uv[np.flatnonzero(outside | ~np.all(np.isfinite(uv), axis=1))[0]]
        raise FeatureError(f"pixel ({bad[0]}, {bad[1]}) is outside the {width}x{height} image")
    tokens = feature_map.tokens(channel)
    gh, gw = feature_map.grid_shape
    x0, x1, fx = _bilinear(uv[:, 0], feature_map.patch_size, gw)
    y0, y1, fy = _bilinear(uv[:, 1], feature_map.patch_size, gh)
    fx, fy = fx[:, None], fy[:, None]
    mixed = (
        (1 - fx) * (1 - fy) * tokens[y0, x0]
        + fx * (1 - fy) * tokens[y0, x1]
        + (1 - fx) * fy * tokens[y1, x0]
        + fx * fy * tokens[y1, x1]
    )
    return normalize(mixed)


def interpolate(
    feature_map: LocalFeatureMap,
    pixel: tuple[float, float],
    channel: Channel | str = Channel.SPATIAL,
) -> NDArray[np.float64]:
    """Interpolated, normalized feature at one pixel; see :func:`interpolate_many`."""
    return interpolate_many(feature_map, [pixel], channel)[0]


@dataclass(frozen=True)
class LossConfig:
    """Margin ``c`` of the triplet loss, local-loss balance ``alpha``, negatives per query."""

    margin: float = 0.3
    alpha: float = 0.125
    negatives: int = 18

    def __post_init__(self) -> None:
        """Validate the loss parameters."""
        if not self.margin > 0:
            raise ConfigurationError(f"loss.margin must be positive, got {self.margin}")
        if not self.alpha >= 0:
            raise ConfigurationError(f"loss.alpha must be non-negative, got {self.alpha}")
        if self.negatives < 1:
            raise ConfigurationError(f"loss.negatives must be at least 1, got {self.negatives}")


def lazy_triplet_loss(
    query: ArrayLike,
    positive: ArrayLike,
    negatives: ArrayLike,
    cfg: LossConfig | None = None,
) -> float:
    """Hardest-negative hinge: ``max_n max(c + |q - p| - |q - n|, 0)``.

    Raises:
        LossArgumentError: No negatives
    """
    cfg = cfg or LossConfig()
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    p = np.asarray(positive, dtype=np.float64).reshape(-1)
    n = np.asarray(negatives, dtype=np.float64)
    if n.size == 0:
        raise LossArgumentError("lazy triplet loss needs at least one negative")
    n = n.reshape(-1, q.size)
    pos_dist = float(np.linalg.norm(q - p))
    neg_dist = np.linalg.norm(n - q, axis=1)
    return float(max(np.max(cfg.margin + pos_dist - neg_dist), 0.0))


def _check_unit(name: str, vectors: NDArray[np.float64]) -> None:
    norms = np.linalg.norm(vectors, axis=1)
    if not np.all(np.isfinite(norms)) or np.any(np.abs(norms - 1.0) > LOAD_TOLERANCE):
        raise LossArgumentError(f"{name} must be unit-normalized (within {LOAD_TOLERANCE})")


def info_nce_loss(
    feats_a: ArrayLike,
    pos_index: ArrayLike,
    feats_b_all: ArrayLike,
    temperature: float = 1.0,
) -> float:
    """Mean over ``feats_a`` of ``-log softmax(f . f_k / T)`` at the positive ``k``.

    Args:
        feats_a: (N, D) unit vectors
        pos_index: For each row of ``feats_a``, the row of ``feats_b_all`` that is its positive
        feats_b_all: (M, D) unit candidate vectors
        temperature: Logit temperature (1 keeps plain cosine similarity)

    Raises:
        LossArgumentError: Empty input, non-unit vectors or an invalid correspondence map
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b_all, dtype=np.float64)
    pos = np.asarray(pos_index, dtype=np.int64).reshape(-1)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise LossArgumentError("InfoNCE needs non-empty (N, D) and (M, D) feature arrays")
    if a.shape[1] != b.shape[1]:
        raise LossArgumentError(f"feature lengths differ: {a.shape[1]} vs {b.shape[1]}")
    if pos.size != a.shape[0] or np.any(pos < 0) or np.any(pos >= b.shape[0]):
        raise LossArgumentError("correspondence map must give one valid positive per feature")
    if not temperature > 0:
        raise LossArgumentError("temperature must be positive")
    _check_unit("feats_a", a)
    _check_unit("feats_b_all", b)
    logits = (a @ b.T) / temperature
    per_feature = logsumexp(logits, axis=1) - logits[np.arange(a.shape[0]), pos]
    return float(np.mean(per_feature))


def combined_loss(lpr_loss: float, local_losses: Sequence[float], cfg: LossConfig | None = None) -> float:
    """``lpr + alpha * sum(local_losses)`` over the four directional local terms."""
    cfg = cfg or LossConfig()
    if len(local_losses) != 4:
        raise ValueError(f"expected 4 local loss terms, got {len(local_losses)}")
    return float(lpr_loss + cfg.alpha * float(sum(local_losses)))


def sample_keypoints(bev: BevPair, rng: np.random.Generator) -> NDArray[np.int64]:
    """One uniformly random occupied pixel from every occupied patch.

    Returns:
        (K, 2) ``(u, v)`` pixels ordered by patch (row-major).
    """
    pixels = bev.occupied_pixels()
    if pixels.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    c = bev.config.patch_size
    shuffled = pixels[rng.permutation(pixels.shape[0])]
    patch = (shuffled[:, 1] // c) * (bev.config.width // c) + shuffled[:, 0] // c
    _, first = np.unique(patch, return_index=True)
    return shuffled[first]


def correspond_keypoints(
    bev_a: BevPair,
    cloud_a: PointCloud,
    pose_a: PoseSE3,
    bev_b: BevPair,
    pose_b: PoseSE3,
    keypoints_a: ArrayLike,
    channel: Channel | str = Channel.SPATIAL,
) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Ground-truth pixel correspondences from image ``a`` into image ``b``.

    Keypoints of ``a`` are lifted to points, moved into sensor frame ``b``
    through the world poses and rasterized; only those landing on an
    occupied pixel of ``b`` are kept.

    Returns:
        Matching ``(u, v)`` arrays for ``a`` and ``b``.
    """
    kp = np.asarray(keypoints_a, dtype=np.int64).reshape(-1, 2)
    if kp.shape[0] == 0:
        empty = np.zeros((0, 2), dtype=np.int64)
        return empty, empty.copy()
    points = lift_keypoints(bev_a, cloud_a, kp, channel)
    in_b = (pose_b.inverse() @ pose_a).apply(points)
    pix_b = bev_b.config.pixel_of(in_b[:, :2])
    config = bev_b.config
    inside = (pix_b[:, 0] >= 0) & (pix_b[:, 0] < config.width) & (pix_b[:, 1] >= 0) & (pix_b[:, 1] < config.height)
    keep = np.zeros(kp.shape[0], dtype=bool)
    keep[inside] = bev_b.occupancy[pix_b[inside, 1], pix_b[inside, 0]]
    return kp[keep], pix_b[keep]


def local_feature_loss(
    map_a: LocalFeatureMap,
    map_b: LocalFeatureMap,
    pixels_a: ArrayLike,
    pixels_b: ArrayLike,
    channel: Channel | str = Channel.SPATIAL,
    temperature: float = 1.0,
) -> float:
    """InfoNCE between interpolated features of corresponding pixels.

    Row ``i`` of ``pixels_a`` corresponds to row ``i`` of ``pixels_b``; the
    other rows of ``pixels_b`` act as negatives.
    """
    feats_a = interpolate_many(map_a, pixels_a, channel)
    feats_b = interpolate_many(map_b, pixels_b, channel)
    if feats_a.shape[0] != feats_b.shape[0]:
        raise LossArgumentError("pixel lists must have equal length")
    return info_nce_loss(feats_a, np.arange(feats_a.shape[0]), feats_b, temperature)


def export_embeddings(path: Path | str, features: Mapping[str, FeatureSet]) -> Path:
    """Write features to an embedding archive (ids in sorted order).

    Raises:
        EmbeddingFormatError: Feature sets disagree on D, C or grid shape
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = sorted(features)
    if not ids:
        path.write_bytes(b"")
        return path
    first = features[ids[0]].local_map
    layout = (first.dimension, first.patch_size, *first.grid_shape)
    chunks = [_HEADER.pack(_MAGIC, _VERSION, *layout, len(ids))]
    for cloud_id in ids:
        fs = features[cloud_id]
        lm = fs.local_map
        if (lm.dimension, lm.patch_size, *lm.grid_shape) != layout or fs.global_descriptor.size != layout[0]:
            raise EmbeddingFormatError(f"{cloud_id}: layout differs from {layout}", cloud_id=cloud_id)
        encoded = cloud_id.encode("utf-8")
        chunks.append(_ID_LENGTH.pack(len(encoded)) + encoded)
        for block in (fs.global_descriptor, lm.spatial, lm.intensity):
            chunks.append(np.ascontiguousarray(block, dtype=_FLOAT).tobytes())
    path.write_bytes(b"".join(chunks))
    logger.info(msg=f"Exported {len(ids)} embeddings to {path}")
    return path


def _accept_unit(vectors: NDArray[np.float64], cloud_id: str, record: int, what: str) -> NDArray[np.float64]:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    deviation = np.abs(norms - 1.0)
    if not np.all(np.isfinite(vectors)) or np.any(deviation > LOAD_TOLERANCE):
        raise EmbeddingFormatError(
            f"{cloud_id}: {what} cannot be normalized (norm off unit by more than {LOAD_TOLERANCE})",
            cloud_id=cloud_id,
            record=record,
        )
    if np.all(deviation <= EXACT_TOLERANCE):
        return vectors
    return np.where(deviation <= EXACT_TOLERANCE, vectors, vectors / norms)


def import_embeddings(path: Path | str) -> dict[str, FeatureSet]:
    """Read an embedding archive.

    Vectors within 1e-12 of unit norm are kept as stored, those within 1e-3
    are renormalized, anything else is rejected. ``D != 384`` is accepted
    with a warning.

    Raises:
        EmbeddingFormatError: Bad header, truncated record, duplicate id or a
            vector that cannot be normalized
    """
    path = Path(path)
    data = path.read_bytes()
    if not data:
        return {}
    if len(data) < _HEADER.size:
        raise EmbeddingFormatError(f"{path}: truncated header")
    magic, version, dim, patch, gh, gw, count = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise EmbeddingFormatError(f"{path}: not an embedding archive")
    if version != _VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported archive version {version}")
    if dim == 0 or patch == 0:
        raise EmbeddingFormatError(f"{path}: zero dimension or patch size")
    if dim != DESCRIPTOR_DIMENSION:
        logger.warning(msg=f"{path}: descriptor dimension {dim} differs from {DESCRIPTOR_DIMENSION}")

    grid_len = gh * gw * dim
    body_len = (dim + 2 * grid_len) * _FLOAT.itemsize
    offset = _HEADER.size
    result: dict[str, FeatureSet] = {}
    for record in range(count):
        if offset + _ID_LENGTH.size > len(data):
            raise EmbeddingFormatError(f"{path}: record {record} is truncated", record=record)
        (id_len,) = _ID_LENGTH.unpack_from(data, offset)
        offset += _ID_LENGTH.size
        if offset + id_len + body_len > len(data):
            raise EmbeddingFormatError(f"{path}: record {record} is truncated", record=record)
        try:
            cloud_id = data[offset : offset + id_len].decode("utf-8")
        except UnicodeDecodeError as err:
            raise EmbeddingFormatError(f"{path}: record {record} has a bad id", record=record) from err
        offset += id_len
        values = np.frombuffer(data, dtype=_FLOAT, count=dim + 2 * grid_len, offset=offset)
        offset += body_len
        if cloud_id in result:
            raise EmbeddingFormatError(f"{path}: duplicate cloud id {cloud_id!r}", cloud_id=cloud_id, record=record)
        descriptor = _accept_unit(values[:dim].astype(np.float64), cloud_id, record, "global descriptor")
        spatial = _accept_unit(values[dim : dim + grid_len].reshape(gh, gw, dim).astype(np.float64), cloud_id, record, "spatial tokens")
        intensity = _accept_unit(values[dim + grid_len :].reshape(gh, gw, dim).astype(np.float64), cloud_id, record, "intensity tokens")
        result[cloud_id] = FeatureSet(descriptor, LocalFeatureMap(spatial, intensity, patch))
    if offset != len(data):
        raise EmbeddingFormatError(f"{path}: {len(data) - offset} trailing bytes after record {count - 1}")
    logger.info(msg=f"Imported {len(result)} embeddings from {path}")
    return result

