"""Bird's-eye-view encoding of point clouds.

A cloud becomes two sensor-centered ``H x W`` images: the spatial image holds
the min-max normalized point count of each cell, the intensity image the
cell's maximum intensity normalized by the whole cloud's intensity range.
Pixel ``(u, v)`` addresses column ``u`` and row ``v``; images are indexed
``image[v, u]``.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from types import MappingProxyType

import numpy as np
from matplotlib import image as mpimg
from numpy.typing import ArrayLike, NDArray

from .cloud_io import PointCloud
from .exceptions import (
    ConfigurationError,
    EmptyInputError,
    EmptyProjectionError,
    MissingBucketError,
)

logger: logging.Logger = logging.getLogger(name=__name__)

Pixel = tuple[int, int]


class Channel(StrEnum):
    """BEV image channel."""

    SPATIAL = "spatial"
    INTENSITY = "intensity"


@dataclass(frozen=True)
class BevConfig:
    """Grid geometry: ``resolution`` meters per pixel, ``width`` x ``height`` pixels."""

    resolution: float = 0.4
    width: int = 200
    height: int = 200
    patch_size: int = 8

    def __post_init__(self) -> None:
        """Validate the grid geometry."""
        if not self.resolution > 0:
            raise ConfigurationError(f"bev.resolution must be positive, got {self.resolution}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError(
                f"bev grid must be non-empty, got {self.width}x{self.height}"
            )
        if self.patch_size <= 0:
            raise ConfigurationError(f"bev.patch_size must be positive, got {self.patch_size}")
        if self.width % self.patch_size or self.height % self.patch_size:
            raise ConfigurationError(
                f"bev grid {self.width}x{self.height} is not divisible by "
                f"patch size {self.patch_size}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        """Image shape ``(height, width)``."""
        return self.height, self.width

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Patch grid shape ``(height / C, width / C)``."""
        return self.height // self.patch_size, self.width // self.patch_size

    def pixel_of(self, xy: ArrayLike) -> NDArray[np.int64]:
        """Map sensor-frame (x, y) coordinates to integer ``(u, v)`` pixels."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        u = np.floor(xy[:, 0] / self.resolution).astype(np.int64) + self.width // 2
        v = np.floor(xy[:, 1] / self.resolution).astype(np.int64) + self.height // 2
        return np.column_stack([u, v])

    def metric_of(self, pixels: ArrayLike) -> NDArray[np.float64]:
        """Sensor-frame (x, y) of the centers of (possibly fractional) pixels."""
        uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        x = (uv[:, 0] - self.width // 2 + 0.5) * self.resolution
        y = (uv[:, 1] - self.height // 2 + 0.5) * self.resolution
        return np.column_stack([x, y])


@dataclass(frozen=True, eq=False)
class BevPair:
    """Spatial and intensity images plus the pixel to point-index buckets."""

    spatial: NDArray[np.float64]
    intensity: NDArray[np.float64]
    buckets: Mapping[Pixel, NDArray[np.intp]]
    config: BevConfig
    cropped: int = 0
    occupancy: NDArray[np.bool_] = field(init=False)

    def __post_init__(self) -> None:
        """Freeze arrays and derive the occupancy mask from the buckets."""
        shape = self.config.shape
        for name in ("spatial", "intensity"):
            image = np.array(getattr(self, name), dtype=np.float64)
            if image.shape != shape:
                raise ValueError(f"{name} image must have shape {shape}, got {image.shape}")
            if image.size and (image.min() < 0.0 or image.max() > 1.0):
                raise ValueError(f"{name} image values must lie in [0, 1]")
            image.setflags(write=False)
            object.__setattr__(self, name, image)
        occupancy = np.zeros(shape, dtype=bool)
        for u, v in self.buckets:
            occupancy[v, u] = True
        occupancy.setflags(write=False)
        object.__setattr__(self, "occupancy", occupancy)
        if not isinstance(self.buckets, MappingProxyType):
            object.__setattr__(self, "buckets", MappingProxyType(dict(self.buckets)))

    @classmethod
    def blank(cls, config: BevConfig) -> "BevPair":
        """An all-zero pair with no occupied pixels."""
        zeros = np.zeros(config.shape)
        return cls(zeros, zeros.copy(), {}, config)

    def image(self, channel: Channel | str) -> NDArray[np.float64]:
        """Return the image of ``channel``."""
        return self.spatial if Channel(channel) is Channel.SPATIAL else self.intensity

    def occupied_pixels(self) -> NDArray[np.int64]:
        """(K, 2) array of occupied ``(u, v)`` pixels in row-major order."""
        v, u = np.nonzero(self.occupancy)
        return np.column_stack([u, v]).astype(np.int64)

    def bucket(self, pixel: Pixel) -> NDArray[np.intp]:
        """Point indices behind ``pixel``.

        Raises:
            MissingBucketError: The pixel is unoccupied
        """
        key = (int(pixel[0]), int(pixel[1]))
        try:
            return self.buckets[key]
        except KeyError:
            raise MissingBucketError(f"pixel {key} is not occupied", pixel=key) from None


def _normalize(values: NDArray[np.float64], low: float, high: float) -> NDArray[np.float64]:
    if high <= low:
        return np.ones_like(values)
    return np.clip((values - low) / (high - low), 0.0, 1.0)


def encode(cloud: PointCloud, config: BevConfig | None = None) -> BevPair:
    """Rasterize a cloud into its spatial/intensity BEV pair.

    Args:
        cloud: Points in the sensor frame
        config: Grid geometry (defaults to 0.4 m, 200 x 200)

    Returns:
        The image pair with buckets of surviving point indices.

    Raises:
        EmptyInputError: The cloud has no points
        EmptyProjectionError: Every point falls outside the grid
    """
    config = config or BevConfig()
    if len(cloud) == 0:
        raise EmptyInputError("cannot encode an empty cloud")
    uv = config.pixel_of(cloud.xyz[:, :2])
    inside = (
        (uv[:, 0] >= 0) & (uv[:, 0] < config.width) & (uv[:, 1] >= 0) & (uv[:, 1] < config.height)
    )
    cropped = int(np.count_nonzero(~inside))
    kept = np.flatnonzero(inside)
    if kept.size == 0:
        raise EmptyProjectionError(
            f"all {len(cloud)} points of {cloud.frame_id or 'cloud'} fall outside the grid",
            cropped=cropped,
        )
    if cropped:
        logger.debug(msg=f"Cropped {cropped} of {len(cloud)} points outside the BEV grid")

    flat = uv[kept, 1] * config.width + uv[kept, 0]
    n_cells = config.width * config.height
    counts = np.bincount(flat, minlength=n_cells).astype(np.float64)
    cell_max = np.full(n_cells, -np.inf)
    np.maximum.at(cell_max, flat, cloud.intensity[kept])
    occupied = counts > 0

    spatial = np.zeros(n_cells)
    spatial[occupied] = _normalize(
        counts[occupied], float(counts[occupied].min()), float(counts[occupied].max())
    )
    intensity = np.zeros(n_cells)
    intensity[occupied] = _normalize(
        cell_max[occupied], float(cloud.intensity.min()), float(cloud.intensity.max())
    )

    order = np.argsort(flat, kind="stable")
    sorted_cells = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]])
    groups = np.split(kept[order], starts[1:])
    buckets: dict[Pixel, NDArray[np.intp]] = {}
    for cell, members in zip(sorted_cells[starts], groups, strict=True):
        members.setflags(write=False)
        buckets[(int(cell % config.width), int(cell // config.width))] = members

    return BevPair(
        spatial=spatial.reshape(config.shape),
        intensity=intensity.reshape(config.shape),
        buckets=MappingProxyType(buckets),
        config=config,
        cropped=cropped,
    )


def lift_keypoints(
    bev: BevPair,
    cloud: PointCloud,
    pixels: Sequence[Pixel] | NDArray[np.int64],
    channel: Channel | str,
) -> NDArray[np.float64]:
    """Map pixels back to one source point each.

    The spatial channel picks the bucket point closest to the ground plane
    (smallest ``|z|``); the intensity channel picks the brightest point. Ties
    go to the lowest point index.

    Returns:
        (K, 3) array in the order of ``pixels``.

    Raises:
        MissingBucketError: A pixel has no points
    """
    channel = Channel(channel)
    xyz = cloud.xyz
    out = np.empty((len(pixels), 3))
    for row, pixel in enumerate(pixels):
        members = bev.bucket((int(pixel[0]), int(pixel[1])))
        if channel is Channel.SPATIAL:
            pick = members[int(np.argmin(np.abs(xyz[members, 2])))]
        else:
            pick = members[int(np.argmax(cloud.intensity[members]))]
        out[row] = xyz[pick]
    return out


def to_uint8(image: NDArray[np.float64]) -> NDArray[np.uint8]:
    """Quantize a [0, 1] image as ``rint(value * 255)``."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_image(bev: BevPair, path: Path | str, channel: Channel | str = Channel.SPATIAL) -> Path:
    """Write one BEV channel as an 8-bit PGM (``.pgm``) or PNG (``.png``).

    Row 0 of the file is pixel row ``v = 0``.

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_uint8(bev.image(channel))
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + data.tobytes())
    elif suffix == ".png":
        mpimg.imsave(path, data, cmap="gray", vmin=0, vmax=255, format="png")
    else:
        raise ValueError(f"unsupported image format {suffix!r}; use .pgm or .png")
    logger.debug(msg=f"Wrote {channel} BEV image to {path}")
    return path
