"""Co-visibility from convex-hull overlap of world-frame footprints.

Two clouds are co-visible when the 2D convex hulls of their (x, y)
footprints, moved into the world frame by ground-truth poses, overlap:
IoU above 0.25 is a positive pair, below 0.2 a negative one, anything in
between is ignored. A distance mode labels pairs by sensor separation
instead (positive within 5 m).
"""

import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .cloud_io import DatasetManifest, ManifestEntry, PointCloud
from .exceptions import BevLocError, DegenerateHullError
from .se3 import PoseSE3

logger: logging.Logger = logging.getLogger(name=__name__)

POSITIVE_IOU = 0.25
NEGATIVE_IOU = 0.2
POSITIVE_DISTANCE = 5.0
_EPS = 1e-12


class Label(StrEnum):
    """Training label of a cloud pair."""

    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORE = "ignore"


class LabelMode(StrEnum):
    """Positive criterion: hull overlap or sensor distance."""

    IOU = "iou"
    DISTANCE = "distance"


@dataclass(frozen=True)
class CovisLabel:
    """Label of one pair; ``iou`` is None in distance mode."""

    iou: float | None
    label: Label
    distance: float = 0.0


@dataclass(frozen=True, eq=False)
class Hull2D:
    """Strictly convex polygon with counter-clockwise vertices."""

    vertices: NDArray[np.float64]

    def __post_init__(self) -> None:
        """Freeze the vertex array."""
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        vertices.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)

    def __len__(self) -> int:
        """Number of vertices."""
        return int(self.vertices.shape[0])

    @property
    def area(self) -> float:
        """Enclosed area in m^2."""
        return polygon_area(self.vertices)

    @property
    def centroid(self) -> NDArray[np.float64]:
        """Mean of the vertices."""
        return self.vertices.mean(axis=0)

    def contains(self, points: ArrayLike, tol: float = 1e-9) -> NDArray[np.bool_]:
        """Whether each (x, y) point lies inside or on the hull."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        a = self.vertices
        b = np.roll(a, -1, axis=0)
        edge = b - a
        rel = pts[:, None, :] - a[None, :, :]
        cross = edge[None, :, 0] * rel[:, :, 1] - edge[None, :, 1] * rel[:, :, 0]
        return np.all(cross >= -tol, axis=1)


def polygon_area(vertices: ArrayLike) -> float:
    """Shoelace area of a simple polygon (absolute value)."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if v.shape[0] < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def _cross(o: Sequence[float], a: Sequence[float], b: Sequence[float]) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _discard_interior(xy: NDArray[np.float64]) -> NDArray[np.float64]:
    """Drop points strictly inside the extreme-point quadrilateral."""
    extremes = [np.argmin(xy[:, 0]), np.argmin(xy[:, 1]), np.argmax(xy[:, 0]), np.argmax(xy[:, 1])]
    corners = xy[extremes]
    _, first = np.unique(corners, axis=0, return_index=True)
    quad = corners[np.sort(first)]
    if quad.shape[0] < 3 or polygon_area(quad) <= _EPS:
        return xy
    edge = np.roll(quad, -1, axis=0) - quad
    rel = xy[:, None, :] - quad[None, :, :]
    cross = edge[None, :, 0] * rel[:, :, 1] - edge[None, :, 1] * rel[:, :, 0]
    return xy[~np.all(cross > 0.0, axis=1)]


def hull_from_xy(points: ArrayLike) -> Hull2D:
    """Convex hull of planar points by Andrew's monotone chain.

    Collinear boundary points are dropped, so the result is strictly convex.

    Raises:
        DegenerateHullError: Fewer than three non-collinear points
    """
    xy = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if xy.shape[0] >= 8:
        xy = _discard_interior(xy)
    pts = [tuple(p) for p in np.unique(xy, axis=0)]
    if len(pts) < 3:
        raise DegenerateHullError(f"need at least 3 distinct points, got {len(pts)}")

    lower: list[tuple[float, ...]] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, ...]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    chain = lower[:-1] + upper[:-1]
    if len(chain) < 3 or polygon_area(chain) <= _EPS:
        raise DegenerateHullError("points are collinear")
    return Hull2D(np.array(chain))


def hull(cloud: PointCloud, world_pose: PoseSE3) -> Hull2D:
    """Convex hull of a cloud's world-frame (x, y) footprint.

    Raises:
        DegenerateHullError: Fewer than three points or all collinear
    """
    xy = world_pose.apply(cloud.xyz)[:, :2]
    try:
        return hull_from_xy(xy)
    except DegenerateHullError as err:
        raise DegenerateHullError(f"{cloud.frame_id or 'cloud'}: {err}") from err


def _dedupe(vertices: list[NDArray[np.float64]]) -> list[NDArray[np.float64]]:
    out: list[NDArray[np.float64]] = []
    for v in vertices:
        if not out or np.max(np.abs(v - out[-1])) > _EPS:
            out.append(v)
    while len(out) > 1 and np.max(np.abs(out[0] - out[-1])) <= _EPS:
        out.pop()
    return out


def clip_convex(subject: ArrayLike, clip: ArrayLike) -> NDArray[np.float64]:
    """Clip polygon ``subject`` against convex CCW polygon ``clip``.

    Sutherland-Hodgman; points on a clip edge count as inside. Consecutive
    vertices closer than 1e-12 are merged.

    Returns:
        Vertices of the intersection, possibly empty.
    """
    output = [np.asarray(p, dtype=np.float64) for p in np.asarray(subject).reshape(-1, 2)]
    clip_pts = np.asarray(clip, dtype=np.float64).reshape(-1, 2)
    cp1 = clip_pts[-1]
    for cp2 in clip_pts:
        if not output:
            break
        edge = cp2 - cp1
        inputs = output
        pts = np.array(inputs)
        # signed distance (times |edge|) of each vertex to the left of cp1 -> cp2
        sides = edge[0] * (pts[:, 1] - cp1[1]) - edge[1] * (pts[:, 0] - cp1[0])
        output = []
        s, s_side = inputs[-1], float(sides[-1])
        for e, e_side in zip(inputs, sides.tolist(), strict=True):
            if e_side >= 0.0:
                if s_side < 0.0:
                    output.append(s + (s_side / (s_side - e_side)) * (e - s))
                output.append(e)
            elif s_side >= 0.0:
                output.append(s + (s_side / (s_side - e_side)) * (e - s))
            s, s_side = e, e_side
        output = _dedupe(output)
        cp1 = cp2
    if len(output) < 3:
        return np.zeros((0, 2))
    return np.array(output)


def iou(a: Hull2D, b: Hull2D) -> float:
    """Intersection over union of two convex hulls, in [0, 1]."""
    inter = polygon_area(clip_convex(a.vertices, b.vertices))
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def classify(
    value: float, positive: float = POSITIVE_IOU, negative: float = NEGATIVE_IOU
) -> Label:
    """Map an IoU to a label: ``> positive`` positive, ``< negative`` negative."""
    if value > positive:
        return Label.POSITIVE
    if value < negative:
        return Label.NEGATIVE
    return Label.IGNORE


def label_by_distance(distance: float, threshold: float = POSITIVE_DISTANCE) -> Label:
    """Positive when the sensors are closer than ``threshold`` meters."""
    return Label.POSITIVE if distance < threshold else Label.NEGATIVE


def _entry_hull(entry: ManifestEntry) -> Hull2D:
    return hull(entry.load(), entry.pose)


def compute_hulls(
    entries: Sequence[ManifestEntry], workers: int = 1
) -> tuple[dict[int, Hull2D], list[int]]:
    """Load every entry and compute its world-frame hull.

    Returns:
        Hulls by entry index, and the indices excluded because their cloud
        could not be loaded or its hull is degenerate.
    """
    hulls: dict[int, Hull2D] = {}
    excluded: list[int] = []

    def attempt(index: int) -> Hull2D | None:
        try:
            return _entry_hull(entries[index])
        except BevLocError as err:
            logger.warning(msg=f"Excluding entry {index} ({entries[index].name}): {err}")
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for index, result in enumerate(executor.map(attempt, range(len(entries)))):
            if result is None:
                excluded.append(index)
            else:
                hulls[index] = result
    return hulls, excluded


class PairLabels(dict[tuple[int, int], CovisLabel]):
    """Labels keyed by index pair, with the indices left out as degenerate."""

    def __init__(self, excluded: Iterable[int] = ()) -> None:
        """Initialize PairLabels.

        Args:
            excluded: Entry indices without a usable hull
        """
        super().__init__()
        self.excluded: list[int] = list(excluded)

    def count(self, label: Label) -> int:
        """Number of pairs carrying ``label``."""
        return sum(1 for value in self.values() if value.label is label)


def _label(
    mode: LabelMode,
    hull_a: Hull2D | None,
    hull_b: Hull2D | None,
    distance: float,
    positive_iou: float,
    negative_iou: float,
    positive_distance: float,
) -> CovisLabel:
    if mode is LabelMode.DISTANCE:
        return CovisLabel(None, label_by_distance(distance, positive_distance), distance)
    if hull_a is None or hull_b is None:
        raise DegenerateHullError("IoU labelling needs both hulls")
    value = iou(hull_a, hull_b)
    return CovisLabel(value, classify(value, positive_iou, negative_iou), distance)


def _separation(a: ManifestEntry, b: ManifestEntry) -> float:
    return float(np.linalg.norm(a.pose.translation - b.pose.translation))


def label_pairs(
    manifest: DatasetManifest,
    mode: LabelMode | str = LabelMode.IOU,
    max_centroid_distance: float | None = None,
    positive_iou: float = POSITIVE_IOU,
    negative_iou: float = NEGATIVE_IOU,
    positive_distance: float = POSITIVE_DISTANCE,
    workers: int = 1,
) -> PairLabels:
    """Label every unordered pair ``(i, j)``, ``i < j``, of a manifest.

    Args:
        manifest: Sequence with ground-truth poses
        mode: ``iou`` (hull overlap) or ``distance`` (sensor separation)
        max_centroid_distance: Skip pairs whose hull centroids (sensor
            positions in distance mode) are further apart
        positive_iou: IoU above which a pair is positive
        negative_iou: IoU below which a pair is negative
        positive_distance: Separation below which a pair is positive
        workers: Threads used to load clouds

    Returns:
        Labels for the surviving pairs; degenerate entries are listed in
        ``excluded``.
    """
    mode = LabelMode(mode)
    entries = manifest.entries
    if len(entries) < 2:
        raise BevLocError("label_pairs needs at least two manifest entries")
    if mode is LabelMode.IOU:
        hulls, excluded = compute_hulls(entries, workers)
    else:
        hulls, excluded = {}, []
    labels = PairLabels(excluded)
    usable = [i for i in range(len(entries)) if i not in set(excluded)]
    for pos, i in enumerate(usable):
        for j in usable[pos + 1 :]:
            distance = _separation(entries[i], entries[j])
            if max_centroid_distance is not None:
                gap = (
                    float(np.linalg.norm(hulls[i].centroid - hulls[j].centroid))
                    if mode is LabelMode.IOU
                    else distance
                )
                if gap > max_centroid_distance:
                    continue
            labels[(i, j)] = _label(
                mode, hulls.get(i), hulls.get(j), distance,
                positive_iou, negative_iou, positive_distance,
            )
    logger.info(
        msg=f"Labelled {len(labels)} pairs: {labels.count(Label.POSITIVE)} positive, "
        f"{labels.count(Label.NEGATIVE)} negative, {len(excluded)} entries excluded"
    )
    return labels


def label_queries(
    queries: DatasetManifest,
    database: DatasetManifest,
    mode: LabelMode | str = LabelMode.IOU,
    positive_iou: float = POSITIVE_IOU,
    negative_iou: float = NEGATIVE_IOU,
    positive_distance: float = POSITIVE_DISTANCE,
    workers: int = 1,
) -> PairLabels:
    """Label every (query index, database index) pair across two manifests.

    Degenerate query hulls are listed in ``excluded``; degenerate database
    hulls are skipped with a warning.
    """
    mode = LabelMode(mode)
    if mode is LabelMode.IOU:
        q_hulls, q_excluded = compute_hulls(queries.entries, workers)
        db_hulls, db_excluded = compute_hulls(database.entries, workers)
    else:
        q_hulls, q_excluded, db_hulls, db_excluded = {}, [], {}, []
    labels = PairLabels(q_excluded)
    skip_q, skip_db = set(q_excluded), set(db_excluded)
    for i, q_entry in enumerate(queries.entries):
        if i in skip_q:
            continue
        for j, db_entry in enumerate(database.entries):
            if j in skip_db:
                continue
            labels[(i, j)] = _label(
                mode, q_hulls.get(i), db_hulls.get(j), _separation(q_entry, db_entry),
                positive_iou, negative_iou, positive_distance,
            )
    return labels


def write_labels_csv(labels: Mapping[tuple[int, int], CovisLabel], path: Path | str) -> Path:
    """Write labels as ``i,j,iou,label`` rows sorted by pair; empty iou in distance mode."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["i", "j", "iou", "label"])
        for (i, j), value in sorted(labels.items()):
            iou_text = "" if value.iou is None else f"{value.iou:.17g}"
            writer.writerow([i, j, iou_text, value.label.value])
    return path


def read_labels_csv(path: Path | str) -> dict[tuple[int, int], CovisLabel]:
    """Read a file written by :func:`write_labels_csv`."""
    labels: dict[tuple[int, int], CovisLabel] = {}
    with Path(path).open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            value = float(row["iou"]) if row["iou"] else None
            labels[(int(row["i"]), int(row["j"]))] = CovisLabel(value, Label(row["label"]))
    return labels
