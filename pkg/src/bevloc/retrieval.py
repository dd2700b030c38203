"""Exact nearest-neighbour retrieval over global descriptors and its evaluation.

The index is a brute-force L2 scan: for desk-sized databases of
384-dimensional descriptors that is fast enough and exact by construction.
Ties in distance are broken by the lower id.
"""

import csv
import logging
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from numpy.typing import ArrayLike, NDArray

from .covis import CovisLabel, Label
from .exceptions import EmptyIndexError, EvaluationError
from .features import UNIT_TOLERANCE

logger: logging.Logger = logging.getLogger(name=__name__)

_SVG_SALT = "bevloc"


class Neighbor(NamedTuple):
    """One search hit."""

    id: int
    distance: float


@dataclass(frozen=True, eq=False)
class DescriptorIndex:
    """Immutable table of ``(id, descriptor)`` rows with optional display names."""

    ids: NDArray[np.int64]
    descriptors: NDArray[np.float64]
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        """Validate ids and descriptors; freeze arrays."""
        ids = np.array(self.ids, dtype=np.int64).reshape(-1)
        descriptors = np.array(self.descriptors, dtype=np.float64)
        if descriptors.ndim != 2 or descriptors.shape[0] != ids.size:
            raise ValueError("descriptors must be an (N, D) array with one row per id")
        if np.unique(ids).size != ids.size:
            raise ValueError("descriptor ids must be unique")
        if ids.size:
            norms = np.linalg.norm(descriptors, axis=1)
            if not np.all(np.isfinite(norms)) or np.max(np.abs(norms - 1.0)) > UNIT_TOLERANCE:
                raise ValueError("index descriptors must be finite and unit-norm")
        if self.names and len(self.names) != ids.size:
            raise ValueError("names must match ids one to one")
        ids.setflags(write=False)
        descriptors.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "descriptors", descriptors)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self) -> int:
        """Number of entries."""
        return int(self.ids.size)

    @classmethod
    def build(
        cls, descriptors: Mapping[int, ArrayLike] | Sequence[ArrayLike], names: Sequence[str] = ()
    ) -> "DescriptorIndex":
        """Build from ``{id: descriptor}`` or a sequence (ids ``0..N-1``)."""
        if isinstance(descriptors, Mapping):
            ids = sorted(descriptors)
            rows = [np.asarray(descriptors[i], dtype=np.float64) for i in ids]
        else:
            ids = list(range(len(descriptors)))
            rows = [np.asarray(d, dtype=np.float64) for d in descriptors]
        matrix = np.vstack(rows) if rows else np.zeros((0, 0))
        logger.info(msg=f"Built descriptor index with {len(ids)} entries")
        return cls(np.asarray(ids, dtype=np.int64), matrix, tuple(names))

    def name_of(self, entry_id: int) -> str:
        """Display name of ``entry_id`` (the id itself when unnamed)."""
        if not self.names:
            return str(entry_id)
        return self.names[int(np.flatnonzero(self.ids == entry_id)[0])]


def query(index: DescriptorIndex, q: ArrayLike, k: int = 1) -> list[Neighbor]:
    """Exact ``k`` nearest entries by L2 distance, nearest first.

    ``k`` larger than the index returns every entry.

    Raises:
        EmptyIndexError: The index has no entries
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if len(index) == 0:
        raise EmptyIndexError("cannot query an empty descriptor index")
    vector = np.asarray(q, dtype=np.float64).reshape(-1)
    if vector.size != index.descriptors.shape[1]:
        raise ValueError(
            f"query has dimension {vector.size}, index has {index.descriptors.shape[1]}"
        )
    distances = np.linalg.norm(index.descriptors - vector, axis=1)
    order = np.lexsort((index.ids, distances))[:k]
    return [Neighbor(int(index.ids[i]), float(distances[i])) for i in order]


class PRPoint(NamedTuple):
    """Precision and recall when accepting top-1 hits within ``threshold``."""

    threshold: float
    precision: float
    recall: float
    true_positives: int
    false_positives: int


@dataclass(frozen=True)
class QueryResult:
    """Top-k hits of one query and whether the top hit is a positive."""

    query_id: int
    neighbors: tuple[Neighbor, ...]
    has_positive: bool
    correct: bool


@dataclass(frozen=True)
class RetrievalReport:
    """Per-query hits plus recall@1, average precision and the PR sweep."""

    queries: tuple[QueryResult, ...]
    recall_at_1: float
    average_precision: float
    pr_curve: tuple[PRPoint, ...]
    excluded: int = 0
    elapsed: float = field(default=0.0, compare=False)

    @property
    def evaluated(self) -> int:
        """Queries with at least one positive."""
        return sum(1 for q in self.queries if q.has_positive)

    def summary_lines(self) -> list[str]:
        """Human-readable summary (timing excluded so reruns are identical)."""
        return [
            f"queries: {len(self.queries)}",
            f"queries with positives: {self.evaluated}",
            f"queries excluded (no positive in database): {self.excluded}",
            f"recall@1: {self.recall_at_1:.6f}",
            f"average precision: {self.average_precision:.6f}",
            f"pr samples: {len(self.pr_curve)}",
        ]


def positives_from_labels(
    labels: Mapping[tuple[int, int], CovisLabel], query_ids: Iterable[int] = ()
) -> dict[int, set[int]]:
    """Positive database ids per query from ``(query, database)`` labels."""
    positives: dict[int, set[int]] = {int(q): set() for q in query_ids}
    for (q, db), value in labels.items():
        bucket = positives.setdefault(int(q), set())
        if value.label is Label.POSITIVE:
            bucket.add(int(db))
    return positives


def _average_precision(points: Sequence[PRPoint]) -> float:
    recall = [0.0] + [p.recall for p in points]
    precision = [1.0] + [p.precision for p in points]
    area = 0.0
    for i in range(1, len(recall)):
        area += (recall[i] - recall[i - 1]) * (precision[i] + precision[i - 1]) / 2.0
    return float(area)


def evaluate(
    index: DescriptorIndex,
    queries: Mapping[int, ArrayLike],
    positives: Mapping[int, set[int]],
    thresholds: Sequence[float] | None = None,
    k: int = 1,
) -> RetrievalReport:
    """Top-1 recall, PR sweep and average precision of ``queries`` against ``index``.

    Queries without any positive are left out of the recall denominator
    (their count is reported as ``excluded``) but still count as false
    positives when their top hit is accepted. Precision is 1 for a
    threshold that accepts nothing. Average precision is the trapezoidal
    area under the curve, anchored at recall 0 / precision 1.

    Args:
        index: Database descriptors
        queries: Query descriptors by query id
        positives: Positive database ids per query id
        thresholds: Descriptor-distance sweep; defaults to every distinct top-1 distance
        k: Hits kept per query

    Raises:
        EvaluationError: No queries, or no query has a positive
    """
    started = time.perf_counter()
    if not queries:
        raise EvaluationError("no queries to evaluate")
    results: list[QueryResult] = []
    top_distance: list[float] = []
    for query_id in sorted(queries):
        hits = tuple(query(index, queries[query_id], k))
        wanted = positives.get(query_id, set())
        results.append(
            QueryResult(query_id, hits, bool(wanted), bool(wanted) and hits[0].id in wanted)
        )
        top_distance.append(hits[0].distance)

    n_positive = sum(1 for r in results if r.has_positive)
    if n_positive == 0:
        raise EvaluationError("no query has a positive database entry")
    excluded = len(results) - n_positive
    if excluded:
        logger.info(msg=f"{excluded} queries have no positive and are excluded from recall")

    distance = np.array(top_distance)
    correct = np.array([r.correct for r in results])
    sweep = sorted(set(top_distance)) if thresholds is None else sorted(float(t) for t in thresholds)
    points: list[PRPoint] = []
    for tau in sweep:
        accepted = distance <= tau
        tp = int(np.count_nonzero(accepted & correct))
        fp = int(np.count_nonzero(accepted & ~correct))
        precision = tp / (tp + fp) if tp + fp else 1.0
        points.append(PRPoint(float(tau), precision, tp / n_positive, tp, fp))

    report = RetrievalReport(
        queries=tuple(results),
        recall_at_1=int(np.count_nonzero(correct)) / n_positive,
        average_precision=_average_precision(points),
        pr_curve=tuple(points),
        excluded=excluded,
        elapsed=time.perf_counter() - started,
    )
    logger.info(
        msg=f"Evaluated {len(results)} queries: recall@1 {report.recall_at_1:.4f}, "
        f"AP {report.average_precision:.4f}"
    )
    return report


def save_index(index: DescriptorIndex, path: Path | str) -> Path:
    """Write an index as CSV rows ``id,name,v0,...`` with ``%.17g`` values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = index.names or tuple(str(i) for i in index.ids)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["id", "name"] + [f"v{d}" for d in range(index.descriptors.shape[1])])
        for entry_id, name, row in zip(index.ids, names, index.descriptors, strict=True):
            writer.writerow([int(entry_id), name] + [f"{v:.17g}" for v in row])
    return path


def load_index(path: Path | str) -> DescriptorIndex:
    """Read an index written by :func:`save_index`."""
    ids: list[int] = []
    names: list[str] = []
    rows: list[list[float]] = []
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            return DescriptorIndex(np.zeros(0, dtype=np.int64), np.zeros((0, 0)))
        for row in reader:
            ids.append(int(row[0]))
            names.append(row[1])
            rows.append([float(v) for v in row[2:]])
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 2)
    return DescriptorIndex(np.array(ids, dtype=np.int64), matrix, tuple(names))


def plot_pr_curve(report: RetrievalReport, path: Path | str) -> Path:
    """Render the PR curve as a standalone SVG; output is byte-stable across runs."""
    path = Path(path)
    figure = Figure(figsize=(4.0, 4.0))
    axes = figure.add_subplot()
    recall = [0.0] + [p.recall for p in report.pr_curve]
    precision = [1.0] + [p.precision for p in report.pr_curve]
    axes.plot(recall, precision, marker=".", linewidth=1.0)
    axes.set_xlim(0.0, 1.0)
    axes.set_ylim(0.0, 1.05)
    axes.set_xlabel("recall")
    axes.set_ylabel("precision")
    axes.set_title(f"AP = {report.average_precision:.4f}")
    axes.grid(visible=True, alpha=0.3)
    with matplotlib.rc_context({"svg.hashsalt": _SVG_SALT, "svg.fonttype": "none"}):
        figure.savefig(path, format="svg", metadata={"Date": None})
    return path


def write_report(report: RetrievalReport, directory: Path | str, plot: bool = True) -> list[Path]:
    """Write ``pr_curve.csv``, ``queries.csv``, ``summary.txt`` and optionally ``pr_curve.svg``.

    Returns:
        Paths written.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    pr_path = directory / "pr_curve.csv"
    with pr_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["threshold", "precision", "recall", "tp", "fp"])
        for p in report.pr_curve:
            writer.writerow(
                [f"{p.threshold:.17g}", f"{p.precision:.17g}", f"{p.recall:.17g}",
                 p.true_positives, p.false_positives]
            )
    written.append(pr_path)

    query_path = directory / "queries.csv"
    with query_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["query", "top1", "distance", "has_positive", "correct"])
        for r in report.queries:
            top = r.neighbors[0]
            writer.writerow(
                [r.query_id, top.id, f"{top.distance:.17g}", int(r.has_positive), int(r.correct)]
            )
    written.append(query_path)

    summary_path = directory / "summary.txt"
    summary_path.write_text("\n".join(report.summary_lines()) + "\n", encoding="utf-8")
    written.append(summary_path)

    if plot:
        written.append(plot_pr_curve(report, directory / "pr_curve.svg"))
    return written
