"""Tests for the retrieval module."""

from pathlib import Path

import numpy as np
import pytest

from bevloc.covis import CovisLabel, Label
from bevloc.exceptions import EmptyIndexError, EvaluationError
from bevloc.features import normalize
from bevloc.retrieval import (
    DescriptorIndex,
    evaluate,
    load_index,
    positives_from_labels,
    query,
    save_index,
    write_report,
)

RANDOM_ENTRIES = 100
DIMENSION = 16
SCALE_ENTRIES = 500
SCALE_QUERIES = 10_000
SCALE_DIMENSION = 384


def basis_index(count: int = 4) -> DescriptorIndex:
    """Index of the first ``count`` standard basis vectors."""
    return DescriptorIndex.build(list(np.eye(count)), [f"db{k}" for k in range(count)])


def near(k: int, count: int = 4, noise: float = 0.1) -> np.ndarray:
    """A unit vector close to basis vector ``k``."""
    v = np.full(count, noise)
    v[k] = 1.0
    return normalize(v)


class TestQuery:
    """Test cases for nearest-neighbour search."""

    def test_self_match(self) -> None:
        """A query equal to an entry returns it first at distance 0."""
        hits = query(basis_index(), np.eye(4)[2], k=1)
        assert hits[0].id == 2
        assert hits[0].distance == 0.0

    def test_k_clamped(self) -> None:
        """k beyond the index size returns every entry, sorted."""
        hits = query(basis_index(), near(1), k=10)
        assert len(hits) == 4
        assert hits[0].id == 1
        distances = [h.distance for h in hits]
        assert distances == sorted(distances)

    def test_ties_break_by_id(self) -> None:
        """Equal distances rank the lower id first."""
        hits = query(basis_index(), normalize(np.ones(4)), k=4)
        assert [h.id for h in hits] == [0, 1, 2, 3]

    def test_matches_brute_force(self, rng: np.random.Generator) -> None:
        """Results equal an exhaustive scan for random instances."""
        descriptors = normalize(rng.normal(size=(RANDOM_ENTRIES, DIMENSION)))
        index = DescriptorIndex.build(list(descriptors))
        for q in normalize(rng.normal(size=(20, DIMENSION))):
            expected = np.argsort(np.linalg.norm(descriptors - q, axis=1), kind="stable")[:5]
            assert [h.id for h in query(index, q, k=5)] == expected.tolist()

    @pytest.mark.integration
    def test_matches_brute_force_at_scale(self, rng: np.random.Generator) -> None:
        """Exact neighbours and distances for many queries on full-size descriptors."""
        descriptors = normalize(rng.normal(size=(SCALE_ENTRIES, SCALE_DIMENSION)))
        index = DescriptorIndex.build(list(descriptors))
        for q in normalize(rng.normal(size=(SCALE_QUERIES, SCALE_DIMENSION))):
            distances = np.sqrt(((descriptors - q) ** 2).sum(axis=1))
            expected = sorted(range(SCALE_ENTRIES), key=lambda i: (distances[i], i))[:5]
            hits = query(index, q, k=5)
            assert [h.id for h in hits] == expected
            assert [h.distance for h in hits] == pytest.approx(distances[expected].tolist(), abs=1e-12)

    def test_empty_index(self) -> None:
        """Querying an empty index raises."""
        index = DescriptorIndex(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
        with pytest.raises(EmptyIndexError):
            query(index, np.ones(4), k=1)

    def test_dimension_mismatch(self) -> None:
        """Queries must match the index dimension."""
        with pytest.raises(ValueError, match="dimension"):
            query(basis_index(), np.ones(3), k=1)

    def test_rejects_non_unit_rows(self) -> None:
        """Index rows must be unit-norm."""
        with pytest.raises(ValueError, match="unit-norm"):
            DescriptorIndex.build([np.ones(4)])

    def test_sparse_ids_and_names(self) -> None:
        """Mapping input keeps its ids and resolves names."""
        index = DescriptorIndex.build({7: np.eye(2)[0], 3: np.eye(2)[1]}, ["three", "seven"])
        assert index.ids.tolist() == [3, 7]
        assert index.name_of(7) == "seven"
        assert query(index, np.eye(2)[0])[0].id == 7


class TestEvaluate:
    """Test cases for recall, precision and average precision."""

    def test_recall(self) -> None:
        """Three of four queries correct gives recall 0.75."""
        queries = {k: near(k) for k in range(4)}
        positives = {0: {0}, 1: {1}, 2: {2}, 3: {0}}
        report = evaluate(basis_index(), queries, positives)
        assert report.recall_at_1 == 0.75
        assert report.pr_curve[-1].precision == 0.75
        assert report.pr_curve[-1].true_positives == 3
        assert report.pr_curve[-1].false_positives == 1

    def test_perfect_retrieval(self) -> None:
        """Correct matches at every threshold give AP 1."""
        queries = {k: near(k, noise=0.05 * (k + 1)) for k in range(4)}
        report = evaluate(basis_index(), queries, {k: {k} for k in range(4)})
        assert report.recall_at_1 == 1.0
        assert report.average_precision == pytest.approx(1.0)
        assert all(p.precision == 1.0 for p in report.pr_curve)

    def test_queries_without_positive_are_excluded(self) -> None:
        """Queries with no positive leave the recall denominator."""
        queries = {0: near(0), 1: near(1)}
        report = evaluate(basis_index(), queries, {0: {0}, 1: set()})
        assert report.excluded == 1
        assert report.evaluated == 1
        assert report.recall_at_1 == 1.0

    def test_no_positives_anywhere(self) -> None:
        """An evaluation without any positive raises."""
        with pytest.raises(EvaluationError):
            evaluate(basis_index(), {0: near(0)}, {})

    def test_recall_non_decreasing(self, rng: np.random.Generator) -> None:
        """Loosening the threshold never lowers recall; reruns are identical."""
        index = DescriptorIndex.build(list(normalize(rng.normal(size=(30, DIMENSION)))))
        queries = {k: normalize(rng.normal(size=DIMENSION)) for k in range(25)}
        positives = {k: {int(rng.integers(30)), int(rng.integers(30))} for k in range(25)}
        report = evaluate(index, queries, positives)
        recalls = [p.recall for p in report.pr_curve]
        assert recalls == sorted(recalls)
        assert evaluate(index, queries, positives) == report

    def test_explicit_thresholds(self) -> None:
        """A threshold accepting nothing has precision 1 and recall 0."""
        report = evaluate(basis_index(), {0: near(0)}, {0: {0}}, thresholds=[0.0, 2.0])
        assert report.pr_curve[0].precision == 1.0
        assert report.pr_curve[0].recall == 0.0
        assert report.pr_curve[1].recall == 1.0

    def test_positives_from_labels(self) -> None:
        """Only positive labels become positives; listed queries get an entry."""
        labels = {
            (0, 1): CovisLabel(0.4, Label.POSITIVE),
            (0, 2): CovisLabel(0.1, Label.NEGATIVE),
            (1, 2): CovisLabel(0.22, Label.IGNORE),
        }
        assert positives_from_labels(labels, [0, 1, 5]) == {0: {1}, 1: set(), 5: set()}


class TestIndexFiles:
    """Test cases for index and report files."""

    def test_index_round_trip(self, tmp_path: Path, rng: np.random.Generator) -> None:
        """Saved indexes reload bit-exactly."""
        index = DescriptorIndex.build(
            {k * 2: v for k, v in enumerate(normalize(rng.normal(size=(5, DIMENSION))))},
            [f"s{k}" for k in range(5)],
        )
        loaded = load_index(save_index(index, tmp_path / "index.csv"))
        np.testing.assert_array_equal(loaded.ids, index.ids)
        np.testing.assert_array_equal(loaded.descriptors, index.descriptors)
        assert loaded.names == index.names

    def test_write_report(self, tmp_path: Path) -> None:
        """The report directory holds CSVs, a summary and a stable SVG."""
        report = evaluate(basis_index(), {k: near(k) for k in range(4)}, {k: {k} for k in range(4)})
        written = write_report(report, tmp_path / "a")
        assert {p.name for p in written} == {"pr_curve.csv", "queries.csv", "summary.txt", "pr_curve.svg"}
        summary = (tmp_path / "a" / "summary.txt").read_text(encoding="utf-8")
        assert "recall@1: 1.000000" in summary
        write_report(report, tmp_path / "b")
        assert (tmp_path / "a" / "pr_curve.svg").read_bytes() == (tmp_path / "b" / "pr_curve.svg").read_bytes()

    def test_write_report_without_plot(self, tmp_path: Path) -> None:
        """Plotting can be switched off."""
        report = evaluate(basis_index(), {0: near(0)}, {0: {0}})
        written = write_report(report, tmp_path, plot=False)
        assert not (tmp_path / "pr_curve.svg").exists()
        assert len(written) == 3
