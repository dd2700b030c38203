"""Tests for the pose_graph module."""

from pathlib import Path

import numpy as np
import pytest

from bevloc.exceptions import ConfigurationError, ConnectivityError, PoseGraphError
from bevloc.pose_graph import (
    Edge,
    EdgeKind,
    GraphConfig,
    PoseGraph,
    endpoint_error,
    graph_from_trajectory,
    optimize,
    read_g2o,
    residual,
    residual_jacobians,
    total_cost,
    write_g2o,
)
from bevloc.se3 import PoseSE3

CHAIN_LENGTH = 10
DRIFT = 0.01
FD_STEP = 1e-6


def straight_line(count: int = CHAIN_LENGTH, step: float = 1.0) -> list[PoseSE3]:
    """Poses along +x, ``step`` meters apart."""
    return [PoseSE3.from_yaw(0.0, (step * k, 0.0, 0.0)) for k in range(count)]


def drifting_chain() -> tuple[PoseGraph, list[PoseSE3]]:
    """Dead-reckoned chain with 1% translation drift per edge and one exact loop edge 9 -> 0."""
    truth = straight_line()
    odometry = straight_line(step=1.0 + DRIFT)
    loop = truth[0].inverse() @ truth[-1]
    return graph_from_trajectory(odometry, [(CHAIN_LENGTH - 1, 0, loop)]), truth


class TestResidual:
    """Test cases for edge residuals."""

    def test_consistent_edge(self, rng: np.random.Generator) -> None:
        """A measurement equal to T_j^-1 T_i has zero residual."""
        ti, tj = PoseSE3.exp(rng.normal(size=6)), PoseSE3.exp(rng.normal(size=6))
        edge = Edge(1, 0, tj.inverse() @ ti)
        np.testing.assert_allclose(residual(edge, [tj, ti]), 0.0, atol=1e-12)

    def test_identity_edge(self) -> None:
        """Equal poses with an identity measurement have zero residual."""
        pose = PoseSE3.from_yaw(30.0, (1.0, 2.0, 3.0))
        np.testing.assert_allclose(residual(Edge(1, 0, PoseSE3.identity()), [pose, pose]), 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_jacobians_match_finite_differences(self, seed: int) -> None:
        """Analytic Jacobians agree with central differences."""
        rng = np.random.default_rng(seed)
        nodes = [PoseSE3.exp(rng.normal(size=6)), PoseSE3.exp(rng.normal(size=6))]
        edge = Edge(1, 0, PoseSE3.exp(0.3 * rng.normal(size=6)) @ nodes[0].inverse() @ nodes[1])
        _, jac_i, jac_j = residual_jacobians(edge, nodes)
        for node, analytic in ((1, jac_i), (0, jac_j)):
            numeric = np.zeros((6, 6))
            for k in range(6):
                delta = np.zeros(6)
                delta[k] = FD_STEP
                plus = list(nodes)
                minus = list(nodes)
                plus[node] = nodes[node].retract(delta)
                minus[node] = nodes[node].retract(-delta)
                numeric[:, k] = (residual(edge, plus) - residual(edge, minus)) / (2 * FD_STEP)
            np.testing.assert_allclose(numeric, analytic, rtol=1e-5, atol=1e-5)

    def test_gauge_invariance(self, rng: np.random.Generator) -> None:
        """Moving every node by one rigid transform changes no residual."""
        graph, _ = drifting_chain()
        g = PoseSE3.exp(rng.normal(size=6))
        moved = graph.with_nodes([g @ pose for pose in graph.nodes])
        for edge in graph.edges:
            np.testing.assert_allclose(residual(edge, moved.nodes), residual(edge, graph.nodes), atol=1e-9)


class TestGraph:
    """Test cases for graph structure."""

    def test_edge_order(self) -> None:
        """Edges must satisfy i > j."""
        with pytest.raises(PoseGraphError, match="i > j"):
            Edge(0, 1, PoseSE3.identity())

    def test_edge_weights(self) -> None:
        """Weights must be six positive numbers."""
        with pytest.raises(PoseGraphError, match="weights"):
            Edge(1, 0, PoseSE3.identity(), weights=np.zeros(6))

    def test_missing_node(self) -> None:
        """Edges must reference existing nodes."""
        with pytest.raises(PoseGraphError, match="missing node"):
            PoseGraph((PoseSE3.identity(),), (Edge(1, 0, PoseSE3.identity()),))

    def test_trajectory_edges(self) -> None:
        """Consecutive poses become odometry, extra pairs loops."""
        graph, _ = drifting_chain()
        assert len(graph.odometry) == CHAIN_LENGTH - 1
        assert [(e.i, e.j) for e in graph.loops] == [(CHAIN_LENGTH - 1, 0)]

    def test_disconnected(self) -> None:
        """A node without odometry is a connectivity error."""
        nodes = straight_line(3)
        graph = PoseGraph(tuple(nodes), (Edge(1, 0, nodes[0].inverse() @ nodes[1]),))
        with pytest.raises(ConnectivityError):
            optimize(graph)

    def test_config_validation(self) -> None:
        """The iteration cap must be positive."""
        with pytest.raises(ConfigurationError):
            GraphConfig(max_iterations=0)


class TestOptimize:
    """Test cases for Levenberg-Marquardt optimization."""

    def test_consistent_graph_unchanged(self) -> None:
        """A zero-residual graph stays put at zero cost."""
        graph = graph_from_trajectory(straight_line())
        result = optimize(graph)
        assert result.cost == pytest.approx(0.0, abs=1e-20)
        assert result.converged
        for before, after in zip(graph.nodes, result.nodes, strict=True):
            assert after.is_close(before, atol=1e-12)

    def test_single_edge(self) -> None:
        """Node 1 moves to T_0 dT."""
        t0 = PoseSE3.from_yaw(20.0, (1.0, -2.0, 0.5))
        measurement = PoseSE3.from_yaw(-35.0, (3.0, 1.0, 0.0))
        graph = PoseGraph((t0, PoseSE3.identity()), (Edge(1, 0, measurement),))
        result = optimize(graph)
        assert result.nodes[0].is_close(t0, atol=0.0)
        assert result.nodes[1].is_close(t0 @ measurement, atol=1e-4)

    def test_loop_closure_removes_drift(self) -> None:
        """One exact loop edge cuts the endpoint error by at least 80%."""
        graph, truth = drifting_chain()
        before = endpoint_error(graph.nodes, truth)
        result = optimize(graph)
        after = endpoint_error(result.nodes, truth)
        assert after <= 0.2 * before
        assert result.cost < result.initial_cost
        history = list(result.cost_history)
        assert all(b <= a for a, b in zip(history, history[1:], strict=False))

    def test_iteration_cap(self) -> None:
        """Stopping early reports converged = false."""
        graph, _ = drifting_chain()
        result = optimize(graph, GraphConfig(max_iterations=1))
        assert result.iterations == 1
        assert not result.converged

    def test_huber_limits_bad_loop(self) -> None:
        """A wrong loop edge distorts less under the Huber kernel."""
        truth = straight_line()
        bad = [(CHAIN_LENGTH - 1, 0, PoseSE3.identity())]
        plain = optimize(graph_from_trajectory(truth, bad))
        robust = optimize(graph_from_trajectory(truth, bad), GraphConfig(huber=True, huber_delta=0.1))
        assert endpoint_error(robust.nodes, truth) < 0.5 * endpoint_error(plain.nodes, truth)

    def test_total_cost(self) -> None:
        """Cost is the weighted squared residual sum."""
        nodes = straight_line(2)
        edge = Edge(1, 0, PoseSE3.from_yaw(0.0, (3.0, 0.0, 0.0)), weights=[1, 1, 1, 2, 1, 1])
        assert total_cost(PoseGraph(tuple(nodes), (edge,))) == pytest.approx(8.0)


class TestG2o:
    """Test cases for g2o files."""

    def test_round_trip(self, tmp_path: Path) -> None:
        """Written graphs read back with the same nodes, edges and gauge."""
        graph, _ = drifting_chain()
        graph = PoseGraph(graph.nodes, (*graph.edges, Edge(5, 2, PoseSE3.from_yaw(10.0), EdgeKind.LOOP, [1, 2, 3, 4, 5, 6])), 3)
        loaded = read_g2o(write_g2o(graph, tmp_path / "g.g2o"))
        assert loaded.gauge == 3
        for a, b in zip(graph.nodes, loaded.nodes, strict=True):
            assert a.is_close(b, atol=1e-12)
        assert len(loaded.loops) == 2
        for a, b in zip(graph.edges, loaded.edges, strict=True):
            assert (a.i, a.j, a.kind) == (b.i, b.j, b.kind)
            assert a.measurement.is_close(b.measurement, atol=1e-12)
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_reversed_edge(self, tmp_path: Path) -> None:
        """An edge stored from the higher id is inverted on read."""
        path = tmp_path / "r.g2o"
        path.write_text(
            "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n"
            "VERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n"
            "EDGE_SE3:QUAT 1 0 -1 0 0 0 0 0 1\n",
            encoding="utf-8",
        )
        graph = read_g2o(path)
        edge = graph.edges[0]
        assert (edge.i, edge.j) == (1, 0)
        np.testing.assert_allclose(edge.measurement.translation, [1.0, 0.0, 0.0])
        np.testing.assert_allclose(residual(edge, graph.nodes), 0.0, atol=1e-12)

    def test_malformed(self, tmp_path: Path) -> None:
        """Bad numbers name the line."""
        path = tmp_path / "bad.g2o"
        path.write_text("VERTEX_SE3:QUAT 0 a 0 0 0 0 0 1\n", encoding="utf-8")
        with pytest.raises(PoseGraphError, match=":1:"):
            read_g2o(path)

    def test_non_contiguous_ids(self, tmp_path: Path) -> None:
        """Vertex ids must be 0..N-1."""
        path = tmp_path / "gap.g2o"
        path.write_text("VERTEX_SE3:QUAT 1 0 0 0 0 0 0 1\n", encoding="utf-8")
        with pytest.raises(PoseGraphError, match="0..N-1"):
            read_g2o(path)
