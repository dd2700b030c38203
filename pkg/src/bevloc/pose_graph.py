"""SE(3) pose-graph optimization fusing odometry with loop closures.

Edges follow the ``i > j`` convention: the measurement ``dT`` of edge
``(i, j)`` takes frame-``i`` coordinates to frame-``j`` coordinates, so a
consistent graph has ``T_j^-1 T_i = dT`` and the residual is
``Log(T_i^-1 T_j dT)`` in the decoupled ``[rotation, translation]`` tangent.

Graph files use g2o text records::

    VERTEX_SE3:QUAT id x y z qx qy qz qw
    EDGE_SE3:QUAT from to x y z qx qy qz qw I11 I12 .. I16 I22 .. I66

``EDGE_SE3:QUAT j i`` carries ``dT`` (g2o measures ``T_from^-1 T_to``) and the
upper triangle of a 6x6 information matrix in g2o's ``[translation,
rotation]`` order; only its diagonal is used. On reading, edges between
consecutive ids are odometry and every other edge is a loop closure.
"""

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve
from scipy.spatial.transform import Rotation

from .exceptions import ConfigurationError, ConnectivityError, PoseGraphError
from .se3 import PoseSE3, right_jacobian_inv, skew

logger: logging.Logger = logging.getLogger(name=__name__)

_LAMBDA_RANGE = (1e-12, 1e12)
_INITIAL_LAMBDA = 1e-4


class EdgeKind(StrEnum):
    """Origin of a relative-pose constraint."""

    ODOMETRY = "odometry"
    LOOP = "loop"


@dataclass(frozen=True, eq=False)
class Edge:
    """Relative-pose constraint between nodes ``i > j`` with diagonal weights."""

    i: int
    j: int
    measurement: PoseSE3
    kind: EdgeKind = EdgeKind.ODOMETRY
    weights: NDArray[np.float64] = field(default_factory=lambda: np.ones(6))

    def __post_init__(self) -> None:
        """Validate the index order and the weights."""
        if self.i <= self.j:
            raise PoseGraphError(f"edge ({self.i}, {self.j}) violates i > j")
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape != (6,) or np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise PoseGraphError(f"edge ({self.i}, {self.j}) needs six positive finite weights")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "kind", EdgeKind(self.kind))


@dataclass(frozen=True, eq=False)
class PoseGraph:
    """Trajectory nodes, odometry and loop edges, and the fixed gauge node."""

    nodes: tuple[PoseSE3, ...]
    edges: tuple[Edge, ...]
    gauge: int = 0

    def __post_init__(self) -> None:
        """Validate edge endpoints and the gauge index."""
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        n = len(self.nodes)
        if n == 0:
            raise PoseGraphError("pose graph has no nodes")
        if not 0 <= self.gauge < n:
            raise PoseGraphError(f"gauge node {self.gauge} does not exist")
        for edge in self.edges:
            if edge.i >= n:
                raise PoseGraphError(f"edge ({edge.i}, {edge.j}) references a missing node")

    @property
    def odometry(self) -> list[Edge]:
        """Odometry edges."""
        return [e for e in self.edges if e.kind is EdgeKind.ODOMETRY]

    @property
    def loops(self) -> list[Edge]:
        """Loop-closure edges."""
        return [e for e in self.edges if e.kind is EdgeKind.LOOP]

    def check_connected(self) -> None:
        """Raise ConnectivityError unless odometry edges link every node."""
        n = len(self.nodes)
        odometry = self.odometry
        rows = [e.i for e in odometry]
        cols = [e.j for e in odometry]
        adjacency = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        count, _ = connected_components(adjacency, directed=False)
        if count > 1:
            raise ConnectivityError(f"odometry edges split the {n} nodes into {count} components")

    def with_nodes(self, nodes: Sequence[PoseSE3]) -> "PoseGraph":
        """Same edges and gauge over new node values."""
        return PoseGraph(tuple(nodes), self.edges, self.gauge)


@dataclass(frozen=True)
class GraphConfig:
    """Iteration cap, convergence tolerance and the optional Huber kernel."""

    max_iterations: int = 100
    tolerance: float = 1e-10
    huber: bool = False
    huber_delta: float = 1.0

    def __post_init__(self) -> None:
        """Validate settings."""
        if self.max_iterations < 1:
            raise ConfigurationError("pose_graph.max_iterations must be at least 1")
        if not self.tolerance > 0:
            raise ConfigurationError("pose_graph.tolerance must be positive")
        if not self.huber_delta > 0:
            raise ConfigurationError("pose_graph.huber_delta must be positive")


@dataclass(frozen=True, eq=False)
class GraphResult:
    """Optimized nodes with the cost trace of accepted steps."""

    nodes: tuple[PoseSE3, ...]
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    cost_history: tuple[float, ...] = ()


def _error(edge: Edge, nodes: Sequence[PoseSE3]) -> PoseSE3:
    return nodes[edge.i].inverse() @ nodes[edge.j] @ edge.measurement


def residual(edge: Edge, nodes: Sequence[PoseSE3]) -> NDArray[np.float64]:
    """``Log(T_i^-1 T_j dT)`` as ``[rotation (rad), translation (m)]``."""
    return _error(edge, nodes).log()


def residual_jacobians(
    edge: Edge, nodes: Sequence[PoseSE3]
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """Residual and its 6x6 Jacobians w.r.t. right perturbations of ``T_i`` and ``T_j``."""
    error = _error(edge, nodes)
    r = error.log()
    jr_inv = right_jacobian_inv(r[:3])
    ti, tj = nodes[edge.i], nodes[edge.j]
    rel = ti.rotation.T @ tj.rotation
    dr = edge.measurement.rotation

    jac_i = np.zeros((6, 6))
    jac_i[:3, :3] = -jr_inv @ error.rotation.T
    jac_i[3:, :3] = skew(error.translation)
    jac_i[3:, 3:] = -np.eye(3)

    jac_j = np.zeros((6, 6))
    jac_j[:3, :3] = jr_inv @ dr.T
    jac_j[3:, :3] = -rel @ skew(edge.measurement.translation)
    jac_j[3:, 3:] = rel
    return r, jac_i, jac_j


def _robust_scale(whitened_norm: float, cfg: GraphConfig) -> tuple[float, float]:
    """IRLS scale and kernel cost for a whitened residual norm."""
    e = whitened_norm
    if not cfg.huber or e <= cfg.huber_delta:
        return 1.0, e * e
    return float(np.sqrt(cfg.huber_delta / e)), 2.0 * cfg.huber_delta * e - cfg.huber_delta**2


def total_cost(graph: PoseGraph, cfg: GraphConfig | None = None) -> float:
    """Weighted sum of squared residuals, Huber-robustified when enabled."""
    cfg = cfg or GraphConfig()
    cost = 0.0
    for edge in graph.edges:
        whitened = np.sqrt(edge.weights) * residual(edge, graph.nodes)
        cost += _robust_scale(float(np.linalg.norm(whitened)), cfg)[1]
    return cost


def _linearize(
    graph: PoseGraph, cfg: GraphConfig, columns: NDArray[np.int64]
) -> tuple[sparse.csc_matrix, NDArray[np.float64], float]:
    rows: list[NDArray[np.int64]] = []
    cols: list[NDArray[np.int64]] = []
    values: list[NDArray[np.float64]] = []
    stacked = np.zeros(6 * len(graph.edges))
    cost = 0.0
    block = np.arange(6)
    for k, edge in enumerate(graph.edges):
        r, jac_i, jac_j = residual_jacobians(edge, graph.nodes)
        sqrt_w = np.sqrt(edge.weights)
        scale, edge_cost = _robust_scale(float(np.linalg.norm(sqrt_w * r)), cfg)
        cost += edge_cost
        factor = scale * sqrt_w[:, None]
        stacked[6 * k : 6 * k + 6] = scale * sqrt_w * r
        for node, jac in ((edge.i, jac_i), (edge.j, jac_j)):
            if columns[node] < 0:
                continue
            rows.append(np.repeat(6 * k + block, 6))
            cols.append(np.tile(columns[node] + block, 6))
            values.append((factor * jac).reshape(-1))
    free = int(np.count_nonzero(columns >= 0)) * 6
    jacobian = sparse.coo_matrix(
        (
            np.concatenate(values) if values else np.zeros(0),
            (
                np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64),
                np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64),
            ),
        ),
        shape=(stacked.size, free),
    ).tocsc()
    return jacobian, stacked, cost


def _retract_all(
    nodes: Sequence[PoseSE3], delta: NDArray[np.float64], columns: NDArray[np.int64]
) -> tuple[PoseSE3, ...]:
    return tuple(
        pose if columns[k] < 0 else pose.retract(delta[columns[k] : columns[k] + 6])
        for k, pose in enumerate(nodes)
    )


def optimize(graph: PoseGraph, cfg: GraphConfig | None = None) -> GraphResult:
    """Levenberg-Marquardt over all nodes except the gauge.

    Each iteration solves ``(H + lambda diag(H)) dx = -g`` with ``H = J^T J``
    and right-perturbs every free node by its block of ``dx``. Steps that
    lower the cost are accepted and divide ``lambda`` by 10; rejected steps
    multiply it by 10. Stops once the gradient, the step or the relative
    cost decrease falls below ``cfg.tolerance``.

    Raises:
        ConnectivityError: Odometry edges leave a node disconnected
    """
    cfg = cfg or GraphConfig()
    graph.check_connected()
    n = len(graph.nodes)
    columns = np.full(n, -1, dtype=np.int64)
    free = [k for k in range(n) if k != graph.gauge]
    columns[free] = 6 * np.arange(len(free))

    nodes = graph.nodes
    jacobian, stacked, cost = _linearize(graph, cfg, columns)
    initial_cost = cost
    history = [cost]
    lam = _INITIAL_LAMBDA
    converged = False
    iterations = 0
    while iterations < cfg.max_iterations:
        gradient = jacobian.T @ stacked
        if cost <= cfg.tolerance or not free or float(np.max(np.abs(gradient))) <= cfg.tolerance:
            converged = True
            break
        iterations += 1
        hessian = (jacobian.T @ jacobian).tocsc()
        damping = lam * np.maximum(hessian.diagonal(), 1e-12)
        step = spsolve(hessian + sparse.diags(damping, format="csc"), -gradient)
        candidate = graph.with_nodes(_retract_all(nodes, step, columns))
        new_cost = total_cost(candidate, cfg)
        if new_cost < cost:
            decrease = cost - new_cost
            nodes, graph = candidate.nodes, candidate
            jacobian, stacked, cost = _linearize(graph, cfg, columns)
            history.append(cost)
            lam = max(lam / 10.0, _LAMBDA_RANGE[0])
            logger.debug(msg=f"LM iteration {iterations}: cost {cost:.6g}, lambda {lam:.1e}")
            if decrease <= cfg.tolerance * max(history[-2], 1.0) or float(np.linalg.norm(step)) <= cfg.tolerance:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > _LAMBDA_RANGE[1]:
                logger.warning(msg=f"LM damping exceeded {_LAMBDA_RANGE[1]:g} at cost {cost:.6g}")
                break

    logger.info(
        msg=f"Pose graph: {n} nodes, {len(graph.edges)} edges, cost {initial_cost:.6g} -> {cost:.6g} "
        f"in {iterations} iterations (converged={converged})"
    )
    return GraphResult(nodes, cost, initial_cost, iterations, converged, tuple(history))


def graph_from_trajectory(
    odometry: Sequence[PoseSE3],
    loops: Iterable[tuple[int, int, PoseSE3]] = (),
    gauge: int = 0,
) -> PoseGraph:
    """Chain consecutive odometry poses and append loop edges ``(i, j, dT)``."""
    edges = [
        Edge(k + 1, k, odometry[k].inverse() @ odometry[k + 1], EdgeKind.ODOMETRY)
        for k in range(len(odometry) - 1)
    ]
    edges.extend(Edge(i, j, measurement, EdgeKind.LOOP) for i, j, measurement in loops)
    return PoseGraph(tuple(odometry), tuple(edges), gauge)


def _quaternion_fields(pose: PoseSE3) -> str:
    values = [*pose.translation, *Rotation.from_matrix(pose.rotation).as_quat()]
    return " ".join(f"{v:.17g}" for v in values)


def _pose_from_fields(values: Sequence[str]) -> PoseSE3:
    x, y, z, qx, qy, qz, qw = (float(v) for v in values)
    return PoseSE3(Rotation.from_quat([qx, qy, qz, qw]).as_matrix(), [x, y, z])


def write_g2o(graph: PoseGraph, path: Path | str) -> Path:
    """Write nodes and edges as g2o ``SE3:QUAT`` records.

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"VERTEX_SE3:QUAT {k} {_quaternion_fields(pose)}" for k, pose in enumerate(graph.nodes)]
    upper = np.triu_indices(6)
    for edge in graph.edges:
        information = np.diag(np.concatenate([edge.weights[3:], edge.weights[:3]]))
        info = " ".join(f"{v:.17g}" for v in information[upper])
        lines.append(f"EDGE_SE3:QUAT {edge.j} {edge.i} {_quaternion_fields(edge.measurement)} {info}")
    lines.append(f"FIX {graph.gauge}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_g2o(path: Path | str) -> PoseGraph:
    """Parse a g2o file written by :func:`write_g2o` or any ``SE3:QUAT`` graph.

    Vertex ids must be ``0..N-1``. An edge whose ``from`` id exceeds its
    ``to`` id is inverted to keep ``i > j``. A ``FIX`` record sets the gauge.

    Raises:
        PoseGraphError: Malformed records or non-contiguous vertex ids
    """
    path = Path(path)
    vertices: dict[int, PoseSE3] = {}
    edges: list[Edge] = []
    gauge = 0
    upper = np.triu_indices(6)
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        data = raw.split()
        if not data or data[0].startswith("#"):
            continue
        try:
            if data[0] == "VERTEX_SE3:QUAT":
                vertices[int(data[1])] = _pose_from_fields(data[2:9])
            elif data[0] == "EDGE_SE3:QUAT":
                source, target = int(data[1]), int(data[2])
                measurement = _pose_from_fields(data[3:10])
                weights = np.ones(6)
                if len(data) >= 31:
                    information = np.zeros((6, 6))
                    information[upper] = [float(v) for v in data[10:31]]
                    diagonal = np.diag(information)
                    weights = np.concatenate([diagonal[3:], diagonal[:3]])
                if source > target:
                    source, target = target, source
                    measurement = measurement.inverse()
                kind = EdgeKind.ODOMETRY if target - source == 1 else EdgeKind.LOOP
                edges.append(Edge(target, source, measurement, kind, weights))
            elif data[0] == "FIX":
                gauge = int(data[1])
            else:
                logger.debug(msg=f"{path}:{line_no}: skipping unsupported record {data[0]}")
        except (ValueError, IndexError) as err:
            raise PoseGraphError(f"{path}:{line_no}: malformed {data[0]} record: {err}") from err

    if sorted(vertices) != list(range(len(vertices))):
        raise PoseGraphError(f"{path}: vertex ids must be 0..N-1")
    return PoseGraph(tuple(vertices[k] for k in range(len(vertices))), tuple(edges), gauge)


def endpoint_error(nodes: Sequence[PoseSE3], truth: Sequence[PoseSE3]) -> float:
    """Translation error of the last node against ground truth."""
    return float(np.linalg.norm(nodes[-1].translation - truth[-1].translation))

