"""Rigid-body poses on SE(3) with a decoupled SO(3) x R^3 tangent space.

Tangent vectors are ordered ``[rotation (3), translation (3)]``. ``exp`` and
``log`` treat the two blocks independently, so ``log(T)`` is
``(Log(R), t)`` and the right perturbation ``T.retract(d)`` equals
``T @ PoseSE3.exp(d)``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .exceptions import PoseValidationError

logger: logging.Logger = logging.getLogger(name=__name__)

_SMALL_ANGLE = 1e-8


def skew(v: ArrayLike) -> NDArray[np.float64]:
    """Return the 3x3 cross-product matrix of ``v``."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: ArrayLike) -> NDArray[np.float64]:
    """Map a rotation vector to a rotation matrix."""
    return Rotation.from_rotvec(np.asarray(phi, dtype=np.float64)).as_matrix()


def so3_log(rotation: ArrayLike) -> NDArray[np.float64]:
    """Map a rotation matrix to its rotation vector.

    Goes through the unit quaternion, which stays well conditioned as the
    angle approaches pi.
    """
    return Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_rotvec()


def right_jacobian_inv(phi: ArrayLike) -> NDArray[np.float64]:
    """Inverse right Jacobian of SO(3) at rotation vector ``phi``."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    phi_x = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * phi_x + phi_x @ phi_x / 12.0
    coeff = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * phi_x + coeff * (phi_x @ phi_x)


def rotation_error(rotation: ArrayLike) -> tuple[float, float]:
    """Return (max |R^T R - I|, |det R - 1|) for a candidate rotation."""
    r = np.asarray(rotation, dtype=np.float64)
    ortho = float(np.max(np.abs(r.T @ r - np.eye(3))))
    det = float(abs(np.linalg.det(r) - 1.0))
    return ortho, det


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """A rigid transform ``x -> rotation @ x + translation`` in meters."""

    rotation: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    translation: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        """Coerce fields to read-only float64 arrays of the right shape."""
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
        if translation.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {translation.shape}")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "PoseSE3":
        """Return the identity transform."""
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "PoseSE3":
        """Build a pose from a 4x4 homogeneous or 3x4 [R|t] matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in {(4, 4), (3, 4)}:
            raise ValueError(f"expected a 4x4 or 3x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(
        cls, yaw_deg: float, translation: ArrayLike = (0.0, 0.0, 0.0)
    ) -> "PoseSE3":
        """Rotation about +z by ``yaw_deg`` degrees followed by a translation."""
        rotation = Rotation.from_euler("z", yaw_deg, degrees=True).as_matrix()
        return cls(rotation, np.asarray(translation, dtype=np.float64))

    @classmethod
    def exp(cls, xi: ArrayLike) -> "PoseSE3":
        """Decoupled exponential of a ``[rotation, translation]`` 6-vector."""
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(so3_exp(xi[:3]), xi[3:])

    def log(self) -> NDArray[np.float64]:
        """Decoupled logarithm, inverse of :meth:`exp`."""
        return np.concatenate([so3_log(self.rotation), self.translation])

    def as_matrix(self) -> NDArray[np.float64]:
        """Return the 4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "PoseSE3":
        """Return the inverse transform."""
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        """Compose: ``(self @ other)(x) = self(other(x))``."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def retract(self, delta: ArrayLike) -> "PoseSE3":
        """Right perturbation ``self @ exp(delta)``."""
        return self @ PoseSE3.exp(delta)

    def check(self, tol: float = 1e-9, record: int | None = None) -> "PoseSE3":
        """Raise PoseValidationError unless the rotation is proper within ``tol``.

        Returns:
            The pose itself, for chaining.
        """
        if not (np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.translation))):
            raise PoseValidationError("pose contains non-finite values", record=record)
        ortho, det = rotation_error(self.rotation)
        if ortho > tol:
            raise PoseValidationError(
                f"rotation is not orthonormal (max |R^T R - I| = {ortho:.3g})",
                record=record,
            )
        if det > tol:
            raise PoseValidationError(
                f"rotation determinant is {np.linalg.det(self.rotation):.6f}, expected 1",
                record=record,
            )
        return self

    def is_close(self, other: "PoseSE3", atol: float = 1e-9) -> bool:
        """Entry-wise comparison of rotation and translation."""
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )
