"""
Small-dimension algebra for the immersed-body solver.

Skew operators, the vector-part quaternion chart, frame changes between the
body frame (y) and the world frame (x = Q y + h), and the 12-dim rigid state.
"""

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import ChartExitError, SingularSystemError

logger = logging.getLogger(__name__)

QUAT_TOL = 1e-12


def skew(y: np.ndarray) -> np.ndarray:
    """
    Antisymmetric matrix S(y) with S(y) x = y x x.

    Args:
        y: Vector of length 3

    Returns:
        3x3 array
    """
    y = np.asarray(y, dtype=float)
    return np.array([
        [0.0, -y[2], y[1]],
        [y[2], 0.0, -y[0]],
        [-y[1], y[0], 0.0],
    ])


def skew_batch(y: np.ndarray) -> np.ndarray:
    """Stacked skew matrices for an (n, 3) array."""
    y = np.asarray(y, dtype=float)
    out = np.zeros(y.shape[:-1] + (3, 3))
    out[..., 0, 1] = -y[..., 2]
    out[..., 0, 2] = y[..., 1]
    out[..., 1, 0] = y[..., 2]
    out[..., 1, 2] = -y[..., 0]
    out[..., 2, 0] = -y[..., 1]
    out[..., 2, 1] = y[..., 0]
    return out


def quat_scalar(q: np.ndarray) -> float:
    """
    Nonnegative scalar part q0 = sqrt(1 - |q|^2).

    Raises:
        ValueError: If |q| > 1 beyond QUAT_TOL
    """
    q = np.asarray(q, dtype=float)
    n2 = float(q @ q)
    if n2 > (1.0 + QUAT_TOL) ** 2:
        raise ValueError(f"Quaternion vector part outside the unit ball: |q| = {np.sqrt(n2):.15g}")
    return float(np.sqrt(max(0.0, 1.0 - n2)))


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """
    Rotation matrix R(q) for the chart q0 >= 0.

    R = (q0^2 - |q|^2) Id + 2 q q^T + 2 q0 S(q)

    Args:
        q: Vector part of a unit quaternion, |q| <= 1

    Returns:
        3x3 orthogonal matrix with determinant +1
    """
    q = np.asarray(q, dtype=float)
    q0 = quat_scalar(q)
    return (q0 * q0 - q @ q) * np.eye(3) + 2.0 * np.outer(q, q) + 2.0 * q0 * skew(q)


def rotation_to_quat(Q: np.ndarray) -> np.ndarray:
    """
    Vector part of the quaternion of Q, taking q0 >= 0.

    Raises:
        ValueError: If Q is not a rotation
    """
    Q = np.asarray(Q, dtype=float)
    if not np.allclose(Q.T @ Q, np.eye(3), atol=1e-9) or np.linalg.det(Q) < 0:
        raise ValueError("Matrix is not a proper rotation")
    q0 = 0.5 * np.sqrt(max(0.0, 1.0 + np.trace(Q)))
    if q0 > 1e-6:
        return np.array([Q[2, 1] - Q[1, 2], Q[0, 2] - Q[2, 0], Q[1, 0] - Q[0, 1]]) / (4.0 * q0)
    # half-turn: q q^T = (Q + Id) / 2
    S = 0.5 * (Q + np.eye(3))
    k = int(np.argmax(np.diag(S)))
    q = S[:, k] / np.sqrt(S[k, k])
    return q


def inv3(A: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """
    Inverse of a 3x3 matrix with singularity detection.

    Raises:
        SingularSystemError: If |det A| is below rtol * ||A||^3
    """
    A = np.asarray(A, dtype=float)
    det = float(np.linalg.det(A))
    scale = float(np.linalg.norm(A)) ** 3
    if scale == 0.0 or abs(det) <= rtol * scale:
        raise SingularSystemError("3x3 matrix is singular", condition=float(np.linalg.cond(A)))
    return np.linalg.inv(A)


@dataclass(frozen=True, eq=False)
class RigidState:
    """Body position h, attitude q, body-frame linear velocity l and angular velocity r."""
    h: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.zeros(3))
    l: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ('h', 'q', 'l', 'r'):
            value = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(value)):
                raise ValueError(f"RigidState.{name} has non-finite entries")
            object.__setattr__(self, name, value)
        quat_scalar(self.q)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.h, self.q, self.l, self.r])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> 'RigidState':
        x = np.asarray(x, dtype=float)
        if x.shape != (12,):
            raise ValueError(f"RigidState vector must have 12 entries, got {x.shape}")
        return cls(h=x[0:3], q=x[3:6], l=x[6:9], r=x[9:12])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.q)


def body_world_transform(
    state: RigidState,
    vec: np.ndarray,
    kind: str = 'point',
    inverse: bool = False
) -> np.ndarray:
    """
    Map body-frame points or vectors to the world frame, or back.

    Points use x = Q y + h, vectors (velocities) use u = Q v.

    Args:
        state: Rigid state providing h and q
        vec: Array of shape (3,) or (n, 3)
        kind: 'point' or 'vector'
        inverse: Map world to body instead

    Returns:
        Transformed array with the shape of vec
    """
    if kind not in ('point', 'vector'):
        raise ValueError(f"kind must be 'point' or 'vector', got {kind!r}")
    Q = state.rotation
    v = np.asarray(vec, dtype=float)
    if not inverse:
        out = v @ Q.T
        return out + state.h if kind == 'point' else out
    if kind == 'point':
        v = v - state.h
    return v @ Q


def check_chart(q: np.ndarray, margin: float = 1e-9) -> None:
    """
    Raises:
        ChartExitError: If |q| has reached the chart boundary
    """
    nq = float(np.linalg.norm(q))
    if not np.isfinite(nq) or nq >= 1.0 - margin:
        raise ChartExitError(f"attitude left the chart: |q| = {nq:.15g}")


def renormalize_quat(q: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Project (q0, q) back onto the unit 3-sphere after a step.

    The scalar part is rebuilt from the chart, so the only possible drift is
    |q| slightly above one; that is pulled back to the sphere and the amount
    removed is returned.
    """
    q = np.asarray(q, dtype=float)
    nq = float(np.linalg.norm(q))
    if nq <= 1.0:
        return q, 0.0
    return q / nq, nq - 1.0


def kinematics_rhs(state: RigidState) -> Tuple[np.ndarray, np.ndarray]:
    """
    Position and attitude rates in the vector-part chart.

    h' = (1 - |q|^2) l + 2 q0 q x l + (l.q) q - q x (l x q)
    q' = (q0 r + q x r) / 2

    The triple product is associated to the right, which makes h' = R(q) l.

    Raises:
        ChartExitError: If |q| = 1
    """
    q, l, r = state.q, state.l, state.r
    check_chart(q)
    q0 = quat_scalar(q)
    hdot = (1.0 - q @ q) * l + 2.0 * q0 * np.cross(q, l) + (l @ q) * q - np.cross(q, np.cross(l, q))
    qdot = 0.5 * (q0 * r + np.cross(q, r))
    return hdot, qdot
