"""
Lagrangian vorticity carriers.

Markers carry a frozen initial vorticity and are advected with the flow map
and its Jacobian G; the current vorticity is G w0 (Cauchy formula). The
rotational velocity eta is a regularized Biot-Savart sum plus a boundary
correction that cancels its normal trace on the body.
"""

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core_math import skew, skew_batch
from .errors import CollisionError
from .geometry import SurfaceMesh
from .potential import ExteriorNeumannSolver, HarmonicPotential, PotentialTables, get_solver

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
COLLISION_FACTOR = 0.2
POINT_CHUNK = 512


@dataclass(frozen=True, eq=False)
class MarkerSet:
    """
    Vorticity markers.

    x0 initial positions, X current positions, G flow-map Jacobians,
    omega0 frozen initial vorticity, grad_omega0 its gradient
    (grad_omega0[k, i, j] = d omega0_i / dx_j), vol quadrature volumes.
    """
    x0: np.ndarray
    X: np.ndarray
    G: np.ndarray
    omega0: np.ndarray
    grad_omega0: np.ndarray
    vol: np.ndarray
    eps: float
    spacing: float
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def empty(cls, eps: float = 0.1, spacing: float = 0.05) -> 'MarkerSet':
        return cls(x0=np.zeros((0, 3)), X=np.zeros((0, 3)), G=np.zeros((0, 3, 3)), omega0=np.zeros((0, 3)),
                   grad_omega0=np.zeros((0, 3, 3)), vol=np.zeros(0), eps=eps, spacing=spacing,
                   diagnostics={'n_markers': 0, 'div_residual': 0.0, 'total_vorticity': [0.0, 0.0, 0.0]})

    @property
    def n(self) -> int:
        return len(self.vol)

    @property
    def alpha(self) -> np.ndarray:
        """Vortex strengths (current vorticity times volume)."""
        return self.vorticity() * self.vol[:, None]

    def vorticity(self) -> np.ndarray:
        return cauchy_vorticity(self.G, self.omega0)

    def jacobian_gradient(self, neighbours: int = 7) -> np.ndarray:
        """
        dG_ij / dx0_l by least squares over the nearest markers in the initial configuration.

        Returns:
            Array (n, 3, 3, 3) indexed [k, i, j, l]; zero when fewer than four markers
        """
        if self.n < 4:
            return np.zeros((self.n, 3, 3, 3))
        k = min(self.n, neighbours)
        _, idx = cKDTree(self.x0).query(self.x0, k=k)
        A = self.x0[idx] - self.x0[:, None, :]
        B = (self.G[idx] - self.G[:, None, :, :]).reshape(self.n, k, 9)
        coef = np.linalg.pinv(A) @ B
        return coef.reshape(self.n, 3, 3, 3).transpose(0, 2, 3, 1)

    def vorticity_gradient(self) -> np.ndarray:
        """d omega / dy at the markers: (dG/dx0 omega0 + G grad(omega0)) G^-1."""
        if not self.n:
            return np.zeros((0, 3, 3))
        lagrangian = (np.einsum('kijl,kj->kil', self.jacobian_gradient(), self.omega0)
                      + np.einsum('kij,kjl->kil', self.G, self.grad_omega0))
        return lagrangian @ np.linalg.inv(self.G)

    def vorticity_curl(self) -> np.ndarray:
        D = self.vorticity_gradient()
        return np.stack([D[:, 2, 1] - D[:, 1, 2], D[:, 0, 2] - D[:, 2, 0], D[:, 1, 0] - D[:, 0, 1]], axis=1)

    def det_G(self) -> np.ndarray:
        return np.linalg.det(self.G) if self.n else np.zeros(0)

    def total_vorticity(self) -> np.ndarray:
        return self.alpha.sum(axis=0)

    def with_state(self, X: np.ndarray, G: np.ndarray) -> 'MarkerSet':
        return replace(self, X=np.asarray(X, dtype=float), G=np.asarray(G, dtype=float))

    def reset(self) -> 'MarkerSet':
        """Markers back at their initial positions with G = Id."""
        return self.with_state(self.x0.copy(), np.broadcast_to(np.eye(3), (self.n, 3, 3)).copy())

    def scaled(self, factor: float) -> 'MarkerSet':
        """Same markers with the initial vorticity multiplied by factor."""
        return replace(self, omega0=factor * self.omega0, grad_omega0=factor * self.grad_omega0)


def cauchy_vorticity(G: np.ndarray, omega0: np.ndarray) -> np.ndarray:
    """Current vorticity G omega0 for one marker or a stack of markers."""
    return np.einsum('...ij,...j->...i', G, omega0)


def _core(d: np.ndarray, eps: float):
    s = np.einsum('...k,...k->...', d, d)
    e2 = eps * eps
    base = s + e2
    g = (s + 2.5 * e2) / base ** 2.5
    return s, e2, base, g


def blob_velocity(points: np.ndarray, X: np.ndarray, alpha: np.ndarray, eps: float) -> np.ndarray:
    """Regularized Biot-Savart sum (1/4pi) sum g(|d|^2) alpha x d, d = y - X_k."""
    pts = np.atleast_2d(points)
    out = np.zeros((len(pts), 3))
    if not len(X):
        return out
    for start in range(0, len(pts), POINT_CHUNK):
        d = pts[start:start + POINT_CHUNK, None, :] - X[None, :, :]
        _, _, _, g = _core(d, eps)
        out[start:start + POINT_CHUNK] = np.einsum('pk,pki->pi', g, np.cross(alpha[None, :, :], d)) / FOUR_PI
    return out


def blob_velocity_gradient(points: np.ndarray, X: np.ndarray, alpha: np.ndarray, eps: float) -> np.ndarray:
    """Analytic d(eta_BS)_i / dy_j of the regularized Biot-Savart sum."""
    pts = np.atleast_2d(points)
    out = np.zeros((len(pts), 3, 3))
    if not len(X):
        return out
    S_alpha = skew_batch(alpha)
    for start in range(0, len(pts), POINT_CHUNK):
        d = pts[start:start + POINT_CHUNK, None, :] - X[None, :, :]
        s, e2, base, g = _core(d, eps)
        dg = base ** -2.5 - 2.5 * (s + 2.5 * e2) * base ** -3.5
        cross = np.cross(alpha[None, :, :], d)
        out[start:start + POINT_CHUNK] = (
            2.0 * np.einsum('pk,pki,pkj->pij', dg, cross, d) + np.einsum('pk,kij->pij', g, S_alpha)
        ) / FOUR_PI
    return out


def blob_vorticity(points: np.ndarray, X: np.ndarray, alpha: np.ndarray, eps: float) -> np.ndarray:
    """Mollified vorticity sum zeta_eps(y - X_k) alpha_k, zeta_eps = 15 eps^4 / (8 pi (s + eps^2)^3.5)."""
    pts = np.atleast_2d(points)
    out = np.zeros((len(pts), 3))
    if not len(X):
        return out
    for start in range(0, len(pts), POINT_CHUNK):
        d = pts[start:start + POINT_CHUNK, None, :] - X[None, :, :]
        s, e2, base, _ = _core(d, eps)
        zeta = 15.0 * e2 * e2 / (8.0 * np.pi * base ** 3.5)
        out[start:start + POINT_CHUNK] = zeta @ alpha
    return out


def blob_potential(points: np.ndarray, X: np.ndarray, source: np.ndarray, eps: float) -> np.ndarray:
    """Regularized Newtonian potential sum G_eps(y - X_k) q_k, G_eps = (s + 1.5 eps^2) / (4 pi (s + eps^2)^1.5)."""
    pts = np.atleast_2d(points)
    out = np.zeros(len(pts))
    if not len(X):
        return out
    for start in range(0, len(pts), POINT_CHUNK):
        d = pts[start:start + POINT_CHUNK, None, :] - X[None, :, :]
        s, e2, base, _ = _core(d, eps)
        out[start:start + POINT_CHUNK] = ((s + 1.5 * e2) / (FOUR_PI * base ** 1.5)) @ source
    return out


def blob_potential_gradient(points: np.ndarray, X: np.ndarray, source: np.ndarray, eps: float) -> np.ndarray:
    """Gradient of blob_potential: -(1/4pi) g(s) d summed with weights q_k."""
    pts = np.atleast_2d(points)
    out = np.zeros((len(pts), 3))
    if not len(X):
        return out
    for start in range(0, len(pts), POINT_CHUNK):
        d = pts[start:start + POINT_CHUNK, None, :] - X[None, :, :]
        _, _, _, g = _core(d, eps)
        out[start:start + POINT_CHUNK] = -np.einsum('pk,pki,k->pi', g, d, source) / FOUR_PI
    return out


@dataclass
class EtaField:
    """Rotational velocity: Biot-Savart sum plus the gradient of a harmonic correction."""
    markers: MarkerSet
    correction: Optional[HarmonicPotential]
    flux_imbalance: float = 0.0

    def value(self, points: np.ndarray) -> np.ndarray:
        m = self.markers
        out = blob_velocity(points, m.X, m.alpha, m.eps)
        if self.correction is not None:
            out += self.correction.gradient(points)
        return out

    def gradient(self, points: np.ndarray) -> np.ndarray:
        m = self.markers
        out = blob_velocity_gradient(points, m.X, m.alpha, m.eps)
        if self.correction is not None:
            out += self.correction.hessian(points)
        return out

    def boundary_value(self, mesh: SurfaceMesh) -> np.ndarray:
        """Fluid-side eta at the panel centroids."""
        m = self.markers
        out = blob_velocity(mesh.centroids, m.X, m.alpha, m.eps)
        if self.correction is not None:
            out += self.correction.boundary_gradients()
        return out


def reconstruct_eta(markers: MarkerSet, mesh: SurfaceMesh, solver: Optional[ExteriorNeumannSolver] = None,
                    flux_rtol: float = 1e-6) -> EtaField:
    """
    Div-curl reconstruction with eta . n = 0 on the body and eta -> 0 at infinity.

    The correction potential has Neumann data -eta_BS . n; the discrete net
    flux of that data is removed uniformly and logged when it is not small.
    """
    if not markers.n:
        return EtaField(markers=markers, correction=None)
    solver = solver or get_solver(mesh)
    u_bs = blob_velocity(mesh.centroids, markers.X, markers.alpha, markers.eps)
    data = -np.einsum('nk,nk->n', u_bs, mesh.normals)
    mean = float(data @ mesh.areas) / mesh.total_area
    scale = float(np.abs(data).max())
    if scale > 0 and abs(mean) > flux_rtol * scale:
        logger.warning(f"Biot-Savart flux imbalance {mean:.3e} (relative {abs(mean) / scale:.3e}) removed")
    data = data - mean
    return EtaField(markers=markers, correction=HarmonicPotential(solver, solver.solve(data), data),
                    flux_imbalance=mean)


class FlowField:
    """
    Full body-frame velocity v = eta + sum l grad phi + r grad varphi + w grad psi.

    Evaluators cover values and spatial gradients at exterior points, plus the
    fluid-side trace at the panel centroids.
    """

    def __init__(self, tables: PotentialTables, l, r, w, markers: Optional[MarkerSet] = None,
                 eta: Optional[EtaField] = None):
        self.tables = tables
        self.l = np.asarray(l, dtype=float)
        self.r = np.asarray(r, dtype=float)
        self.w = np.zeros(tables.m) if w is None else np.asarray(w, dtype=float)
        self.markers = markers if markers is not None else MarkerSet.empty()
        if eta is None:
            eta = reconstruct_eta(self.markers, tables.mesh, tables.solver)
        self.eta = eta

    @property
    def mesh(self) -> SurfaceMesh:
        return self.tables.mesh

    def potential_velocity(self, points: np.ndarray) -> np.ndarray:
        return self.tables.velocity(self.l, self.r, self.w, points)

    def velocity(self, points: np.ndarray) -> np.ndarray:
        return self.potential_velocity(points) + self.eta.value(points)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        return self.tables.velocity_gradient(self.l, self.r, self.w, points) + self.eta.gradient(points)

    def boundary_velocity(self) -> np.ndarray:
        return self.tables.boundary_velocity(self.l, self.r, self.w) + self.eta.boundary_value(self.mesh)

    def relative_velocity(self, points: np.ndarray) -> np.ndarray:
        """v - l - r x y."""
        pts = np.atleast_2d(points)
        return self.velocity(pts) - self.l - np.cross(self.r, pts)

    def vorticity(self, points: np.ndarray) -> np.ndarray:
        m = self.markers
        return blob_vorticity(points, m.X, m.alpha, m.eps)


# ---------------------------------------------------------------------------
# seeding


def _blob_field(desc: Dict[str, Any]) -> Tuple[Callable[[np.ndarray], np.ndarray], float]:
    """curl(psi a) with the bump psi = (1 - |d|^2/R^2)^3."""
    c = np.asarray(desc.get('center', [0.0, 0.0, 0.0]), dtype=float)
    R = float(desc['radius'])
    a = np.asarray(desc.get('vector', [0.0, 0.0, 1.0]), dtype=float)
    strength = float(desc.get('strength', 1.0))

    def field_fn(y):
        d = np.atleast_2d(y) - c
        s = np.einsum('ij,ij->i', d, d) / (R * R)
        grad_psi = np.where((s < 1.0)[:, None], -6.0 * ((1.0 - s) ** 2)[:, None] * d / (R * R), 0.0)
        return strength * np.cross(grad_psi, a)
    return field_fn, R


def _ring_field(desc: Dict[str, Any]) -> Tuple[Callable[[np.ndarray], np.ndarray], float]:
    """Azimuthal vortex ring with a smooth (1 - (rho/core)^2)^3 core."""
    c = np.asarray(desc.get('center', [0.0, 0.0, 0.0]), dtype=float)
    axis = np.asarray(desc.get('axis', [0.0, 0.0, 1.0]), dtype=float)
    axis = axis / np.linalg.norm(axis)
    R = float(desc['ring_radius'])
    core = float(desc['core_radius'])
    if not 0 < core < R:
        raise ValueError("ring core radius must be positive and smaller than the ring radius")
    strength = float(desc.get('strength', 1.0))

    def field_fn(y):
        d = np.atleast_2d(y) - c
        z = d @ axis
        perp = d - z[:, None] * axis
        rho = np.linalg.norm(perp, axis=1)
        dist2 = ((rho - R) ** 2 + z * z) / (core * core)
        amp = np.where(dist2 < 1.0, (1.0 - dist2) ** 3, 0.0)
        e_theta = np.cross(axis[None, :], perp) / np.maximum(rho, 1e-300)[:, None]
        return strength * amp[:, None] * e_theta
    return field_fn, R + core


def _hill_field(desc: Dict[str, Any]) -> Tuple[Callable[[np.ndarray], np.ndarray], float]:
    """Hill-type azimuthal vorticity A (1 - |d|^2/R^2)^2 (axis x d) in a ball."""
    c = np.asarray(desc.get('center', [0.0, 0.0, 0.0]), dtype=float)
    axis = np.asarray(desc.get('axis', [0.0, 0.0, 1.0]), dtype=float)
    axis = axis / np.linalg.norm(axis)
    R = float(desc['radius'])
    strength = float(desc.get('strength', 1.0))

    def field_fn(y):
        d = np.atleast_2d(y) - c
        s = np.einsum('ij,ij->i', d, d) / (R * R)
        amp = np.where(s < 1.0, (1.0 - s) ** 2, 0.0)
        return strength * amp[:, None] * np.cross(axis[None, :], d)
    return field_fn, R


SEED_FIELDS = {'blob': _blob_field, 'ring': _ring_field, 'hill': _hill_field}


def _field_gradient(field_fn: Callable, pts: np.ndarray, step: float) -> np.ndarray:
    """Central differences, out[k, i, j] = d f_i / dx_j."""
    out = np.empty((len(pts), 3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        out[:, :, j] = (field_fn(pts + e) - field_fn(pts - e)) / (2.0 * step)
    return out


def seed_markers(
    desc: Dict[str, Any],
    spacing: float,
    mesh: Optional[SurfaceMesh] = None,
    d_min: Optional[float] = None,
    eps: Optional[float] = None,
    div_rtol: float = 1e-4
) -> MarkerSet:
    """
    Regular lattice of markers over the support of an initial vorticity field.

    Args:
        desc: Field descriptor: kind zero, blob, ring, hill, or custom
            (with 'field' callable, 'support_radius' and 'center')
        spacing: Lattice spacing h; every marker gets volume h^3
        mesh: Body surface used for the clearance check
        d_min: Required clearance from the body (default 2 * spacing)
        eps: Blob radius (default 2 * spacing)
        div_rtol: Largest accepted relative discrete divergence

    Raises:
        ValueError: If the support comes within d_min of the body or the
            field has nonzero divergence
    """
    if spacing <= 0:
        raise ValueError(f"marker spacing must be positive, got {spacing}")
    eps = 2.0 * spacing if eps is None else float(eps)
    if eps <= 0:
        raise ValueError(f"blob radius must be positive, got {eps}")
    d_min = 2.0 * spacing if d_min is None else float(d_min)
    kind = desc.get('kind', 'zero')
    if kind == 'zero' or float(desc.get('strength', 1.0)) == 0.0:
        return MarkerSet.empty(eps=eps, spacing=spacing)
    if kind == 'custom':
        field_fn, radius = desc['field'], float(desc['support_radius'])
    elif kind in SEED_FIELDS:
        field_fn, radius = SEED_FIELDS[kind](desc)
    else:
        raise ValueError(f"Unknown vorticity seed kind: {kind}")

    center = np.asarray(desc.get('center', [0.0, 0.0, 0.0]), dtype=float)
    n_side = int(np.ceil(radius / spacing))
    offsets = spacing * np.arange(-n_side, n_side + 1, dtype=float)
    grid = np.stack(np.meshgrid(offsets, offsets, offsets, indexing='ij'), axis=-1).reshape(-1, 3)
    grid = grid[np.linalg.norm(grid, axis=1) < radius] + center
    omega0 = np.asarray(field_fn(grid), dtype=float)
    keep = np.linalg.norm(omega0, axis=1) > 0.0
    pts, omega0 = grid[keep], omega0[keep]
    if not len(pts):
        return MarkerSet.empty(eps=eps, spacing=spacing)

    if mesh is not None:
        clearance = mesh.distance_to_surface(pts)
        if np.any(clearance < d_min) or np.any(mesh.contains(pts)):
            raise ValueError(f"vorticity support comes within {d_min} of the body (closest {clearance.min():.4g})")

    step = 1e-5 * radius
    grad = _field_gradient(field_fn, pts, step)
    div = np.trace(grad, axis1=1, axis2=2)
    div_residual = float(np.abs(div).max() * radius / np.linalg.norm(omega0, axis=1).max())
    if div_residual > div_rtol:
        raise ValueError(f"initial vorticity is not divergence-free (relative residual {div_residual:.3e})")

    vol = np.full(len(pts), spacing ** 3)
    total = (omega0 * vol[:, None]).sum(axis=0)
    diagnostics = {'n_markers': int(len(pts)), 'div_residual': div_residual, 'total_vorticity': total.tolist(),
                   'support_volume': float(vol.sum())}
    logger.info(f"seeded {len(pts)} {kind} markers, divergence residual {div_residual:.2e}, "
                f"total vorticity {np.linalg.norm(total):.2e}")
    G = np.broadcast_to(np.eye(3), (len(pts), 3, 3)).copy()
    return MarkerSet(x0=pts.copy(), X=pts.copy(), G=G, omega0=omega0, grad_omega0=grad, vol=vol,
                     eps=eps, spacing=spacing, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# transport


def marker_rates(X: np.ndarray, G: np.ndarray, v: np.ndarray, grad_v: np.ndarray,
                 l: np.ndarray, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """dX/ds = v - l - r x X and dG/ds = (grad v - S(r)) G."""
    Xdot = v - l - np.cross(r, X)
    Gdot = np.einsum('kij,kjl->kil', grad_v - skew(r), G)
    return Xdot, Gdot


def check_clearance(markers: MarkerSet, mesh: SurfaceMesh, factor: float = COLLISION_FACTOR) -> None:
    """
    Raises:
        CollisionError: If a marker is inside the body or closer than factor * spacing
    """
    if not markers.n:
        return
    d = mesh.distance_to_surface(markers.X)
    tol = factor * markers.spacing
    k = int(np.argmin(d))
    if d[k] < tol:
        raise CollisionError(f"marker {k} reached the body (distance {d[k]:.3e} < {tol:.3e})", k, float(d[k]))
    inside = mesh.contains(markers.X)
    if inside.any():
        k = int(np.nonzero(inside)[0][0])
        raise CollisionError(f"marker {k} entered the body", k, float(d[k]))


def advect_markers(markers: MarkerSet, flow, l, r, dt: float, mesh: Optional[SurfaceMesh] = None) -> MarkerSet:
    """
    One RK4 step of the flow map and its Jacobian in a frozen velocity field.

    Args:
        markers: Current markers
        flow: Object with velocity(points) and gradient(points)
        l, r: Body velocities, constant over the step
        dt: Step size
        mesh: Body surface for the collision check (defaults to flow.mesh)

    Raises:
        ValueError: If dt <= 0
        CollisionError: If a marker ends too close to the body
    """
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if not markers.n:
        return markers
    l = np.asarray(l, dtype=float)
    r = np.asarray(r, dtype=float)

    def rates(X, G):
        return marker_rates(X, G, flow.velocity(X), flow.gradient(X), l, r)

    X, G = markers.X, markers.G
    k1 = rates(X, G)
    k2 = rates(X + 0.5 * dt * k1[0], G + 0.5 * dt * k1[1])
    k3 = rates(X + 0.5 * dt * k2[0], G + 0.5 * dt * k2[1])
    k4 = rates(X + dt * k3[0], G + dt * k3[1])
    X_new = X + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    G_new = G + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    out = markers.with_state(X_new, G_new)
    mesh = mesh if mesh is not None else getattr(flow, 'mesh', None)
    if mesh is not None:
        check_clearance(out, mesh)
    return out


class ZeroFlow:
    """v = 0 everywhere."""

    mesh = None

    def velocity(self, points: np.ndarray) -> np.ndarray:
        return np.zeros((len(np.atleast_2d(points)), 3))

    def gradient(self, points: np.ndarray) -> np.ndarray:
        return np.zeros((len(np.atleast_2d(points)), 3, 3))


# ---------------------------------------------------------------------------
# norms


def japanese_bracket(y: np.ndarray) -> np.ndarray:
    """<y> = (1 + |y|^2)^(1/2)."""
    y = np.atleast_2d(y)
    return np.sqrt(1.0 + np.einsum('ij,ij->i', y, y))


def check_norm_window(p: float, delta: float, alpha: float) -> None:
    """
    Raises:
        ValueError: Unless p in (3, 4], delta in [0, 1 - 3/p), alpha in (0, 1 - 3/p]
    """
    if not 3.0 < p <= 4.0:
        raise ValueError(f"p must lie in (3, 4], got {p}")
    top = 1.0 - 3.0 / p
    if not 0.0 <= delta < top:
        raise ValueError(f"delta must lie in [0, {top:.6g}), got {delta}")
    if not 0.0 < alpha <= top:
        raise ValueError(f"alpha must lie in (0, {top:.6g}], got {alpha}")


def weighted_lp(values: np.ndarray, X: np.ndarray, vol: np.ndarray, p: float, weight: float) -> float:
    """(sum |u|^p <X>^(p weight) vol)^(1/p) over markers; u may be vectors or matrices."""
    if not len(vol):
        return 0.0
    mag = np.linalg.norm(values.reshape(len(vol), -1), axis=1)
    return float(np.sum(mag ** p * japanese_bracket(X) ** (p * weight) * vol) ** (1.0 / p))


def holder_seminorm(values: np.ndarray, X: np.ndarray, alpha: float, max_pairs: int = 200_000,
                    seed: int = 0) -> float:
    """Largest |u_i - u_j| / |X_i - X_j|^alpha over all (or randomly sampled) marker pairs."""
    n = len(X)
    if n < 2:
        return 0.0
    if n * (n - 1) // 2 <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, max_pairs)
        j = rng.integers(0, n, max_pairs)
        keep = i != j
        i, j = i[keep], j[keep]
    dist = np.linalg.norm(X[i] - X[j], axis=1)
    ok = dist > 0
    jump = np.linalg.norm(values[i] - values[j], axis=1)
    return float(np.max(jump[ok] / dist[ok] ** alpha)) if ok.any() else 0.0


@dataclass
class NormDiagnostics:
    """Discrete weighted-norm estimates of the marker vorticity."""
    p: float
    delta: float
    alpha: float
    velocity: float
    sup: float
    holder: float
    lp: float
    lp_gradient: float

    @property
    def m0(self) -> float:
        """M^p_{0, delta+2}."""
        return self.lp

    @property
    def m1(self) -> float:
        """M^p_{1, delta+2}."""
        return self.lp + self.lp_gradient

    @property
    def vorticity(self) -> float:
        """C^{0,alpha} norm plus the weighted L^p term."""
        return self.sup + self.holder + self.lp

    @property
    def triple(self) -> float:
        return self.velocity + self.vorticity

    def to_dict(self) -> Dict[str, float]:
        return {'p': self.p, 'delta': self.delta, 'alpha': self.alpha, 'velocity': self.velocity,
                'sup': self.sup, 'holder': self.holder, 'lp': self.lp, 'm1': self.m1, 'triple': self.triple}


def norm_diagnostics(markers: MarkerSet, l, r, p: float = 4.0, delta: float = 0.0, alpha: float = 0.2,
                     max_pairs: int = 200_000, seed: int = 0) -> NormDiagnostics:
    """
    Discrete triple norm |l| + |r| + |omega|_{C^0,alpha} + |omega|_{L^p_{p(delta+2)}}.

    Raises:
        ValueError: If (p, delta, alpha) is outside the admissible window
    """
    check_norm_window(p, delta, alpha)
    velocity = float(np.linalg.norm(l) + np.linalg.norm(r))
    if not markers.n:
        return NormDiagnostics(p, delta, alpha, velocity, 0.0, 0.0, 0.0, 0.0)
    omega = markers.vorticity()
    lam = delta + 2.0
    return NormDiagnostics(
        p=p, delta=delta, alpha=alpha, velocity=velocity,
        sup=float(np.linalg.norm(omega, axis=1).max()),
        holder=holder_seminorm(omega, markers.X, alpha, max_pairs, seed),
        lp=weighted_lp(omega, markers.X, markers.vol, p, lam),
        lp_gradient=weighted_lp(markers.vorticity_gradient(), markers.X, markers.vol, p, lam + 1.0),
    )


def export_markers_csv(markers: MarkerSet, path: str) -> None:
    """Columns x(3), X(3), G(9 row-major), omega0(3), vol, grad_omega0(9 row-major)."""
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    cols = (['x1', 'x2', 'x3', 'X1', 'X2', 'X3'] + [f"G{i}{j}" for i in range(1, 4) for j in range(1, 4)]
            + ['w01', 'w02', 'w03', 'vol'] + [f"dw{i}{j}" for i in range(1, 4) for j in range(1, 4)])
    body = np.column_stack([markers.x0, markers.X, markers.G.reshape(-1, 9), markers.omega0, markers.vol,
                            markers.grad_omega0.reshape(-1, 9)]) if markers.n else np.zeros((0, len(cols)))
    np.savetxt(path, body, fmt='%.17g', delimiter=',', header=','.join(cols), comments='')


def read_markers_csv(path: str, eps: float, spacing: float) -> MarkerSet:
    body = np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2)
    if not len(body):
        return MarkerSet.empty(eps=eps, spacing=spacing)
    return MarkerSet(x0=body[:, 0:3], X=body[:, 3:6], G=body[:, 6:15].reshape(-1, 3, 3), omega0=body[:, 15:18],
                     vol=body[:, 18], grad_omega0=body[:, 19:28].reshape(-1, 3, 3), eps=eps, spacing=spacing)
