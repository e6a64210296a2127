"""
Exterior potential solver and added-mass assembly.

Single-layer panel method for the exterior Neumann problem, the Kirchhoff
potentials of unit translations, rotations and boundary control fluxes, and
the boundary-integral forms of the added-mass and coupling matrices.
"""

import json
import logging
import os
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve
from scipy.linalg import lapack

from .errors import SingularSystemError
from .geometry import ControlBasis, BodyInertia, SurfaceMesh, mesh_hash

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
ROW_CHUNK = 256

# 7-point degree-5 triangle rule (barycentric)
_S15 = np.sqrt(15.0)
_A1, _B1 = (6.0 - _S15) / 21.0, (9.0 + 2.0 * _S15) / 21.0
_A2, _B2 = (6.0 + _S15) / 21.0, (9.0 - 2.0 * _S15) / 21.0
_W1, _W2 = (155.0 - _S15) / 1200.0, (155.0 + _S15) / 1200.0
RULE_BARY = np.array([
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    [_A1, _A1, _B1], [_A1, _B1, _A1], [_B1, _A1, _A1],
    [_A2, _A2, _B2], [_A2, _B2, _A2], [_B2, _A2, _A2],
])
RULE_WEIGHTS = np.array([9.0 / 40.0, _W1, _W1, _W1, _W2, _W2, _W2])


def _kernel(d: np.ndarray, order: int) -> np.ndarray:
    """Newtonian kernel 1/(4 pi |d|) and its first two x-derivatives, d = x - y."""
    r2 = np.einsum('...k,...k->...', d, d)
    r = np.sqrt(r2)
    if order == 0:
        return 1.0 / (FOUR_PI * r)
    if order == 1:
        return -d / (FOUR_PI * (r2 * r))[..., None]
    r5 = r2 * r2 * r
    hess = 3.0 * d[..., :, None] * d[..., None, :] - r2[..., None, None] * np.eye(3)
    return hess / (FOUR_PI * r5)[..., None, None]


def _flat_panel_integrals(x: np.ndarray, corners: np.ndarray, n_out: np.ndarray):
    """
    Closed-form integral of 1/(4 pi R) over flat triangles and its x-gradient.

    Args:
        x: Evaluation points (Q, 3), one per triangle
        corners: Triangle corners (Q, 3, 3), counter-clockwise about n_out
        n_out: Unit triangle normals (Q, 3)

    Returns:
        Tuple (values (Q,), gradients (Q, 3)); a point in the triangle plane
        gets the principal-value gradient with no normal component
    """
    w = np.einsum('qk,qk->q', x - corners[:, 0], n_out)
    aw = np.abs(w)
    value = np.zeros(len(x))
    solid = np.zeros(len(x))
    grad = np.zeros((len(x), 3))
    for ia, ib in ((0, 1), (1, 2), (2, 0)):
        a, b = corners[:, ia], corners[:, ib]
        length = np.linalg.norm(b - a, axis=1)
        t = (b - a) / length[:, None]
        m = np.cross(t, n_out)
        s_lo = np.einsum('qk,qk->q', a - x, t)
        s_hi = s_lo + length
        p0 = np.einsum('qk,qk->q', a - x, m)
        r_lo = np.linalg.norm(a - x, axis=1)
        r_hi = np.linalg.norm(b - x, axis=1)
        r0sq = p0 * p0 + w * w
        # (R + s)(R - s) = r0^2, pick the form without cancellation
        with np.errstate(divide='ignore', invalid='ignore'):
            f = np.where(
                s_lo + s_hi >= 0.0,
                np.log((r_hi + s_hi) / (r_lo + s_lo)),
                np.log((r_lo - s_lo) / (r_hi - s_hi)),
            )
        beta = np.arctan2(p0 * s_hi, r0sq + aw * r_hi) - np.arctan2(p0 * s_lo, r0sq + aw * r_lo)
        value += p0 * f - aw * beta
        solid += beta
        grad -= m * f[:, None]
    grad -= n_out * (np.sign(w) * solid)[:, None]
    return value / FOUR_PI, grad / FOUR_PI


@dataclass
class PanelQuadrature:
    """Centroid rule for far panels, 7-point rule within near_factor panel diameters."""
    mesh: SurfaceMesh
    near_factor: float = 2.0
    points: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)
    near_radius: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        corners = self.mesh.corners()
        self.points = np.einsum('qv,nvk->nqk', RULE_BARY, corners)
        self.weights = self.mesh.areas[:, None] * RULE_WEIGHTS[None, :]
        edges = np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 1],
                          corners[:, 0] - corners[:, 2]], axis=1)
        self.near_radius = self.near_factor * np.linalg.norm(edges, axis=2).max(axis=1)

    def influence(self, points: np.ndarray, order: int) -> np.ndarray:
        """
        Per-panel influence of a unit single-layer density at off-surface points.

        Args:
            points: Evaluation points (P, 3)
            order: 0 value, 1 gradient, 2 Hessian

        Returns:
            Array (P, N), (P, N, 3) or (P, N, 3, 3)
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        c = self.mesh.centroids
        d = pts[:, None, :] - c[None, :, :]
        dist = np.linalg.norm(d, axis=2)
        near = dist < self.near_radius[None, :]
        out = _kernel(d, order)
        out *= self.mesh.areas.reshape((1, -1) + (1,) * order)
        ip, ik = np.nonzero(near)
        if len(ip):
            dq = pts[ip][:, None, :] - self.points[ik]
            kq = _kernel(dq, order)
            wq = self.weights[ik].reshape(self.weights[ik].shape + (1,) * order)
            out[ip, ik] = (kq * wq).sum(axis=1)
        return out


class ExteriorNeumannSolver:
    """
    Collocation solver for (1/2 I + K) sigma = g on the panel centroids.

    With normals pointing into the body the fluid-side normal derivative of a
    single layer is sigma/2 + K sigma. The dense system is LU-factored once
    and reused for every right-hand side.
    """

    def __init__(self, mesh: SurfaceMesh, near_factor: float = 2.0, max_workers: int = 1):
        self.mesh = mesh
        self.quad = PanelQuadrature(mesh, near_factor)
        self.max_workers = max(1, int(max_workers))
        self._K: Optional[np.ndarray] = None
        self._S: Optional[np.ndarray] = None
        self._self_normal: Optional[np.ndarray] = None
        self._corners = mesh.corners()
        self._lu = None
        self.condition: Optional[float] = None

    def _row_chunks(self):
        n = self.mesh.n_panels
        return [(s, min(n, s + ROW_CHUNK)) for s in range(0, n, ROW_CHUNK)]

    def _assemble(self) -> None:
        n = self.mesh.n_panels
        c = self.mesh.centroids
        normals = self.mesh.normals
        K = np.empty((n, n))
        S = np.empty((n, n))

        def build(bounds):
            lo, hi = bounds
            g, v = self._chunk_influence(c[lo:hi], lo, hi)
            K[lo:hi] = np.einsum('pnk,pk->pn', g, normals[lo:hi])
            S[lo:hi] = v

        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            list(pool.map(build, self._row_chunks()))
        # flux of a point source through the closed surface: sum_i A_i K_ij = A_j / 2
        areas = self.mesh.areas
        off_diagonal = areas @ K - areas * np.diag(K)
        self._self_normal = 0.5 - off_diagonal / areas
        K[np.diag_indices(n)] = self._self_normal
        self._K, self._S = K, S
        logger.debug(f"assembled {n}x{n} panel influence matrices, "
                     f"curvature self terms in [{self._self_normal.min():.3e}, {self._self_normal.max():.3e}]")

    def _chunk_influence(self, points: np.ndarray, lo: int, hi: int):
        """Gradient and value influence for centroid rows lo:hi; near and self panels integrated exactly."""
        rows = np.arange(lo, hi)
        local = np.arange(hi - lo)
        c = self.mesh.centroids
        d = points[:, None, :] - c[None, :, :]
        dist = np.linalg.norm(d, axis=2)
        dist[local, rows] = 0.0
        near = dist < self.quad.near_radius[None, :]
        safe = np.where(near[..., None], 1.0, d)
        g = _kernel(safe, 1) * self.mesh.areas[None, :, None]
        v = _kernel(safe, 0) * self.mesh.areas[None, :]
        ip, ik = np.nonzero(near)
        values, grads = _flat_panel_integrals(points[ip], self._corners[ik], -self.mesh.normals[ik])
        v[ip, ik] = values
        g[ip, ik] = grads
        # own panel: principal value only, the normal part is set on the diagonal of K
        own = self.mesh.normals[rows]
        g[local, rows] -= np.einsum('pk,pk->p', g[local, rows], own)[:, None] * own
        return g, v

    @property
    def K(self) -> np.ndarray:
        if self._K is None:
            self._assemble()
        return self._K

    @property
    def S(self) -> np.ndarray:
        if self._S is None:
            self._assemble()
        return self._S

    def _factor(self):
        if self._lu is None:
            A = 0.5 * np.eye(self.mesh.n_panels) + self.K
            anorm = float(np.abs(A).sum(axis=0).max())
            lu, piv = lu_factor(A)
            rcond, info = lapack.dgecon(lu, anorm, norm='1')
            self.condition = float('inf') if rcond == 0 else 1.0 / float(rcond)
            if info != 0 or not np.isfinite(self.condition) or rcond < 1e-13:
                raise SingularSystemError("boundary integral system is singular", condition=self.condition)
            logger.info(f"factored {self.mesh.n_panels}-panel system, condition estimate {self.condition:.3e}")
            self._lu = (lu, piv)
        return self._lu

    def solve(self, data: np.ndarray) -> np.ndarray:
        """Densities for one (n,) or several (n, k) right-hand sides."""
        data = np.asarray(data, dtype=float)
        if not np.any(data):
            return np.zeros_like(data)
        return lu_solve(self._factor(), data)

    def normal_derivative(self, sigma: np.ndarray) -> np.ndarray:
        """Fluid-side dphi/dn at the centroids."""
        return 0.5 * sigma + self.K @ sigma

    def boundary_values(self, sigma: np.ndarray) -> np.ndarray:
        """Potential values at the centroids, for (n,) or (k, n) densities."""
        return np.asarray(sigma) @ self.S.T

    def boundary_gradients(self, sigmas: np.ndarray) -> np.ndarray:
        """
        Fluid-side gradients at the centroids.

        Args:
            sigmas: Densities (k, n)

        Returns:
            Array (k, n, 3): principal-value sum, the curvature self term and
            the sigma/2 jump along n
        """
        sigmas = np.atleast_2d(sigmas)
        self_normal = np.diag(self.K)
        n = self.mesh.n_panels
        out = np.empty((len(sigmas), n, 3))
        c = self.mesh.centroids

        def build(bounds):
            lo, hi = bounds
            g, _ = self._chunk_influence(c[lo:hi], lo, hi)
            out[:, lo:hi] = np.einsum('pnk,sn->spk', g, sigmas)

        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            list(pool.map(build, self._row_chunks()))
        out += (0.5 + self_normal)[None, :, None] * sigmas[:, :, None] * self.mesh.normals[None, :, :]
        return out


_SOLVERS: "weakref.WeakKeyDictionary[SurfaceMesh, ExteriorNeumannSolver]" = weakref.WeakKeyDictionary()


def get_solver(mesh: SurfaceMesh, max_workers: int = 1) -> ExteriorNeumannSolver:
    """Shared solver per mesh so the LU factorization is done once."""
    solver = _SOLVERS.get(mesh)
    if solver is None:
        solver = ExteriorNeumannSolver(mesh, max_workers=max_workers)
        _SOLVERS[mesh] = solver
    return solver


@dataclass
class HarmonicPotential:
    """Single-layer potential sigma on a mesh with its Neumann data."""
    solver: ExteriorNeumannSolver
    sigma: np.ndarray
    data: np.ndarray

    @property
    def mesh(self) -> SurfaceMesh:
        return self.solver.mesh

    def value(self, points: np.ndarray) -> np.ndarray:
        return self.solver.quad.influence(points, 0) @ self.sigma

    def gradient(self, points: np.ndarray) -> np.ndarray:
        return np.einsum('pnk,n->pk', self.solver.quad.influence(points, 1), self.sigma)

    def hessian(self, points: np.ndarray) -> np.ndarray:
        return np.einsum('pnab,n->pab', self.solver.quad.influence(points, 2), self.sigma)

    def boundary_values(self) -> np.ndarray:
        return self.solver.boundary_values(self.sigma)

    def boundary_gradients(self) -> np.ndarray:
        return self.solver.boundary_gradients(self.sigma[None, :])[0]

    def neumann_residual(self) -> float:
        """Relative RMS mismatch between reconstructed dphi/dn and the data."""
        scale = float(np.sqrt(np.mean(self.data ** 2)))
        if scale == 0.0:
            return float(np.sqrt(np.mean(self.sigma ** 2)))
        mismatch = self.solver.normal_derivative(self.sigma) - self.data
        return float(np.sqrt(np.mean(mismatch ** 2)) / scale)


def check_flux(mesh: SurfaceMesh, data: np.ndarray, rtol: float = 1e-8) -> float:
    """
    Raises:
        ValueError: If the area-weighted mean of data is not zero
    """
    flux = float(np.asarray(data) @ mesh.areas)
    scale = float(np.abs(data).max()) * mesh.total_area if np.any(data) else 0.0
    if abs(flux) > rtol * scale:
        raise ValueError(f"Neumann data has nonzero net flux {flux:.3e} (allowed {rtol * scale:.3e})")
    return flux


def solve_exterior_neumann(
    mesh: SurfaceMesh,
    boundary_data: np.ndarray,
    solver: Optional[ExteriorNeumannSolver] = None,
    require_zero_flux: bool = True
) -> HarmonicPotential:
    """
    Exterior harmonic function with dphi/dn = g on the surface and phi -> 0 at infinity.

    Args:
        mesh: Body surface
        boundary_data: Per-panel Neumann data g
        solver: Reuse a factored solver for this mesh
        require_zero_flux: Enforce the zero net flux precondition

    Raises:
        ValueError: On nonzero net flux or wrong data length
        SingularSystemError: If the dense system cannot be factored
    """
    g = np.asarray(boundary_data, dtype=float)
    if g.shape != (mesh.n_panels,):
        raise ValueError(f"boundary data must have {mesh.n_panels} entries, got {g.shape}")
    if require_zero_flux:
        check_flux(mesh, g)
    solver = solver or get_solver(mesh)
    return HarmonicPotential(solver=solver, sigma=solver.solve(g), data=g)


@dataclass
class PotentialTables:
    """
    The 6 + m Kirchhoff potentials: translations, rotations, control fluxes.

    Row order of sigmas/data: phi_1..3, varphi_1..3, psi_1..m.
    """
    solver: ExteriorNeumannSolver
    sigmas: np.ndarray
    data: np.ndarray
    boundary_values: np.ndarray = field(init=False, repr=False)
    boundary_gradients: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.boundary_values = self.solver.boundary_values(self.sigmas)
        self.boundary_gradients = self.solver.boundary_gradients(self.sigmas)

    @property
    def mesh(self) -> SurfaceMesh:
        return self.solver.mesh

    @property
    def m(self) -> int:
        return len(self.sigmas) - 6

    @property
    def potentials(self) -> List[HarmonicPotential]:
        return [HarmonicPotential(self.solver, s, g) for s, g in zip(self.sigmas, self.data)]

    def coefficients(self, l: np.ndarray, r: np.ndarray, w: Optional[np.ndarray] = None) -> np.ndarray:
        w = np.zeros(self.m) if w is None else np.asarray(w, dtype=float)
        if w.shape != (self.m,):
            raise ValueError(f"control vector must have {self.m} entries, got {w.shape}")
        return np.concatenate([np.asarray(l, dtype=float), np.asarray(r, dtype=float), w])

    def combined_sigma(self, l, r, w=None) -> np.ndarray:
        return self.coefficients(l, r, w) @ self.sigmas

    def velocity(self, l, r, w, points: np.ndarray) -> np.ndarray:
        """Potential velocity sum l_i grad phi_i + r_i grad varphi_i + w_j grad psi_j."""
        sigma = self.combined_sigma(l, r, w)
        return np.einsum('pnk,n->pk', self.solver.quad.influence(points, 1), sigma)

    def velocity_gradient(self, l, r, w, points: np.ndarray) -> np.ndarray:
        sigma = self.combined_sigma(l, r, w)
        return np.einsum('pnab,n->pab', self.solver.quad.influence(points, 2), sigma)

    def boundary_velocity(self, l, r, w=None) -> np.ndarray:
        """Fluid-side potential velocity at the centroids, shape (n, 3)."""
        return np.einsum('a,ank->nk', self.coefficients(l, r, w), self.boundary_gradients)

    def values_at(self, points: np.ndarray) -> np.ndarray:
        """All potentials at the given points, shape (6 + m, P)."""
        return self.sigmas @ self.solver.quad.influence(points, 0).T


def kirchhoff_data(mesh: SurfaceMesh, controls: Optional[ControlBasis]) -> np.ndarray:
    """Neumann data n_i, (y x n)_i, chi_j stacked as (6 + m, n)."""
    rot = np.cross(mesh.centroids, mesh.normals)
    rows = [mesh.normals.T, rot.T]
    if controls is not None and controls.m:
        if controls.values.shape[1] != mesh.n_panels:
            raise ValueError("control basis was built on a different mesh")
        rows.append(controls.values)
    return np.vstack(rows)


def kirchhoff_tables(
    mesh: SurfaceMesh,
    controls: Optional[ControlBasis] = None,
    solver: Optional[ExteriorNeumannSolver] = None
) -> PotentialTables:
    """
    Solve all 6 + m Kirchhoff problems with one factorization.

    Raises:
        ValueError: If a control profile is not zero-mean
    """
    data = kirchhoff_data(mesh, controls)
    for row in data:
        check_flux(mesh, row)
    solver = solver or get_solver(mesh)
    sigmas = solver.solve(data.T).T
    tables = PotentialTables(solver=solver, sigmas=sigmas, data=data)
    logger.info(f"solved {len(data)} Kirchhoff potentials on {mesh.n_panels} panels")
    return tables


@dataclass(eq=False)
class AddedMassSet:
    """
    Added-mass blocks, control couplings and the full 6x6 inertia.

    LM, RM, LJ, RJ have shape (m, 3, 3); WM, WJ have shape (m, 3, m).
    """
    M: np.ndarray
    J: np.ndarray
    N: np.ndarray
    CM: np.ndarray
    CJ: np.ndarray
    LM: np.ndarray
    RM: np.ndarray
    WM: np.ndarray
    LJ: np.ndarray
    RJ: np.ndarray
    WJ: np.ndarray
    mass: float
    inertia: np.ndarray
    geometry_hash: str = ''
    asymmetry: Dict[str, float] = field(default_factory=dict)
    calJ: np.ndarray = field(init=False, repr=False)
    _cho: Any = field(init=False, repr=False)

    def __post_init__(self):
        for name in ('M', 'J', 'N', 'CM', 'CJ', 'LM', 'RM', 'WM', 'LJ', 'RJ', 'WJ', 'inertia'):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        m = self.CM.shape[1]
        self.CM = self.CM.reshape(3, m)
        self.CJ = self.CJ.reshape(3, m)
        for name in ('LM', 'RM', 'LJ', 'RJ'):
            setattr(self, name, getattr(self, name).reshape(m, 3, 3))
        for name in ('WM', 'WJ'):
            setattr(self, name, getattr(self, name).reshape(m, 3, m))
        body = np.zeros((6, 6))
        body[:3, :3] = self.mass * np.eye(3)
        body[3:, 3:] = self.inertia
        fluid = np.block([[self.M, self.N], [self.N.T, self.J]])
        self.calJ = body + fluid
        if not np.array_equal(self.calJ, self.calJ.T):
            raise SingularSystemError("assembled inertia is not symmetric")
        try:
            self._cho = cho_factor(self.calJ)
        except np.linalg.LinAlgError:
            raise SingularSystemError("assembled inertia is not positive definite; check normal orientation",
                                      condition=float(np.linalg.cond(self.calJ)))

    @property
    def m(self) -> int:
        return self.CM.shape[1]

    @property
    def C(self) -> np.ndarray:
        return -np.vstack([self.CM, self.CJ])

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply the inverse of the 6x6 inertia."""
        return cho_solve(self._cho, rhs)

    def to_dict(self) -> Dict[str, Any]:
        out = {name: getattr(self, name).tolist() for name in
               ('M', 'J', 'N', 'CM', 'CJ', 'LM', 'RM', 'WM', 'LJ', 'RJ', 'WJ', 'inertia')}
        out.update(m=self.m, mass=self.mass, geometry_hash=self.geometry_hash,
                   asymmetry=dict(self.asymmetry), calJ=self.calJ.tolist())
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AddedMassSet':
        m = int(data['m'])
        arrays = {}
        for name, shape in (('M', (3, 3)), ('J', (3, 3)), ('N', (3, 3)), ('CM', (3, m)), ('CJ', (3, m)),
                            ('LM', (m, 3, 3)), ('RM', (m, 3, 3)), ('WM', (m, 3, m)),
                            ('LJ', (m, 3, 3)), ('RJ', (m, 3, 3)), ('WJ', (m, 3, m)), ('inertia', (3, 3))):
            arrays[name] = np.asarray(data[name], dtype=float).reshape(shape)
        return cls(mass=float(data['mass']), geometry_hash=data.get('geometry_hash', ''),
                   asymmetry=dict(data.get('asymmetry', {})), **arrays)


def _relative_asymmetry(A: np.ndarray, B: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(A)), float(np.linalg.norm(B)))
    return float(np.linalg.norm(A - B) / scale) if scale > 0 else 0.0


def assemble_matrices(
    tables: PotentialTables,
    controls: Optional[ControlBasis],
    inertia: BodyInertia
) -> AddedMassSet:
    """
    Assemble M, J, N, C and the quadratic coupling tensors from boundary forms.

    M_ij = oint n_i phi_j, J_ij = oint (y x n)_i varphi_j, N_ij = oint n_i varphi_j,
    CM_ij = oint n_i psi_j, CJ_ij = oint (y x n)_i psi_j, and
    LM_p[i, j] = oint (grad phi_j)_i chi_p, LJ_p[i, j] = oint (y x grad phi_j)_i chi_p,
    likewise R from varphi and W from psi.

    Raises:
        SingularSystemError: If the 6x6 inertia is not positive definite
    """
    mesh = tables.mesh
    A = mesh.areas
    m = tables.m
    if controls is not None and controls.m != m:
        raise ValueError(f"tables carry {m} control potentials but the basis has {controls.m}")

    gram = (tables.data * A) @ tables.boundary_values.T
    M_raw, J_raw = gram[:3, :3], gram[3:6, 3:6]
    N_fwd, N_rev = gram[:3, 3:6], gram[3:6, :3].T
    asymmetry = {
        'M': _relative_asymmetry(M_raw, M_raw.T),
        'J': _relative_asymmetry(J_raw, J_raw.T) if np.linalg.norm(J_raw) > 1e-12 * np.linalg.norm(M_raw) else 0.0,
        'N': _relative_asymmetry(N_fwd, N_rev) if np.linalg.norm(N_fwd) > 1e-12 * np.linalg.norm(M_raw) else 0.0,
    }
    if m:
        asymmetry['C'] = _relative_asymmetry(gram[:6, 6:], gram[6:, :6].T)
    for name, value in asymmetry.items():
        level = logging.WARNING if value > 1e-2 else logging.DEBUG
        logger.log(level, f"pre-symmetrization asymmetry of {name}: {value:.3e}")

    chi = tables.data[6:]
    grads = tables.boundary_gradients
    weighted = chi * A
    moment = np.einsum('pn,ank->pak', weighted, grads)
    moment_J = np.einsum('pn,ank->pak', weighted, np.cross(mesh.centroids[None, :, :], grads))

    mats = AddedMassSet(
        M=0.5 * (M_raw + M_raw.T),
        J=0.5 * (J_raw + J_raw.T),
        N=0.5 * (N_fwd + N_rev),
        CM=gram[:3, 6:],
        CJ=gram[3:6, 6:],
        LM=moment[:, 0:3, :].transpose(0, 2, 1),
        RM=moment[:, 3:6, :].transpose(0, 2, 1),
        WM=moment[:, 6:, :].transpose(0, 2, 1),
        LJ=moment_J[:, 0:3, :].transpose(0, 2, 1),
        RJ=moment_J[:, 3:6, :].transpose(0, 2, 1),
        WJ=moment_J[:, 6:, :].transpose(0, 2, 1),
        mass=inertia.mass,
        inertia=inertia.inertia,
        geometry_hash=mesh_hash(mesh, *( [controls.values] if controls is not None and controls.m else [])),
        asymmetry=asymmetry,
    )
    logger.info(f"assembled added mass: min eigenvalue of inertia {np.linalg.eigvalsh(mats.calJ).min():.6g}")
    return mats


def eval_potential_velocity(tables: PotentialTables, l, r, w, y: np.ndarray) -> np.ndarray:
    """
    Potential velocity at exterior points.

    Raises:
        ValueError: If a point lies inside or on the body
    """
    pts = np.atleast_2d(np.asarray(y, dtype=float))
    if np.any(tables.mesh.contains(pts)) or np.any(tables.mesh.distance_to_surface(pts) < 1e-9):
        raise ValueError("velocity requested inside or on the body")
    v = tables.velocity(l, r, w, pts)
    return v[0] if np.ndim(y) == 1 else v


def export_added_mass(mats: AddedMassSet, path: str) -> None:
    """Write the added-mass set as JSON; floats keep their exact repr."""
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(mats.to_dict(), f, indent=2, sort_keys=True)


def import_added_mass(path: str) -> AddedMassSet:
    with open(path, 'r', encoding='utf-8') as f:
        return AddedMassSet.from_dict(json.load(f))
