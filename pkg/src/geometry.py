"""
Body geometry for the immersed-body solver.

Triangulated body surfaces, panel quadrature data, boundary control patches
and solid inertia. Stored panel normals point from the fluid INTO the body.
"""

import hashlib
import itertools
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

MAX_REFINEMENT = 7

# 4-point tetrahedron rule, exact for quadratics
_TET_A = 0.5854101966249685
_TET_B = 0.1381966011250105


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """
    Closed triangulated body surface in the body frame.

    Triangles are wound counter-clockwise seen from the fluid; the stored
    unit normals are the opposite, pointing into the body.
    """
    vertices: np.ndarray
    triangles: np.ndarray
    centroids: np.ndarray = field(init=False, repr=False)
    areas: np.ndarray = field(init=False, repr=False)
    normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (n, 3), got {triangles.shape}")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise ValueError("triangle index out of range")

        p0, p1, p2 = (vertices[triangles[:, k]] for k in range(3))
        cross = np.cross(p1 - p0, p2 - p0)
        double_area = np.linalg.norm(cross, axis=1)
        if np.any(double_area <= 0.0):
            raise ValueError("mesh has degenerate panels")

        for name, value in (
            ('vertices', vertices),
            ('triangles', triangles),
            ('centroids', (p0 + p1 + p2) / 3.0),
            ('areas', 0.5 * double_area),
            ('normals', -cross / double_area[:, None]),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        _check_closed(triangles)

    @property
    def n_panels(self) -> int:
        return len(self.triangles)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @property
    def volume(self) -> float:
        """Enclosed volume by the divergence theorem."""
        return float(-np.sum(self.areas * np.einsum('ij,ij->i', self.centroids, self.normals)) / 3.0)

    @property
    def panel_size(self) -> float:
        """Mean panel diameter."""
        return float(np.sqrt(self.areas.mean() * 4.0 / np.sqrt(3.0)))

    def normal_closure(self) -> np.ndarray:
        """Sum of area-weighted normals; zero for a closed surface."""
        return (self.areas[:, None] * self.normals).sum(axis=0)

    def corners(self) -> np.ndarray:
        """Panel corner coordinates, shape (n_panels, 3, 3)."""
        return self.vertices[self.triangles]

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(np.vstack([self.centroids, self.vertices]))

    def distance_to_surface(self, points: np.ndarray) -> np.ndarray:
        """
        Distance from points to the nearest panel centroid or vertex.

        Overestimates the true surface distance by at most one panel size.
        """
        d, _ = self._tree.query(np.atleast_2d(points))
        return d

    def contains(self, points: np.ndarray, chunk: int = 256) -> np.ndarray:
        """
        Inside test by the winding number (summed panel solid angles).

        Args:
            points: Array (n, 3)

        Returns:
            Boolean array, True for points enclosed by the surface
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        corners = self.corners()
        out = np.empty(len(pts), dtype=bool)
        for start in range(0, len(pts), chunk):
            p = pts[start:start + chunk]
            a = corners[None, :, 0, :] - p[:, None, :]
            b = corners[None, :, 1, :] - p[:, None, :]
            c = corners[None, :, 2, :] - p[:, None, :]
            la, lb, lc = (np.linalg.norm(x, axis=2) for x in (a, b, c))
            num = np.einsum('ptk,ptk->pt', a, np.cross(b, c))
            den = (la * lb * lc + np.einsum('ptk,ptk->pt', a, b) * lc
                   + np.einsum('ptk,ptk->pt', a, c) * lb + np.einsum('ptk,ptk->pt', b, c) * la)
            winding = 2.0 * np.arctan2(num, den).sum(axis=1) / (4.0 * np.pi)
            out[start:start + chunk] = winding > 0.5
        return out


def _check_closed(triangles: np.ndarray) -> None:
    edges = np.sort(np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts != 2):
        raise ValueError(f"surface is not closed: {int(np.sum(counts != 2))} edges not shared by exactly two panels")


def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for s1, s2 in itertools.product((-1.0, 1.0), repeat=2):
        verts += [(0.0, s1, s2 * phi), (s1, s2 * phi, 0.0), (s2 * phi, 0.0, s1)]
    verts = np.array(verts)
    faces = []
    for i, j, k in itertools.combinations(range(12), 3):
        if all(abs(np.linalg.norm(verts[a] - verts[b]) - 2.0) < 1e-9 for a, b in ((i, j), (j, k), (i, k))):
            faces.append((i, j, k))
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    return verts, np.array(faces)


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Wind star-shaped faces counter-clockwise seen from outside."""
    p0, p1, p2 = (vertices[faces[:, k]] for k in range(3))
    outward = np.einsum('ij,ij->i', np.cross(p1 - p0, p2 - p0), p0 + p1 + p2) > 0
    faces = faces.copy()
    faces[~outward] = faces[~outward][:, [0, 2, 1]]
    return faces


def _unit_icosphere(refinement: int):
    verts, faces = _icosahedron()
    verts = list(verts)
    faces = _orient_outward(np.array(verts), faces)
    for _ in range(refinement):
        midpoint: Dict[tuple, int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new_faces)
    return np.array(verts), np.asarray(faces)


def _check_refinement(refinement: int) -> None:
    if int(refinement) != refinement or refinement < 0:
        raise ValueError(f"refinement must be a nonnegative integer, got {refinement}")
    if refinement > MAX_REFINEMENT:
        raise ValueError(f"refinement {refinement} exceeds the cap of {MAX_REFINEMENT}")


def build_sphere_mesh(radius: float, refinement: int) -> SurfaceMesh:
    """
    Icosphere with 20 * 4**refinement panels and vertices at exact radius.

    Raises:
        ValueError: On nonpositive radius or refinement outside [0, 7]
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    _check_refinement(refinement)
    verts, faces = _unit_icosphere(int(refinement))
    return SurfaceMesh(radius * verts, faces)


def build_ellipsoid_mesh(semiaxes: Sequence[float], refinement: int) -> SurfaceMesh:
    """Icosphere scaled along the coordinate axes; normals follow the mapped panels."""
    semiaxes = np.asarray(semiaxes, dtype=float)
    if semiaxes.shape != (3,) or np.any(semiaxes <= 0):
        raise ValueError(f"semiaxes must be three positive numbers, got {semiaxes}")
    _check_refinement(refinement)
    verts, faces = _unit_icosphere(int(refinement))
    return SurfaceMesh(verts * semiaxes, faces)


def build_mesh(desc: Dict[str, Any]) -> SurfaceMesh:
    """Build a mesh from a geometry descriptor (kind sphere, ellipsoid or off)."""
    kind = desc.get('kind', 'sphere')
    if kind == 'sphere':
        return build_sphere_mesh(desc.get('radius', 1.0), desc.get('refinement', 2))
    if kind == 'ellipsoid':
        return build_ellipsoid_mesh(desc['semiaxes'], desc.get('refinement', 2))
    if kind == 'off':
        return read_off(desc['path'])
    raise ValueError(f"Unknown geometry kind: {kind}")


def mesh_hash(mesh: SurfaceMesh, *extra: np.ndarray) -> str:
    """SHA-256 over vertex and triangle data plus any extra arrays."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(mesh.vertices, dtype='<f8').tobytes())
    digest.update(np.ascontiguousarray(mesh.triangles, dtype='<i8').tobytes())
    for arr in extra:
        digest.update(np.ascontiguousarray(arr, dtype='<f8').tobytes())
    return digest.hexdigest()


def write_off(mesh: SurfaceMesh, path: str) -> None:
    """Write the mesh in OFF format with 17 significant digits."""
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write('OFF\n')
        f.write(f"{len(mesh.vertices)} {mesh.n_panels} 0\n")
        for v in mesh.vertices:
            f.write(' '.join(f"{x:.17g}" for x in v) + '\n')
        for t in mesh.triangles:
            f.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def read_off(path: str) -> SurfaceMesh:
    """
    Read a triangulated OFF file.

    Raises:
        FileNotFoundError: If path does not exist
        ValueError: On malformed content or non-triangular faces
    """
    with open(path, 'r', encoding='utf-8') as f:
        tokens = [line.split('#')[0].strip() for line in f]
    tokens = [t for t in tokens if t]
    if not tokens or tokens[0] != 'OFF':
        raise ValueError(f"{path}: missing OFF header")
    nv, nf = (int(x) for x in tokens[1].split()[:2])
    vertices = np.array([[float(x) for x in tokens[2 + i].split()[:3]] for i in range(nv)])
    faces = []
    for i in range(nf):
        parts = [int(x) for x in tokens[2 + nv + i].split()]
        if parts[0] != 3:
            raise ValueError(f"{path}: face {i} is not a triangle")
        faces.append(parts[1:4])
    return SurfaceMesh(vertices, np.array(faces))


@dataclass(frozen=True, eq=False)
class ControlBasis:
    """
    Boundary control profiles chi_j sampled per panel.

    values has shape (m, n_panels); every row integrates to zero over the
    surface after the discrete mean removal.
    """
    values: np.ndarray
    supports: np.ndarray
    patches: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def m(self) -> int:
        return int(self.values.shape[0])


def cap_bump(mesh: SurfaceMesh, direction: Sequence[float], half_angle: float) -> np.ndarray:
    """
    C2 bump (1 - (theta/theta_max)^2)^3 on a spherical cap of panel directions.

    theta is the angle between the centroid direction and the cap axis.
    """
    axis = np.asarray(direction, dtype=float)
    axis = axis / np.linalg.norm(axis)
    unit = mesh.centroids / np.linalg.norm(mesh.centroids, axis=1)[:, None]
    theta = np.arccos(np.clip(unit @ axis, -1.0, 1.0))
    s = theta / half_angle
    return np.where(s < 1.0, (1.0 - s * s) ** 3, 0.0)


def make_control_basis(mesh: SurfaceMesh, regions: List[Dict[str, Any]]) -> ControlBasis:
    """
    Build zero-mean control profiles from cap-based patch descriptors.

    Each region is {'caps': [{'direction', 'half_angle', 'amplitude'}, ...]}.
    Caps inside one region add up; the region's discrete mean is removed over
    its own support panels so the support stays compact.

    Raises:
        ValueError: On overlapping regions, empty regions, or a region
            covering the whole surface
    """
    n = mesh.n_panels
    values = np.zeros((len(regions), n))
    supports = np.zeros((len(regions), n), dtype=bool)
    for j, region in enumerate(regions):
        caps = region.get('caps', [])
        if not caps:
            raise ValueError(f"control region {j} has no caps")
        for cap in caps:
            half_angle = float(cap['half_angle'])
            if not 0.0 < half_angle < np.pi:
                raise ValueError(f"control region {j}: half_angle must be in (0, pi), got {half_angle}")
            bump = cap_bump(mesh, cap['direction'], half_angle)
            values[j] += float(cap.get('amplitude', 1.0)) * bump
            supports[j] |= bump > 0.0
        if not supports[j].any():
            raise ValueError(f"control region {j} covers no panel")
        if supports[j].all():
            raise ValueError(f"control region {j} covers the whole surface")

        raw_mean = float(values[j] @ mesh.areas)
        support_area = float(mesh.areas[supports[j]].sum())
        values[j, supports[j]] -= raw_mean / support_area
        logger.debug(f"control region {j}: {int(supports[j].sum())} panels, removed mean {raw_mean / support_area:.3e}")

    overlap = supports.sum(axis=0) > 1
    if overlap.any():
        raise ValueError(f"control regions overlap on {int(overlap.sum())} panels")
    values.setflags(write=False)
    return ControlBasis(values=values, supports=supports, patches=list(regions))


def axis_control_regions(half_angle: float = 0.5, diagonals: bool = False) -> List[Dict[str, Any]]:
    """
    Cap layouts for the rigid modes.

    Antipodal (+1, -1) pairs on the coordinate axes are odd under y -> -y
    and drive translation. With diagonals, each coordinate plane also gets a
    quadrupole: +1 caps on the two ends of one diagonal, -1 caps on the
    other. Those profiles are even and drive rotation about the plane normal,
    which odd profiles cannot do on a centrally symmetric body.
    """
    eye = np.eye(3)
    regions = []
    for a in eye:
        regions.append({'caps': [
            {'direction': a.tolist(), 'half_angle': half_angle, 'amplitude': 1.0},
            {'direction': (-a).tolist(), 'half_angle': half_angle, 'amplitude': -1.0},
        ]})
    if diagonals:
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            plus = (eye[j] + eye[k]) / np.sqrt(2.0)
            minus = (eye[j] - eye[k]) / np.sqrt(2.0)
            regions.append({'caps': [
                {'direction': d.tolist(), 'half_angle': half_angle, 'amplitude': amplitude}
                for d, amplitude in ((plus, 1.0), (-plus, 1.0), (minus, -1.0), (-minus, -1.0))
            ]})
    return regions


@dataclass(frozen=True, eq=False)
class BodyInertia:
    """Solid mass m0 and inertia J0 about the body-frame origin."""
    mass: float
    inertia: np.ndarray
    density: Dict[str, Any]
    displaced_volume: float

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError(f"body mass must be positive, got {self.mass}")
        J = np.asarray(self.inertia, dtype=float)
        if not np.allclose(J, J.T, atol=1e-12 * max(1.0, np.abs(J).max())):
            raise ValueError("inertia matrix is not symmetric")
        if np.linalg.eigvalsh(J).min() <= 0:
            raise ValueError("inertia matrix is not positive definite")
        object.__setattr__(self, 'inertia', J)


def _density_at(density: Dict[str, Any], points: np.ndarray) -> np.ndarray:
    kind = density.get('kind', 'uniform')
    if kind == 'uniform':
        return np.full(len(points), float(density.get('value', 1.0)))
    if kind == 'octant':
        values = np.asarray(density['values'], dtype=float)
        if values.shape != (8,):
            raise ValueError("octant density needs 8 values")
        idx = (points[:, 0] >= 0).astype(int) + 2 * (points[:, 1] >= 0) + 4 * (points[:, 2] >= 0)
        return values[idx]
    raise ValueError(f"Unknown density kind: {kind}")


def body_inertia(mesh: SurfaceMesh, density: Optional[Dict[str, Any]] = None) -> BodyInertia:
    """
    Mass and inertia by 4-point Gauss quadrature on origin-apex tetrahedra.

    The body must be star-shaped about the origin. Uniform densities are
    integrated exactly; octant densities to quadrature accuracy.
    """
    density = density or {'kind': 'uniform', 'value': 1.0}
    corners = mesh.corners()
    tet_vol = np.einsum('ij,ij->i', corners[:, 0], np.cross(corners[:, 1], corners[:, 2])) / 6.0
    # apex at the origin contributes nothing but its weight
    points = []
    for k in range(4):
        w = np.full(4, _TET_B)
        w[k] = _TET_A
        points.append(w[1] * corners[:, 0] + w[2] * corners[:, 1] + w[3] * corners[:, 2])
    pts = np.concatenate(points)
    weights = np.tile(tet_vol / 4.0, 4) * _density_at(density, pts)
    mass = float(weights.sum())
    r2 = np.einsum('ij,ij->i', pts, pts)
    inertia = np.einsum('i,jk->jk', weights * r2, np.eye(3)) - np.einsum('i,ij,ik->jk', weights, pts, pts)
    inertia = 0.5 * (inertia + inertia.T)
    return BodyInertia(mass=mass, inertia=inertia, density=dict(density), displaced_volume=mesh.volume)


def check_neutral_buoyancy(inertia: BodyInertia, mesh: SurfaceMesh) -> float:
    """Return |m0 - vol(S)|; the caller decides pass or fail."""
    return abs(inertia.mass - mesh.volume)
