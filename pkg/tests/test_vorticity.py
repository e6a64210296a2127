"""
Tests for vorticity markers, blob kernels, transport and norm diagnostics.
"""

import numpy as np
import pytest

from src.errors import CollisionError
from src.vorticity import (
    FlowField, MarkerSet, ZeroFlow, advect_markers, blob_potential, blob_potential_gradient, blob_velocity,
    blob_velocity_gradient, blob_vorticity, cauchy_vorticity, check_clearance, check_norm_window,
    export_markers_csv, holder_seminorm, japanese_bracket, norm_diagnostics, read_markers_csv, reconstruct_eta,
    seed_markers,
)

BLOB = {'kind': 'blob', 'center': [0.0, 0.0, 2.5], 'radius': 0.6, 'vector': [1.0, 0.0, 0.0], 'strength': 0.2}


def single_marker(X, omega, eps=0.05, spacing=0.1):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    n = len(X)
    return MarkerSet(x0=X.copy(), X=X.copy(), G=np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), omega0=omega,
                     grad_omega0=np.zeros((n, 3, 3)), vol=np.ones(n), eps=eps, spacing=spacing)


class TestSeeding:
    def test_zero_seed_is_empty(self):
        assert seed_markers({'kind': 'zero'}, 0.1).n == 0
        assert seed_markers(dict(BLOB, strength=0.0), 0.1).n == 0

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="Unknown vorticity seed"):
            seed_markers({'kind': 'vortex-sheet'}, 0.1)

    def test_blob_markers(self, sphere_coarse):
        markers = seed_markers(BLOB, 0.15, sphere_coarse.mesh)
        assert markers.n > 0
        assert np.all(np.linalg.norm(markers.X - BLOB['center'], axis=1) < BLOB['radius'])
        assert np.allclose(markers.vol, 0.15 ** 3)
        assert markers.eps == pytest.approx(0.3)
        assert np.allclose(markers.det_G(), 1.0)
        assert markers.diagnostics['div_residual'] < 1e-4
        assert markers.diagnostics['n_markers'] == markers.n

    def test_ring_and_hill_are_divergence_free(self, sphere_coarse):
        ring = {'kind': 'ring', 'center': [0.0, 0.0, 3.0], 'ring_radius': 0.5, 'core_radius': 0.25}
        hill = {'kind': 'hill', 'center': [0.0, 0.0, -2.5], 'radius': 0.5}
        assert seed_markers(ring, 0.1, sphere_coarse.mesh).n > 0
        assert seed_markers(hill, 0.1, sphere_coarse.mesh).n > 0

    def test_ring_has_zero_total_vorticity(self):
        ring = seed_markers({'kind': 'ring', 'center': [0.0, 0.0, 3.0], 'ring_radius': 0.5, 'core_radius': 0.25},
                            0.05)
        assert np.linalg.norm(ring.total_vorticity()) < 1e-3
        assert np.allclose(ring.diagnostics['total_vorticity'], ring.total_vorticity())

    def test_bad_ring_core(self):
        with pytest.raises(ValueError, match="core"):
            seed_markers({'kind': 'ring', 'ring_radius': 0.3, 'core_radius': 0.5}, 0.1)

    def test_support_too_close_to_body(self, sphere_coarse):
        with pytest.raises(ValueError, match="within"):
            seed_markers(dict(BLOB, center=[0.0, 0.0, 1.4]), 0.1, sphere_coarse.mesh)

    def test_divergent_field_rejected(self):
        spec = {'kind': 'custom', 'field': lambda y: np.atleast_2d(y) - 5.0, 'support_radius': 0.5,
                'center': [5.0, 5.0, 5.0]}
        with pytest.raises(ValueError, match="divergence"):
            seed_markers(spec, 0.1)

    def test_scaled_and_reset(self):
        markers = seed_markers(BLOB, 0.2)
        half = markers.scaled(0.5)
        assert np.allclose(half.vorticity(), 0.5 * markers.vorticity())
        moved = markers.with_state(markers.X + 1.0, 2.0 * markers.G)
        back = moved.reset()
        assert np.array_equal(back.X, markers.x0)
        assert np.allclose(back.G, np.eye(3))


class TestCauchy:
    def test_stretching(self):
        G = np.diag([2.0, 0.5, 1.0])
        assert np.allclose(cauchy_vorticity(G, [1.0, 1.0, 1.0]), [2.0, 0.5, 1.0])

    def test_stack(self):
        G = np.stack([np.eye(3), 2 * np.eye(3)])
        omega = cauchy_vorticity(G, np.ones((2, 3)))
        assert np.allclose(omega, [[1, 1, 1], [2, 2, 2]])


class TestVorticityGradient:
    C = 0.3

    def sheared_lattice(self):
        # map y = (x1, x2 + c x1^2, x3) applied to omega0 = (1, 0, x2)
        axis = 0.1 * np.arange(5)
        x0 = np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3)
        n = len(x0)
        X = x0 + np.column_stack([np.zeros(n), self.C * x0[:, 0] ** 2, np.zeros(n)])
        G = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        G[:, 1, 0] = 2.0 * self.C * x0[:, 0]
        omega0 = np.column_stack([np.ones(n), np.zeros(n), x0[:, 1]])
        grad_omega0 = np.zeros((n, 3, 3))
        grad_omega0[:, 2, 1] = 1.0
        return MarkerSet(x0=x0, X=X, G=G, omega0=omega0, grad_omega0=grad_omega0, vol=np.full(n, 1e-3),
                         eps=0.2, spacing=0.1)

    def test_nonuniform_jacobian_enters_the_gradient(self):
        markers = self.sheared_lattice()
        y1 = markers.X[:, 0]
        expected = np.zeros((markers.n, 3, 3))
        expected[:, 1, 0] = 2.0 * self.C
        expected[:, 2, 0] = -2.0 * self.C * y1
        expected[:, 2, 1] = 1.0
        assert np.allclose(markers.vorticity_gradient(), expected, atol=1e-10)
        curl = markers.vorticity_curl()
        assert np.allclose(curl, np.column_stack([np.ones(markers.n), 2.0 * self.C * y1,
                                                  np.full(markers.n, 2.0 * self.C)]), atol=1e-10)

    def test_jacobian_gradient_vanishes_initially(self):
        markers = seed_markers(BLOB, 0.2)
        assert not np.any(markers.jacobian_gradient())
        assert np.allclose(markers.vorticity_gradient(), markers.grad_omega0)


class TestBlobKernels:
    def test_far_field_biot_savart(self):
        v = blob_velocity(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), 0.01)
        assert np.allclose(v[0], [0.0, 1.0 / (4 * np.pi), 0.0], rtol=1e-3, atol=1e-8)

    def test_velocity_gradient_matches_differences(self):
        rng = np.random.default_rng(0)
        X, alpha = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        pts = rng.normal(size=(4, 3)) + 2.0
        grad = blob_velocity_gradient(pts, X, alpha, 0.3)
        step = 1e-6
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            fd = (blob_velocity(pts + e, X, alpha, 0.3) - blob_velocity(pts - e, X, alpha, 0.3)) / (2 * step)
            assert np.allclose(grad[:, :, j], fd, atol=1e-7)
        assert np.allclose(np.trace(grad, axis1=1, axis2=2), 0.0, atol=1e-12)

    def test_potential_gradient_matches_differences(self):
        rng = np.random.default_rng(1)
        X, q = rng.normal(size=(5, 3)), rng.normal(size=5)
        pts = rng.normal(size=(3, 3)) + 1.5
        grad = blob_potential_gradient(pts, X, q, 0.2)
        step = 1e-6
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            fd = (blob_potential(pts + e, X, q, 0.2) - blob_potential(pts - e, X, q, 0.2)) / (2 * step)
            assert np.allclose(grad[:, j], fd, atol=1e-7)

    def test_empty_sets(self):
        pts = np.ones((2, 3))
        assert np.all(blob_velocity(pts, np.zeros((0, 3)), np.zeros((0, 3)), 0.1) == 0)
        assert np.all(blob_potential(pts, np.zeros((0, 3)), np.zeros(0), 0.1) == 0)


class TestEtaReconstruction:
    def test_no_normal_flow_through_body(self, sphere_coarse):
        markers = seed_markers(BLOB, 0.2, sphere_coarse.mesh)
        eta = reconstruct_eta(markers, sphere_coarse.mesh, sphere_coarse.tables.solver)
        normal = np.einsum('nk,nk->n', eta.boundary_value(sphere_coarse.mesh), sphere_coarse.mesh.normals)
        assert np.abs(normal).max() < 1e-8 + abs(eta.flux_imbalance)

    def test_divergence_free(self, sphere_coarse):
        markers = seed_markers(BLOB, 0.2, sphere_coarse.mesh)
        eta = reconstruct_eta(markers, sphere_coarse.mesh, sphere_coarse.tables.solver)
        pts = np.array([[2.0, 0.5, 0.0], [0.0, -2.0, 1.0], [0.3, 0.2, 3.5]])
        grad = eta.gradient(pts)
        assert np.abs(np.trace(grad, axis1=1, axis2=2)).max() < 1e-8 * np.abs(grad).max()

    def test_curl_reproduces_mollified_vorticity(self, sphere_coarse):
        blob = dict(BLOB, center=[0.0, 0.0, 4.0], strength=1.0)
        markers = seed_markers(blob, 0.1, sphere_coarse.mesh)
        eta = reconstruct_eta(markers, sphere_coarse.mesh, sphere_coarse.tables.solver)
        pts = np.array([[0.0, 0.0, 4.0], [0.15, -0.1, 4.1], [-0.2, 0.1, 3.85]])
        step = 1e-4
        grad = np.zeros((len(pts), 3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            grad[:, :, j] = (eta.value(pts + e) - eta.value(pts - e)) / (2 * step)
        curl = np.stack([grad[:, 2, 1] - grad[:, 1, 2], grad[:, 0, 2] - grad[:, 2, 0],
                         grad[:, 1, 0] - grad[:, 0, 1]], axis=1)
        expected = blob_vorticity(pts, markers.X, markers.alpha, markers.eps)
        assert np.linalg.norm(curl - expected, axis=1).max() < 0.05 * np.linalg.norm(expected, axis=1).max()

    def test_flow_without_markers_is_potential(self, sphere_coarse):
        flow = FlowField(sphere_coarse.tables, [0.1, 0.0, 0.0], [0.0, 0.2, 0.0], np.zeros(3))
        pts = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, -3.0]])
        assert np.array_equal(flow.velocity(pts), flow.potential_velocity(pts))
        assert np.all(flow.vorticity(pts) == 0)


class TestTransport:
    def test_rigid_rotation_preserves_volume(self):
        markers = single_marker([[1.0, 0.0, 0.0], [0.0, 2.0, 0.5], [-1.0, 1.0, -1.0]], np.ones((3, 3)))
        r = np.array([0.0, 0.0, 1.0])
        for _ in range(1000):
            markers = advect_markers(markers, ZeroFlow(), np.zeros(3), r, 1e-3)
        assert np.abs(markers.det_G() - 1.0).max() < 1e-6
        c, s = np.cos(1.0), np.sin(1.0)
        rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        assert np.allclose(markers.X, markers.x0 @ rot.T, atol=1e-9)

    def test_translation(self):
        markers = single_marker([[3.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
        moved = advect_markers(markers, ZeroFlow(), np.array([1.0, 0.0, 0.0]), np.zeros(3), 0.5)
        assert np.allclose(moved.X, [[2.5, 0.0, 0.0]])
        assert np.allclose(moved.G, np.eye(3))

    def test_nonpositive_step(self):
        with pytest.raises(ValueError, match="positive"):
            advect_markers(single_marker([[3.0, 0, 0]], [[0, 0, 1.0]]), ZeroFlow(), np.zeros(3), np.zeros(3), 0.0)

    def test_collision_detected(self, sphere_coarse):
        with pytest.raises(CollisionError) as info:
            check_clearance(single_marker([[3.0, 0, 0], [0.5, 0.0, 0.0]], np.ones((2, 3))), sphere_coarse.mesh)
        assert info.value.marker_index == 1

    def test_advection_checks_clearance(self, sphere_coarse):
        markers = single_marker([[1.3, 0.0, 0.0]], [[0.0, 0.0, 1.0]], spacing=0.5)
        with pytest.raises(CollisionError):
            advect_markers(markers, ZeroFlow(), np.array([1.0, 0.0, 0.0]), np.zeros(3), 0.4, mesh=sphere_coarse.mesh)


class TestNorms:
    def test_window(self):
        check_norm_window(4.0, 0.0, 0.25)
        with pytest.raises(ValueError, match="p must"):
            check_norm_window(3.0, 0.0, 0.1)
        with pytest.raises(ValueError, match="delta"):
            check_norm_window(4.0, 0.25, 0.1)
        with pytest.raises(ValueError, match="alpha"):
            check_norm_window(4.0, 0.0, 0.3)

    def test_japanese_bracket(self):
        assert np.allclose(japanese_bracket(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]])), [1.0, np.sqrt(10.0)])

    def test_holder_of_constant_and_linear(self):
        X = np.random.default_rng(0).normal(size=(30, 3))
        assert holder_seminorm(np.ones((30, 3)), X, 0.2) == 0.0
        values = np.column_stack([X[:, 0], np.zeros(30), np.zeros(30)])
        # a Lipschitz-1 field has alpha = 1 seminorm at most 1
        assert holder_seminorm(values, X, 1.0) <= 1.0 + 1e-12

    def test_diagnostics(self):
        markers = seed_markers(BLOB, 0.2)
        diag = norm_diagnostics(markers, [0.1, 0.0, 0.0], [0.0, 0.0, 0.2])
        assert diag.velocity == pytest.approx(0.3)
        assert diag.triple == pytest.approx(diag.velocity + diag.sup + diag.holder + diag.lp)
        assert diag.sup > 0 and diag.lp > 0
        empty = norm_diagnostics(MarkerSet.empty(), [0.1, 0.0, 0.0], np.zeros(3))
        assert empty.triple == pytest.approx(0.1)

    def test_diagnostics_scale_linearly(self):
        markers = seed_markers(BLOB, 0.2)
        full = norm_diagnostics(markers, np.zeros(3), np.zeros(3))
        half = norm_diagnostics(markers.scaled(0.5), np.zeros(3), np.zeros(3))
        assert half.vorticity == pytest.approx(0.5 * full.vorticity, rel=1e-12)

    def test_weighted_norm_stable_under_spacing_halving(self):
        coarse = norm_diagnostics(seed_markers(BLOB, 0.1), np.zeros(3), np.zeros(3))
        fine = norm_diagnostics(seed_markers(BLOB, 0.05), np.zeros(3), np.zeros(3))
        assert fine.m0 == pytest.approx(coarse.m0, rel=0.02)


class TestExport:
    def test_csv_round_trip(self, tmp_path):
        markers = seed_markers(BLOB, 0.2)
        path = str(tmp_path / 'markers.csv')
        export_markers_csv(markers, path)
        back = read_markers_csv(path, markers.eps, markers.spacing)
        assert np.array_equal(back.X, markers.X)
        assert np.array_equal(back.omega0, markers.omega0)
        assert np.array_equal(back.grad_omega0, markers.grad_omega0)

    def test_empty_csv(self, tmp_path):
        path = str(tmp_path / 'none.csv')
        export_markers_csv(MarkerSet.empty(), path)
        assert read_markers_csv(path, 0.1, 0.05).n == 0
