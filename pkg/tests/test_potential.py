"""
Tests for the exterior Neumann solver and the added-mass assembly.
"""

import numpy as np
import pytest

from src.geometry import ControlBasis, build_sphere_mesh
from src.potential import (
    FOUR_PI, RULE_BARY, RULE_WEIGHTS, AddedMassSet, ExteriorNeumannSolver, _flat_panel_integrals,
    eval_potential_velocity, export_added_mass, get_solver, import_added_mass, kirchhoff_tables,
    solve_exterior_neumann,
)

TWO_PI_THIRDS = 2.0 * np.pi / 3.0


class TestSphereOracle:
    """Translation potential of the unit sphere: phi_3 = -z / (2 |y|^3)."""

    def test_added_mass(self, sphere_fine):
        M = sphere_fine.mats.M
        assert np.linalg.norm(M - TWO_PI_THIRDS * np.eye(3)) / np.linalg.norm(TWO_PI_THIRDS * np.eye(3)) < 0.02
        assert np.linalg.norm(sphere_fine.mats.J) < 0.02
        assert np.linalg.norm(sphere_fine.mats.N) < 0.02

    def test_potential_and_velocity_on_axis(self, sphere_fine):
        phi3 = sphere_fine.tables.potentials[2]
        point = np.array([[0.0, 0.0, 2.0]])
        assert phi3.value(point)[0] == pytest.approx(-0.125, rel=0.03)
        grad = phi3.gradient(point)[0]
        assert grad[2] == pytest.approx(0.125, rel=0.03)
        assert abs(grad[0]) < 5e-3 and abs(grad[1]) < 5e-3

    def test_neumann_data_reproduced(self, sphere_fine):
        for potential in sphere_fine.tables.potentials:
            assert potential.neumann_residual() < 1e-8

    def test_pre_symmetrization_asymmetry(self, sphere_fine):
        assert sphere_fine.mats.asymmetry['M'] < 1e-2


class TestInertiaAssembly:
    def test_exact_symmetry_and_definiteness(self, sphere_medium, ellipsoid_six):
        for model in (sphere_medium, ellipsoid_six):
            calJ = model.mats.calJ
            assert np.array_equal(calJ, calJ.T)
            assert np.linalg.eigvalsh(calJ).min() > 0

    def test_ellipsoid_added_mass_ordering(self, ellipsoid_six):
        # the long axis carries the smallest added mass
        M = ellipsoid_six.mats.M
        assert M[0, 0] < M[1, 1] < M[2, 2]

    def test_control_couplings(self, sphere_medium):
        mats = sphere_medium.mats
        assert mats.C.shape == (6, 6)
        assert mats.WM.shape == (6, 3, 6)
        # the +x/-x patch pair pushes along x
        assert abs(mats.CM[0, 0]) > 10 * max(abs(mats.CM[1, 0]), abs(mats.CM[2, 0]))

    def test_ellipsoid_controls_reach_every_rigid_mode(self, ellipsoid_six):
        assert np.linalg.matrix_rank(ellipsoid_six.mats.C, tol=1e-6 * np.abs(ellipsoid_six.mats.C).max()) == 6

    def test_ellipsoid_force_and_torque_channels_separate(self, ellipsoid_six):
        # odd profiles push, even profiles turn
        C = ellipsoid_six.mats.C
        scale = np.abs(C).max()
        assert np.abs(C[3:, :3]).max() < 1e-6 * scale
        assert np.abs(C[:3, 3:]).max() < 1e-6 * scale
        assert np.linalg.matrix_rank(C[:3, :3], tol=1e-6 * scale) == 3
        assert np.linalg.matrix_rank(C[3:, 3:], tol=1e-6 * scale) == 3

    def test_dict_round_trip(self, sphere_coarse, tmp_path):
        mats = sphere_coarse.mats
        back = AddedMassSet.from_dict(mats.to_dict())
        assert np.array_equal(back.calJ, mats.calJ)
        assert np.array_equal(back.WJ, mats.WJ)
        path = str(tmp_path / 'added_mass.json')
        export_added_mass(mats, path)
        loaded = import_added_mass(path)
        assert np.array_equal(loaded.C, mats.C)
        assert loaded.geometry_hash == mats.geometry_hash


class TestNeumannSolver:
    def test_nonzero_flux_rejected(self):
        mesh = build_sphere_mesh(1.0, 1)
        with pytest.raises(ValueError, match="net flux"):
            solve_exterior_neumann(mesh, np.ones(mesh.n_panels))

    def test_nonzero_flux_allowed_on_request(self):
        mesh = build_sphere_mesh(1.0, 1)
        potential = solve_exterior_neumann(mesh, np.ones(mesh.n_panels), require_zero_flux=False)
        assert potential.neumann_residual() < 1e-8
        # a point source: positive far-field decay like 1/|y|
        far = potential.value(np.array([[10.0, 0.0, 0.0], [20.0, 0.0, 0.0]]))
        assert far[0] / far[1] == pytest.approx(2.0, rel=0.05)

    def test_wrong_length(self):
        mesh = build_sphere_mesh(1.0, 1)
        with pytest.raises(ValueError, match="entries"):
            solve_exterior_neumann(mesh, np.zeros(3))

    def test_zero_data_gives_zero_density(self):
        mesh = build_sphere_mesh(1.0, 1)
        assert not np.any(solve_exterior_neumann(mesh, np.zeros(mesh.n_panels)).sigma)

    def test_shared_solver(self):
        mesh = build_sphere_mesh(1.0, 1)
        assert get_solver(mesh) is get_solver(mesh)

    def test_threaded_assembly_is_deterministic(self):
        mesh = build_sphere_mesh(1.0, 2)
        serial = ExteriorNeumannSolver(mesh, max_workers=1)
        threaded = ExteriorNeumannSolver(mesh, max_workers=4)
        assert np.array_equal(serial.K, threaded.K)
        assert np.array_equal(serial.S, threaded.S)

    def test_condition_estimate_recorded(self):
        solver = ExteriorNeumannSolver(build_sphere_mesh(1.0, 1))
        solver.solve(np.eye(80)[0] - 1.0 / 80)
        assert 1.0 <= solver.condition < 1e3


class TestKirchhoffTables:
    def test_non_zero_mean_control_rejected(self):
        mesh = build_sphere_mesh(1.0, 1)
        bad = ControlBasis(values=np.ones((1, mesh.n_panels)), supports=np.ones((1, mesh.n_panels), dtype=bool))
        with pytest.raises(ValueError, match="net flux"):
            kirchhoff_tables(mesh, bad)

    def test_boundary_velocity_matches_slip_data(self, sphere_coarse):
        tables = sphere_coarse.tables
        mesh = tables.mesh
        l, r, w = np.array([0.3, -0.1, 0.2]), np.array([0.0, 0.5, -0.2]), np.array([0.1, 0.0, -0.3])
        normal = np.einsum('nk,nk->n', tables.boundary_velocity(l, r, w), mesh.normals)
        expected = np.einsum('nk,nk->n', l + np.cross(r, mesh.centroids), mesh.normals) + w @ tables.data[6:]
        assert np.allclose(normal, expected, atol=1e-10)

    def test_velocity_inside_body_rejected(self, sphere_coarse):
        with pytest.raises(ValueError, match="inside"):
            eval_potential_velocity(sphere_coarse.tables, np.ones(3), np.zeros(3), np.zeros(3), [0.1, 0.0, 0.0])

    def test_velocity_single_point_shape(self, sphere_coarse):
        v = eval_potential_velocity(sphere_coarse.tables, [1.0, 0.0, 0.0], np.zeros(3), np.zeros(3), [3.0, 0.0, 0.0])
        assert v.shape == (3,)


class TestFlatPanelIntegrals:
    TRIANGLE = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, np.sqrt(3.0) / 2.0, 0.0]]])
    UP = np.array([[0.0, 0.0, 1.0]])

    def test_centroid_of_equilateral_triangle(self):
        centroid = self.TRIANGLE.mean(axis=1)
        value, grad = _flat_panel_integrals(centroid, self.TRIANGLE, self.UP)
        assert value[0] == pytest.approx(np.sqrt(3.0) * np.log(2.0 + np.sqrt(3.0)) / FOUR_PI, rel=1e-12)
        assert np.allclose(grad, 0.0, atol=1e-12)

    def test_matches_quadrature_away_from_the_panel(self):
        area = np.sqrt(3.0) / 4.0
        points = np.einsum('qv,vk->qk', RULE_BARY, self.TRIANGLE[0])
        for x in ([0.3, 0.2, 2.0], [3.0, -1.0, 0.5], [-2.0, 1.5, -1.0]):
            x = np.array(x)
            d = x - points
            r = np.linalg.norm(d, axis=1)
            value_q = area * RULE_WEIGHTS @ (1.0 / r) / FOUR_PI
            grad_q = -area * (RULE_WEIGHTS / r ** 3) @ d / FOUR_PI
            value, grad = _flat_panel_integrals(x[None, :], self.TRIANGLE, self.UP)
            assert value[0] == pytest.approx(value_q, rel=1e-4)
            assert np.allclose(grad[0], grad_q, rtol=1e-3, atol=1e-7)

    def test_normal_jump_above_the_panel(self):
        centroid = self.TRIANGLE.mean(axis=1)
        _, above = _flat_panel_integrals(centroid + 1e-9 * self.UP, self.TRIANGLE, self.UP)
        _, below = _flat_panel_integrals(centroid - 1e-9 * self.UP, self.TRIANGLE, self.UP)
        assert above[0, 2] == pytest.approx(-0.5, abs=1e-6)
        assert below[0, 2] == pytest.approx(0.5, abs=1e-6)


class TestClosedSurfaceFlux:
    def test_area_weighted_columns(self):
        mesh = build_sphere_mesh(1.0, 2)
        solver = ExteriorNeumannSolver(mesh)
        A = 0.5 * np.eye(mesh.n_panels) + solver.K
        assert np.allclose(mesh.areas @ A, mesh.areas, rtol=0.0, atol=1e-12)

    def test_self_terms_are_small(self):
        mesh = build_sphere_mesh(1.0, 2)
        diag = np.diag(ExteriorNeumannSolver(mesh).K)
        assert np.abs(diag).max() < 0.1

    def test_boundary_gradient_normal_part_matches_normal_derivative(self, sphere_coarse):
        solver = sphere_coarse.tables.potentials[0].solver
        sigma = sphere_coarse.tables.potentials[0].sigma
        grads = solver.boundary_gradients(sigma[None, :])[0]
        normal = np.einsum('nk,nk->n', grads, solver.mesh.normals)
        assert np.allclose(normal, solver.normal_derivative(sigma), atol=1e-12)
