"""
Tests for the finite-dimensional potential-flow model.
"""

import numpy as np
import pytest

from src.core_math import RigidState
from src.errors import ChartExitError
from src.rigid_potential import (
    ControlSignal, energy, export_control_csv, export_trajectory_csv, integrate_potential, potential_loads,
    potential_rhs, quadratic_force, step_count,
)


def wave_control(m, horizon, n_knots=3, seed=0, amplitude=0.1):
    rng = np.random.default_rng(seed)
    control = ControlSignal(m, horizon, n_knots)
    control.set_coefficients(amplitude * rng.normal(size=control.n_coefficients))
    return control


class TestControlSignal:
    def test_starts_at_zero(self):
        control = wave_control(3, 2.0)
        assert np.allclose(control(0.0), 0.0)
        assert control.n_coefficients == 3 * 7

    def test_wrong_coefficient_count(self):
        with pytest.raises(ValueError, match="control coefficients"):
            ControlSignal(2, 1.0, 2, np.zeros(4))

    def test_bad_arguments(self):
        with pytest.raises(ValueError, match="horizon"):
            ControlSignal(1, 0.0, 2)
        with pytest.raises(ValueError, match="knot"):
            ControlSignal(1, 1.0, 0)

    def test_derivative_matches_differences(self):
        control = wave_control(2, 1.0)
        t, step = 0.37, 1e-6
        fd = (control(t + step) - control(t - step)) / (2 * step)
        assert np.allclose(control.derivative(t), fd, atol=1e-7)

    def test_time_scaled(self):
        control = wave_control(2, 1.0)
        lam = 0.25
        scaled = control.time_scaled(lam)
        assert scaled.knots[-1] == pytest.approx(4.0)
        for s in (0.0, 0.7, 2.3, 4.0):
            assert np.allclose(scaled(s), lam * control(lam * s), atol=1e-15)
            assert np.allclose(scaled.derivative(s), lam * lam * control.derivative(lam * s), atol=1e-15)

    def test_dict_round_trip(self):
        control = wave_control(3, 1.5)
        back = ControlSignal.from_dict(control.to_dict())
        times = np.linspace(0.0, 1.5, 11)
        assert np.array_equal(back.samples(times), control.samples(times))

    def test_no_channels(self):
        control = ControlSignal(0, 1.0, 2)
        assert control(0.5).shape == (0,)
        assert control.n_coefficients == 0

    def test_from_knots_requires_rest_start(self):
        with pytest.raises(ValueError, match="vanish"):
            ControlSignal.from_knots([0.0, 1.0], [[1.0], [0.0]], [[0.0], [0.0]])


class TestDynamics:
    def test_rest_stays_at_rest(self, sphere_coarse):
        traj = integrate_potential(RigidState(), ControlSignal(3, 1.0, 2), 1.0, 0.05, sphere_coarse.mats)
        assert np.all(traj.states == 0.0)

    def test_energy_conserved_without_control(self, ellipsoid_six):
        mats = ellipsoid_six.mats
        state0 = RigidState(l=[0.1, 0.2, -0.05], r=[0.05, 0.0, 0.3])
        traj = integrate_potential(state0, ControlSignal(6, 2.0, 2), 2.0, 1e-2, mats)
        energies = traj.energies(mats)
        assert np.abs(energies - energies[0]).max() / energies[0] < 1e-8

    def test_quadratic_force_does_no_work(self, ellipsoid_six):
        mats = ellipsoid_six.mats
        rng = np.random.default_rng(2)
        l, r = rng.normal(size=3), rng.normal(size=3)
        F = quadratic_force(l, r, np.zeros(6), mats)
        assert abs(F @ np.concatenate([l, r])) < 1e-10 * np.linalg.norm(F) * np.linalg.norm(np.concatenate([l, r]))

    def test_sphere_coasts_in_a_straight_line(self, sphere_coarse):
        state0 = RigidState(l=[0.1, 0.0, 0.0])
        traj = integrate_potential(state0, ControlSignal(3, 2.0, 2), 2.0, 0.1, sphere_coarse.mats)
        assert np.allclose(traj.final.h, [0.2, 0.0, 0.0], atol=1e-12)
        assert np.allclose(traj.l, [0.1, 0.0, 0.0], atol=1e-12)

    def test_control_accelerates_body(self, sphere_coarse):
        control = wave_control(3, 1.0, seed=4)
        traj = integrate_potential(RigidState(), control, 1.0, 0.01, sphere_coarse.mats)
        assert np.linalg.norm(traj.final.l) > 0
        ldot, _ = potential_rhs(np.zeros(3), np.zeros(3), control(0.5), control.derivative(0.5), sphere_coarse.mats)
        assert np.allclose(ldot, sphere_coarse.mats.solve(sphere_coarse.mats.C @ control.derivative(0.5)
                                                          + quadratic_force(np.zeros(3), np.zeros(3), control(0.5),
                                                                            sphere_coarse.mats))[:3])

    def test_grid_ends_at_horizon(self, sphere_coarse):
        traj = integrate_potential(RigidState(), ControlSignal(3, 1.0, 2), 1.0, 0.3, sphere_coarse.mats)
        assert traj.times[-1] == pytest.approx(1.0)
        assert len(traj.times) == 5

    def test_fourth_order_convergence(self, ellipsoid_six):
        control = wave_control(6, 2.0, n_knots=2, seed=5, amplitude=0.2)
        state0 = RigidState(l=[0.2, -0.1, 0.05], r=[0.3, 0.4, -0.2])
        reference = integrate_potential(state0, control, 2.0, 0.025, ellipsoid_six.mats).states[-1]
        runs = [integrate_potential(state0, control, 2.0, dt, ellipsoid_six.mats) for dt in (0.2, 0.1)]
        errors = [np.abs(run.states[-1] - reference).max() for run in runs]
        assert errors[1] > 0
        assert errors[0] / errors[1] >= 8.0

    def test_channel_mismatch(self, sphere_coarse):
        with pytest.raises(ValueError, match="channels"):
            integrate_potential(RigidState(), ControlSignal(2, 1.0, 2), 1.0, 0.1, sphere_coarse.mats)

    def test_chart_exit(self, sphere_coarse):
        state0 = RigidState(q=[0.0, 0.0, 1.0 - 1e-12], r=[0.0, 0.0, 1.0])
        with pytest.raises(ChartExitError):
            integrate_potential(state0, ControlSignal(3, 1.0, 2), 1.0, 0.01, sphere_coarse.mats)

    def test_loads_at_rest(self, sphere_coarse):
        assert np.allclose(potential_loads(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), sphere_coarse.mats), 0)
        assert energy(np.zeros(3), np.zeros(3), sphere_coarse.mats) == 0.0


class TestStepCount:
    def test_values(self):
        assert step_count(1.0, 0.1) == 10
        assert step_count(1.0, 0.3) == 4

    def test_invalid(self):
        with pytest.raises(ValueError):
            step_count(0.0, 0.1)
        with pytest.raises(ValueError):
            step_count(1.0, -0.1)


class TestWorldFrameAndExport:
    def test_world_frame_of_spinning_body(self, sphere_coarse):
        state0 = RigidState(l=[0.1, 0.0, 0.0], r=[0.0, 0.0, 0.5])
        traj = integrate_potential(state0, ControlSignal(3, 1.0, 2), 1.0, 0.01, sphere_coarse.mats)
        world = traj.world_frame()
        assert world['Q'].shape == (len(traj.times), 3, 3)
        # world angular velocity of a free sphere stays fixed
        assert np.allclose(world['angular_velocity'], world['angular_velocity'][0], atol=1e-8)

    def test_csv_exports(self, sphere_coarse, tmp_path):
        control = wave_control(3, 1.0)
        traj = integrate_potential(RigidState(), control, 1.0, 0.1, sphere_coarse.mats)
        path = tmp_path / 'traj.csv'
        export_trajectory_csv(traj, str(path))
        lines = path.read_text().splitlines()
        assert lines[0].startswith('t,h1,h2,h3,q1')
        assert lines[0].endswith('w3')
        assert len(lines) == len(traj.times) + 1
        cpath = tmp_path / 'control.csv'
        export_control_csv(control, str(cpath), n_samples=21)
        body = np.loadtxt(cpath, delimiter=',', skiprows=1)
        assert body.shape == (21, 7)
