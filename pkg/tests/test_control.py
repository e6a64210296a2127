"""
Tests for shooting, retargeting with vorticity and time scaling.
"""

import json

import numpy as np
import pytest

from src.control import (
    SteeringProblem, _check_range, check_trust_region, deviation_epsilon, export_steering, potential_steering,
    retarget_with_vorticity, scale_state, steer_full, time_scale, unscale_control, unscale_trajectory,
)
from src.core_math import RigidState
from src.errors import ControllabilityError, ConvergenceError
from src.rigid_potential import ControlSignal, integrate_potential
from src.vorticity import MarkerSet, seed_markers

TARGET = RigidState(h=[0.01, 0.0, 0.0], q=[0.0, 0.005, 0.0])


def problem(target=TARGET, horizon=1.0):
    return SteeringProblem(initial=RigidState(), target=target, horizon=horizon, n_knots=2)


@pytest.fixture(scope='module')
def steered(ellipsoid_six):
    return potential_steering(problem(), ellipsoid_six.mats, tol=1e-8, dt=0.05)


class TestProblem:
    def test_validation(self):
        with pytest.raises(ValueError, match="horizon"):
            SteeringProblem(RigidState(), TARGET, 0.0)
        with pytest.raises(ValueError, match="knot"):
            SteeringProblem(RigidState(), TARGET, 1.0, n_knots=0)
        with pytest.raises(ValueError, match="chart boundary"):
            SteeringProblem(RigidState(), RigidState(q=[1.0, 0.0, 0.0]), 1.0)

    def test_reversed_and_retargeted(self):
        p = problem()
        assert p.reversed().initial is TARGET
        moved = p.retargeted(np.arange(12) * 0.001)
        assert np.array_equal(moved.target.as_vector(), np.arange(12) * 0.001)
        assert moved.initial is p.initial


class TestPotentialSteering:
    def test_already_at_target(self, ellipsoid_six):
        result = potential_steering(problem(target=RigidState()), ellipsoid_six.mats, dt=0.05)
        assert result.iterations == 0
        assert not np.any(result.control.coefficients)

    def test_reaches_small_target(self, steered, ellipsoid_six):
        assert steered.success
        assert steered.residual < 1e-8
        final = integrate_potential(RigidState(), steered.control, 1.0, 0.05, ellipsoid_six.mats).final
        assert np.allclose(final.as_vector(), TARGET.as_vector(), atol=1e-8)
        assert steered.history[0] > steered.history[-1]

    def test_too_few_coefficients(self, sphere_coarse):
        p = SteeringProblem(RigidState(), TARGET, 1.0, n_knots=1)
        with pytest.raises(ValueError, match="12-dim"):
            potential_steering(p, sphere_coarse.mats)

    def test_unreachable_direction_detected(self):
        with pytest.raises(ControllabilityError):
            _check_range(np.zeros((12, 3)), np.ones(12))
        assert _check_range(np.eye(12), np.ones(12)) == 12

    def test_export(self, steered, tmp_path):
        paths = export_steering(steered, str(tmp_path), header={'command': 'steer'})
        document = json.load(open(paths['json']))
        assert document['command'] == 'steer'
        assert document['residual'] == pytest.approx(steered.residual)
        assert len(document['coefficients']) == steered.control.n_coefficients
        assert open(paths['csv']).readline().startswith('t,')


class TestRetargeting:
    def test_trust_region(self):
        with pytest.raises(ValueError, match="trust region"):
            check_trust_region(problem(target=RigidState(h=[0.2, 0.0, 0.0])), 0.1)

    def test_without_vorticity_one_step(self, ellipsoid_six):
        result = retarget_with_vorticity(problem(), MarkerSet.empty(), ellipsoid_six.tables, ellipsoid_six.mats,
                                         tol=1e-6, dt=0.05)
        assert result.iterations == 1
        assert result.epsilon == 0.0
        assert result.residual < 1e-6

    def test_small_blob_is_absorbed(self, ellipsoid_six):
        blob = {'kind': 'blob', 'center': [0.0, 0.0, 2.8], 'radius': 0.4, 'vector': [1.0, 0.0, 0.0],
                'strength': 0.05}
        seed = seed_markers(blob, 0.2, ellipsoid_six.mesh)
        result = retarget_with_vorticity(problem(), seed, ellipsoid_six.tables, ellipsoid_six.mats, tol=1e-5,
                                         dt=0.05)
        assert result.residual < 1e-4
        assert result.iterations <= 20
        assert result.epsilon < 0.5
        assert result.trajectory.markers[-1].n == seed.n

    def test_deviation_halves_with_the_blob(self, ellipsoid_six):
        blob = {'kind': 'blob', 'center': [0.5, 0.3, 2.8], 'radius': 0.4, 'vector': [1.0, 0.0, 0.0],
                'strength': 0.05}
        seed = seed_markers(blob, 0.2, ellipsoid_six.mesh)
        eps = [deviation_epsilon(problem(), seed.scaled(scale), ellipsoid_six.tables, ellipsoid_six.mats, 0.1,
                                 0.05, 1e-9) for scale in (1.0, 0.5)]
        assert eps[1] > 0
        assert 1.6 <= eps[0] / eps[1] <= 2.4

    def test_growing_error_raises(self, monkeypatch):
        # endpoint map with slope 3 around the target: x <- x + (x* - f) overshoots
        x_star = TARGET.as_vector()
        offset = np.full(12, 1e-4)
        calls = []

        def endpoint(problem, target, *args):
            calls.append(target)
            return x_star + 3.0 * (target - x_star) + offset, None, None

        monkeypatch.setattr('src.control._coupled_endpoint', endpoint)
        with pytest.raises(ConvergenceError, match="diverges") as info:
            retarget_with_vorticity(problem(), MarkerSet.empty(), None, None, tol=1e-8)
        assert len(calls) == 3
        assert info.value.best_residual == pytest.approx(np.linalg.norm(offset))
        assert info.value.iterations == 3


class TestTimeScaling:
    def test_lambda_range(self):
        control = ControlSignal(3, 1.0, 2)
        for lam in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError, match="time-scaling"):
                time_scale(RigidState(), MarkerSet.empty(), control, lam)

    def test_identity_at_one(self):
        control = ControlSignal(3, 1.0, 2)
        state = RigidState(l=[0.1, 0.0, 0.0])
        assert time_scale(state, MarkerSet.empty(), control, 1.0)[2] is control

    def test_scaled_data(self):
        state = RigidState(h=[0.1, 0.0, 0.0], l=[0.2, 0.0, 0.0], r=[0.0, 0.4, 0.0])
        scaled = scale_state(state, 0.5)
        assert np.array_equal(scaled.h, state.h)
        assert np.allclose(scaled.l, [0.1, 0.0, 0.0]) and np.allclose(scaled.r, [0.0, 0.2, 0.0])

    def test_scaled_trajectory_maps_back_exactly(self, ellipsoid_six):
        rng = np.random.default_rng(7)
        control = ControlSignal(6, 1.0, 2)
        control.set_coefficients(0.1 * rng.normal(size=control.n_coefficients))
        state0 = RigidState(l=[0.05, 0.0, 0.02], r=[0.0, 0.1, 0.0])
        lam = 0.25
        direct = integrate_potential(state0, control, 1.0, 0.05, ellipsoid_six.mats)
        scaled = integrate_potential(scale_state(state0, lam), control.time_scaled(lam), 1.0 / lam, 0.05 / lam,
                                     ellipsoid_six.mats)
        back = unscale_trajectory(scaled, lam)
        assert back.states.shape == direct.states.shape
        assert np.abs(back.states - direct.states).max() < 1e-9
        assert np.abs(back.times - direct.times).max() < 1e-12

    def test_unscale_control(self):
        rng = np.random.default_rng(8)
        control = ControlSignal(2, 1.0, 3)
        control.set_coefficients(rng.normal(size=control.n_coefficients))
        back = unscale_control(control.time_scaled(0.5), 0.5)
        times = np.linspace(0.0, 1.0, 9)
        assert np.allclose(back(times), control(times), atol=1e-13)

    def test_unscale_rejects_other_types(self):
        with pytest.raises(TypeError):
            unscale_trajectory(object(), 0.5)


class TestSteerFull:
    def test_full_time_budget(self, ellipsoid_six):
        result = steer_full(problem(), MarkerSet.empty(), 2.0, ellipsoid_six.tables, ellipsoid_six.mats, dt=0.05)
        assert result.lam == 1.0
        assert result.residual < 1e-5
        assert result.meta['physical_horizon'] == pytest.approx(1.0)

    def test_halved_time_budget(self, ellipsoid_six):
        result = steer_full(problem(), MarkerSet.empty(), 0.5, ellipsoid_six.tables, ellipsoid_six.mats, dt=0.05)
        assert result.lam == 0.5
        assert result.meta['physical_horizon'] == pytest.approx(0.5)
        assert result.residual < 10 * 1e-6 / 0.5
        assert result.meta['attitude_error'] <= result.residual
        assert result.control.knots[-1] == pytest.approx(0.5)

    def test_nonpositive_budget(self, ellipsoid_six):
        with pytest.raises(ValueError, match="budget"):
            steer_full(problem(), MarkerSet.empty(), 0.0, ellipsoid_six.tables, ellipsoid_six.mats)
