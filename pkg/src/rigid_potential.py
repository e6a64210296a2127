"""
Finite-dimensional potential-flow model of the controlled body.

Body-frame velocity dynamics driven by the added-mass set, vector-part
quaternion kinematics, C1 spline controls and a fixed-step RK4 integrator.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .core_math import RigidState, check_chart, kinematics_rhs, quat_to_rotation, renormalize_quat, skew
from .potential import AddedMassSet

logger = logging.getLogger(__name__)


class ControlSignal:
    """
    Control w(t) in R^m from cubic Hermite splines on a uniform knot grid.

    Knots t_k = k T / n_knots, k = 0..n_knots. Per channel the free
    coefficients are the values at knots 1..n_knots followed by the slopes
    at knots 0..n_knots; the value at t = 0 is pinned to zero.
    """

    def __init__(self, m: int, horizon: float, n_knots: int, coefficients: Optional[np.ndarray] = None):
        if m < 0:
            raise ValueError(f"control count must be nonnegative, got {m}")
        if horizon <= 0:
            raise ValueError(f"control horizon must be positive, got {horizon}")
        if n_knots < 1:
            raise ValueError(f"need at least one knot interval, got {n_knots}")
        self.m = int(m)
        self.horizon = float(horizon)
        self.n_knots = int(n_knots)
        self.knots = np.linspace(0.0, self.horizon, self.n_knots + 1)
        if coefficients is None:
            coefficients = np.zeros(self.n_coefficients)
        self.set_coefficients(coefficients)

    @property
    def per_channel(self) -> int:
        return 2 * self.n_knots + 1

    @property
    def n_coefficients(self) -> int:
        return self.m * self.per_channel

    def set_coefficients(self, coefficients: np.ndarray) -> None:
        c = np.asarray(coefficients, dtype=float).reshape(-1)
        if c.shape != (self.n_coefficients,):
            raise ValueError(f"expected {self.n_coefficients} control coefficients, got {c.shape}")
        self.coefficients = c.copy()
        per = c.reshape(self.m, self.per_channel)
        self.values = np.zeros((self.n_knots + 1, self.m))
        self.values[1:] = per[:, :self.n_knots].T
        self.slopes = per[:, self.n_knots:].T.copy()
        if self.m:
            self._spline = CubicHermiteSpline(self.knots, self.values, self.slopes, axis=0)
            self._dspline = self._spline.derivative()

    @classmethod
    def from_knots(cls, knots: np.ndarray, values: np.ndarray, slopes: np.ndarray) -> 'ControlSignal':
        """Rebuild from explicit knot data; knots must be uniform and start at 0."""
        knots = np.asarray(knots, dtype=float)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        slopes = np.atleast_2d(np.asarray(slopes, dtype=float))
        if knots[0] != 0.0:
            raise ValueError("control knots must start at t = 0")
        if np.any(values[0] != 0.0):
            raise ValueError("control must vanish at t = 0")
        n_knots = len(knots) - 1
        m = values.shape[1]
        coeffs = np.concatenate([np.concatenate([values[1:, j], slopes[:, j]]) for j in range(m)]) if m else np.zeros(0)
        signal = cls(m, float(knots[-1]), n_knots, coeffs)
        signal.knots = knots.copy()
        if m:
            signal._spline = CubicHermiteSpline(signal.knots, signal.values, signal.slopes, axis=0)
            signal._dspline = signal._spline.derivative()
        return signal

    def __call__(self, t) -> np.ndarray:
        if not self.m:
            return np.zeros(np.shape(t) + (0,))
        return self._spline(t)

    def derivative(self, t) -> np.ndarray:
        if not self.m:
            return np.zeros(np.shape(t) + (0,))
        return self._dspline(t)

    def copy(self) -> 'ControlSignal':
        return ControlSignal.from_knots(self.knots, self.values, self.slopes)

    def time_scaled(self, lam: float) -> 'ControlSignal':
        """The control s -> lam * w(lam * s) on the stretched horizon T / lam."""
        return ControlSignal.from_knots(self.knots / lam, lam * self.values, lam * lam * self.slopes)

    def samples(self, times: np.ndarray) -> np.ndarray:
        """Rows t, w(t), w'(t)."""
        times = np.asarray(times, dtype=float)
        return np.column_stack([times, self(times), self.derivative(times)])

    def to_dict(self) -> Dict:
        return {'m': self.m, 'knots': self.knots.tolist(), 'values': self.values.tolist(),
                'slopes': self.slopes.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> 'ControlSignal':
        m = int(data['m'])
        n = len(data['knots'])
        return cls.from_knots(data['knots'], np.reshape(data['values'], (n, m)), np.reshape(data['slopes'], (n, m)))


def gyroscopic_terms(l: np.ndarray, r: np.ndarray, mats: AddedMassSet) -> np.ndarray:
    """(m0 r x l, r x J0 r)."""
    return np.concatenate([mats.mass * np.cross(r, l), np.cross(r, mats.inertia @ r)])


def quadratic_force(l: np.ndarray, r: np.ndarray, w: np.ndarray, mats: AddedMassSet) -> np.ndarray:
    """
    F(l, r, w) = -[S(r) 0; S(l) S(r)] (calJ (l; r) - C w)
                 - sum_p w_p (LM_p l + RM_p r + WM_p w; LJ_p l + RJ_p r + WJ_p w)
    """
    w = np.asarray(w, dtype=float)
    z = mats.calJ @ np.concatenate([l, r]) - mats.C @ w
    Sr, Sl = skew(r), skew(l)
    out = -np.concatenate([Sr @ z[:3], Sl @ z[:3] + Sr @ z[3:]])
    if mats.m:
        top = np.einsum('p,pij,j->i', w, mats.LM, l) + np.einsum('p,pij,j->i', w, mats.RM, r) \
            + np.einsum('p,pij,j->i', w, mats.WM, w)
        bottom = np.einsum('p,pij,j->i', w, mats.LJ, l) + np.einsum('p,pij,j->i', w, mats.RJ, r) \
            + np.einsum('p,pij,j->i', w, mats.WJ, w)
        out -= np.concatenate([top, bottom])
    return out


def potential_loads(l, r, w, wdot, mats: AddedMassSet) -> np.ndarray:
    """Generalized fluid loads of potential flow: C w' + F + gyroscopic terms."""
    return mats.C @ np.asarray(wdot, dtype=float) + quadratic_force(l, r, w, mats) + gyroscopic_terms(l, r, mats)


def potential_rhs(l: np.ndarray, r: np.ndarray, w: np.ndarray, wdot: np.ndarray,
                  mats: AddedMassSet) -> Tuple[np.ndarray, np.ndarray]:
    """(l', r') = calJ^{-1} (C w' + F(l, r, w))."""
    l = np.asarray(l, dtype=float)
    r = np.asarray(r, dtype=float)
    rate = mats.solve(mats.C @ np.asarray(wdot, dtype=float) + quadratic_force(l, r, w, mats))
    return rate[:3], rate[3:]


def energy(l: np.ndarray, r: np.ndarray, mats: AddedMassSet) -> float:
    b = np.concatenate([l, r])
    return 0.5 * float(b @ mats.calJ @ b)


def step_count(T: float, dt: float) -> int:
    if T <= 0:
        raise ValueError(f"horizon must be positive, got {T}")
    if dt <= 0:
        raise ValueError(f"time step must be positive, got {dt}")
    return max(1, int(np.ceil(T / dt - 1e-9)))


def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class PotentialTrajectory:
    """Rigid states and controls on a uniform time grid."""
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    dt: float
    order: int = 4
    renormalization: float = 0.0
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory time grid must be strictly increasing")

    @property
    def final(self) -> RigidState:
        return RigidState.from_vector(self.states[-1])

    def state(self, k: int) -> RigidState:
        return RigidState.from_vector(self.states[k])

    @property
    def l(self) -> np.ndarray:
        return self.states[:, 6:9]

    @property
    def r(self) -> np.ndarray:
        return self.states[:, 9:12]

    def energies(self, mats: AddedMassSet) -> np.ndarray:
        return np.array([energy(s[6:9], s[9:12], mats) for s in self.states])

    def world_frame(self) -> Dict[str, np.ndarray]:
        """Position, rotation, and world-frame velocities Q l, Q r."""
        Q = np.array([quat_to_rotation(s[3:6]) for s in self.states])
        return {
            'h': self.states[:, 0:3].copy(),
            'Q': Q,
            'velocity': np.einsum('nij,nj->ni', Q, self.l),
            'angular_velocity': np.einsum('nij,nj->ni', Q, self.r),
        }


def integrate_potential(
    state0: RigidState,
    control: ControlSignal,
    T: float,
    dt: float,
    mats: AddedMassSet
) -> PotentialTrajectory:
    """
    Classical RK4 on the 12-dim potential-flow system.

    The step is T / ceil(T / dt) so the grid ends exactly at T.

    Raises:
        ChartExitError: If |q| reaches 1
        ValueError: On nonpositive T or dt, or a control of the wrong size
    """
    if control.m != mats.m:
        raise ValueError(f"control has {control.m} channels, model expects {mats.m}")
    n = step_count(T, dt)
    h = T / n

    def rhs(t: float, x: np.ndarray) -> np.ndarray:
        s = RigidState.from_vector(x)
        hdot, qdot = kinematics_rhs(s)
        ldot, rdot = potential_rhs(s.l, s.r, control(t), control.derivative(t), mats)
        return np.concatenate([hdot, qdot, ldot, rdot])

    times = h * np.arange(n + 1)
    states = np.empty((n + 1, 12))
    states[0] = state0.as_vector()
    drift = 0.0
    for k in range(n):
        x = rk4_step(rhs, times[k], states[k], h)
        x[3:6], removed = renormalize_quat(x[3:6])
        drift = max(drift, removed)
        check_chart(x[3:6])
        states[k + 1] = x
    traj = PotentialTrajectory(times=times, states=states, controls=control(times).reshape(n + 1, control.m),
                               dt=h, renormalization=drift)
    logger.debug(f"integrated potential model: {n} steps of {h:.3e}, endpoint {states[-1]}")
    return traj


def export_trajectory_csv(traj: PotentialTrajectory, path: str) -> None:
    """Columns t, h(3), q(3), l(3), r(3), w(m) with 17 significant digits."""
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    m = traj.controls.shape[1]
    header = ['t', 'h1', 'h2', 'h3', 'q1', 'q2', 'q3', 'l1', 'l2', 'l3', 'r1', 'r2', 'r3']
    header += [f"w{j + 1}" for j in range(m)]
    body = np.column_stack([traj.times, traj.states, traj.controls])
    np.savetxt(path, body, fmt='%.17g', delimiter=',', header=','.join(header), comments='')


def export_control_csv(control: ControlSignal, path: str, n_samples: int = 101) -> None:
    """Columns t, w(m), w'(m) sampled uniformly on the control horizon."""
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    times = np.linspace(0.0, control.knots[-1], n_samples)
    header = ['t'] + [f"w{j + 1}" for j in range(control.m)] + [f"dw{j + 1}" for j in range(control.m)]
    np.savetxt(path, control.samples(times), fmt='%.17g', delimiter=',', header=','.join(header), comments='')
