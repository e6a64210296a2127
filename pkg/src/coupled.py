"""
Coupled body/vorticity solver.

Generalized fluid loads from the pressure potential mu via Green's identity,
the fixed-point map on (l, r, omega) paths with its Picard iteration, a
sequential RK4 marcher, pressure recovery and the residual verifier.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .core_math import RigidState, check_chart, kinematics_rhs, renormalize_quat
from .errors import ConvergenceError, NonContractionError
from .potential import AddedMassSet, HarmonicPotential, PotentialTables, solve_exterior_neumann
from .rigid_potential import (
    ControlSignal, energy, integrate_potential, potential_loads, quadratic_force, rk4_step, step_count,
)
from .vorticity import (
    FlowField, MarkerSet, blob_potential, blob_potential_gradient, blob_vorticity, check_clearance,
    holder_seminorm, marker_rates, norm_diagnostics, weighted_lp,
)

logger = logging.getLogger(__name__)

LEAKAGE_RTOL = 0.05
NON_CONTRACTION_STREAK = 3


@dataclass
class LoadTerms:
    """Parts of (int grad mu . grad phi_i, int grad mu . grad varphi_i)."""
    boundary: np.ndarray
    volume: np.ndarray
    flux: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.boundary + self.volume + self.flux

    @property
    def leakage(self) -> float:
        """Share of the load carried by vorticity on the body surface."""
        scale = float(np.linalg.norm(self.total))
        return float(np.linalg.norm(self.flux)) / scale if scale > 0 else 0.0


def vortical_source(omega: np.ndarray, curl_omega: np.ndarray, v_rel: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Source of the vortical pressure part: -|omega|^2 + v_rel . curl omega + 2 r . omega."""
    return (-np.einsum('ki,ki->k', omega, omega) + np.einsum('ki,ki->k', v_rel, curl_omega)
            + 2.0 * omega @ np.asarray(r, dtype=float))


def _bernoulli_load(tables: PotentialTables, v_boundary: np.ndarray, l, r, wdot) -> np.ndarray:
    """oint mu_B dphi_i/dn with mu_B = -wdot . psi - |v|^2 / 2 + (l + r x y) . v."""
    mesh = tables.mesh
    carrier = l + np.cross(r, mesh.centroids)
    mu_b = -0.5 * np.einsum('nk,nk->n', v_boundary, v_boundary) + np.einsum('nk,nk->n', carrier, v_boundary)
    if tables.m:
        mu_b = mu_b - np.asarray(wdot, dtype=float) @ tables.boundary_values[6:]
    return tables.data[:6] @ (mesh.areas * mu_b)


def load_terms(flow: FlowField, wdot) -> LoadTerms:
    """
    Green's identity split of the generalized loads.

    The Bernoulli part enters through its boundary values only. The vortical
    remainder contributes a marker-quadrature volume term with the
    compactly supported source and a boundary flux term (v_rel x omega) . n.
    """
    tables = flow.tables
    mesh = tables.mesh
    v_boundary = flow.boundary_velocity()
    boundary = _bernoulli_load(tables, v_boundary, flow.l, flow.r, wdot)
    volume = np.zeros(6)
    flux = np.zeros(6)
    markers = flow.markers
    if markers.n:
        X = markers.X
        v_rel = flow.velocity(X) - flow.l - np.cross(flow.r, X)
        source = vortical_source(markers.vorticity(), markers.vorticity_curl(), v_rel, flow.r)
        volume = tables.values_at(X)[:6] @ (source * markers.vol)
        carrier = flow.l + np.cross(flow.r, mesh.centroids)
        omega_b = flow.vorticity(mesh.centroids)
        density = np.einsum('nk,nk->n', np.cross(v_boundary - carrier, omega_b), mesh.normals)
        flux = tables.boundary_values[:6] @ (mesh.areas * density)
    return LoadTerms(boundary=boundary, volume=volume, flux=flux)


def vortical_correction(flow: FlowField, wdot, leakage_rtol: float = LEAKAGE_RTOL) -> np.ndarray:
    """
    Loads of the full flow minus the loads of its potential part, both by quadrature.

    The quadrature error of the Bernoulli boundary term is common to both and
    cancels in the difference.
    """
    if not flow.markers.n:
        return np.zeros(6)
    terms = load_terms(flow, wdot)
    if terms.leakage > leakage_rtol:
        logger.warning(f"vorticity reaches the body: surface term is {terms.leakage:.1%} of the load")
    potential = _bernoulli_load(flow.tables, flow.tables.boundary_velocity(flow.l, flow.r, flow.w),
                                flow.l, flow.r, wdot)
    return terms.total - potential


def mu_loads(flow: FlowField, wdot, mats: AddedMassSet, leakage_rtol: float = LEAKAGE_RTOL) -> np.ndarray:
    """
    Generalized loads (int grad mu . grad phi_i, int grad mu . grad varphi_i) without solving for mu.

    For the potential part of v, Green's identity reduces the boundary term to
    the added-mass tensors: C w' + F(l, r, w) + gyroscopic terms. The
    vortical remainder is added by marker quadrature.

    Args:
        flow: Velocity field consistent with (l, r, w, markers)
        wdot: Control rate
        mats: Added-mass set of the same tables
        leakage_rtol: Warn when the surface-vorticity share exceeds this

    Returns:
        Array (6,)
    """
    return potential_loads(flow.l, flow.r, flow.w, wdot, mats) + vortical_correction(flow, wdot, leakage_rtol)


def body_rate(l, r, w, wdot, correction: np.ndarray, mats: AddedMassSet) -> np.ndarray:
    """(l', r') = calJ^{-1} (C w' + F(l, r, w) + correction)."""
    return mats.solve(mats.C @ np.asarray(wdot, dtype=float) + quadratic_force(l, r, w, mats) + correction)


@dataclass
class CoupledState:
    t: float
    l: np.ndarray
    r: np.ndarray
    markers: MarkerSet
    w: np.ndarray
    wdot: np.ndarray


@dataclass
class CoupledPath:
    """Time-sampled (l, r, markers) on a uniform grid, the space the fixed-point map acts on."""
    times: np.ndarray
    l: np.ndarray
    r: np.ndarray
    markers: List[MarkerSet]
    rates: Optional[np.ndarray] = None
    loads: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.markers) != len(self.times):
            raise ValueError("path needs one marker snapshot per grid time")
        self._l_spline = CubicSpline(self.times, self.l, axis=0)
        self._r_spline = CubicSpline(self.times, self.r, axis=0)

    def velocity_at(self, t: float):
        return self._l_spline(t), self._r_spline(t)

    def markers_at(self, t: float) -> MarkerSet:
        """Marker positions and Jacobians linear in time between snapshots."""
        k = int(np.clip(np.searchsorted(self.times, t, side='right') - 1, 0, len(self.times) - 2))
        t0, t1 = self.times[k], self.times[k + 1]
        a = (t - t0) / (t1 - t0)
        if a <= 0.0:
            return self.markers[k]
        if a >= 1.0:
            return self.markers[k + 1]
        m0, m1 = self.markers[k], self.markers[k + 1]
        return m0.with_state((1 - a) * m0.X + a * m1.X, (1 - a) * m0.G + a * m1.G)


def path_distance(a: CoupledPath, b: CoupledPath, p: float = 4.0, delta: float = 0.0, alpha: float = 0.2,
                  max_pairs: int = 20_000, seed: int = 0) -> float:
    """
    Discrete triple-norm distance between two paths on the same grid.

    sup |dl| + sup |dr| + sup_t (sup |domega| + Holder + weighted L^p of
    domega) plus max |grad omega| |dX| for the marker displacement.
    """
    dist = float(np.linalg.norm(a.l - b.l, axis=1).max() + np.linalg.norm(a.r - b.r, axis=1).max())
    if not a.markers[0].n:
        return dist
    vort = 0.0
    shift = 0.0
    for ma, mb in zip(a.markers, b.markers):
        d_omega = ma.vorticity() - mb.vorticity()
        term = (float(np.linalg.norm(d_omega, axis=1).max())
                + holder_seminorm(d_omega, ma.X, alpha, max_pairs, seed)
                + weighted_lp(d_omega, ma.X, ma.vol, p, delta + 2.0))
        vort = max(vort, term)
        grad = np.linalg.norm(ma.vorticity_gradient().reshape(ma.n, 9), axis=1)
        shift = max(shift, float(np.max(grad * np.linalg.norm(ma.X - mb.X, axis=1))))
    return dist + vort + shift


def _transport_step(markers: MarkerSet, flows: Sequence[FlowField], h: float) -> MarkerSet:
    """RK4 step of (X, G) in a time-dependent field given at the start, midpoint and end."""
    f0, fm, f1 = flows

    def rates(flow, X, G):
        return marker_rates(X, G, flow.velocity(X), flow.gradient(X), flow.l, flow.r)

    X, G = markers.X, markers.G
    k1 = rates(f0, X, G)
    k2 = rates(fm, X + 0.5 * h * k1[0], G + 0.5 * h * k1[1])
    k3 = rates(fm, X + 0.5 * h * k2[0], G + 0.5 * h * k2[1])
    k4 = rates(f1, X + h * k3[0], G + h * k3[1])
    return markers.with_state(X + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
                              G + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))


def tau_apply(
    path: CoupledPath,
    l0,
    r0,
    seed: MarkerSet,
    control: ControlSignal,
    tables: PotentialTables,
    mats: AddedMassSet
) -> CoupledPath:
    """
    One application of the fixed-point map.

    The velocity is built from the input path; fresh markers are advected
    from t = 0 in that velocity and the vortical loads are evaluated along
    the input path at the grid times and step midpoints. (l, r) are then
    re-integrated from (l0, r0) with the RK4 step of the potential model, so
    a path without vorticity maps onto the potential trajectory.

    Raises:
        CollisionError: If a fresh marker reaches the body
    """
    times = path.times
    n = len(times)
    w = control(times).reshape(n, control.m)
    wdot = control.derivative(times).reshape(n, control.m)

    def flow_at(t: float) -> FlowField:
        l, r = path.velocity_at(t)
        return FlowField(tables, l, r, control(t), path.markers_at(t))

    corrections = np.zeros((n, 6))
    midpoint_corrections = np.zeros((n - 1, 6))
    fresh = [seed.reset()]
    if seed.n:
        flows = [flow_at(t) for t in times]
        for k in range(n):
            corrections[k] = vortical_correction(flows[k], wdot[k])
        for k in range(n - 1):
            h = times[k + 1] - times[k]
            t_mid = times[k] + 0.5 * h
            mid = flow_at(t_mid)
            midpoint_corrections[k] = vortical_correction(mid, control.derivative(t_mid))
            step = _transport_step(fresh[-1], (flows[k], mid, flows[k + 1]), h)
            check_clearance(step, tables.mesh)
            fresh.append(step)
    else:
        fresh = fresh * n

    def rate(t: float, b: np.ndarray, correction: np.ndarray) -> np.ndarray:
        return body_rate(b[:3], b[3:], control(t), control.derivative(t), correction, mats)

    b = np.empty((n, 6))
    b[0] = np.concatenate([l0, r0])
    for k in range(n - 1):
        h = times[k + 1] - times[k]
        t_mid = times[k] + 0.5 * h
        k1 = rate(times[k], b[k], corrections[k])
        k2 = rate(t_mid, b[k] + 0.5 * h * k1, midpoint_corrections[k])
        k3 = rate(t_mid, b[k] + 0.5 * h * k2, midpoint_corrections[k])
        k4 = rate(times[k + 1], b[k] + h * k3, corrections[k + 1])
        b[k + 1] = b[k] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    rates = np.array([body_rate(b[k, :3], b[k, 3:], w[k], wdot[k], corrections[k], mats) for k in range(n)])
    loads = np.array([potential_loads(b[k, :3], b[k, 3:], w[k], wdot[k], mats) for k in range(n)]) + corrections
    return CoupledPath(times=times.copy(), l=b[:, :3], r=b[:, 3:], markers=fresh, rates=rates, loads=loads)


@dataclass
class CoupledSolution:
    """
    Coupled trajectory on a uniform grid.

    states rows are (h, q, l, r); rates rows are (l', r'); loads are the
    generalized fluid loads including the gyroscopic terms.
    """
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    control_rates: np.ndarray
    rates: np.ndarray
    loads: np.ndarray
    markers: List[MarkerSet]
    tables: PotentialTables
    mats: AddedMassSet
    dt: float
    norms: List[Dict[str, float]] = field(default_factory=list)
    picard: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("solution time grid must be strictly increasing")

    @property
    def final(self) -> RigidState:
        return RigidState.from_vector(self.states[-1])

    @property
    def l(self) -> np.ndarray:
        return self.states[:, 6:9]

    @property
    def r(self) -> np.ndarray:
        return self.states[:, 9:12]

    def index(self, t: float) -> int:
        """
        Raises:
            ValueError: If t is not a grid time
        """
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(self.times[-1])):
            raise ValueError(f"t = {t} is not on the solution grid")
        return k

    def state(self, k: int) -> CoupledState:
        return CoupledState(t=float(self.times[k]), l=self.l[k], r=self.r[k], markers=self.markers[k],
                            w=self.controls[k], wdot=self.control_rates[k])

    def flow(self, k: int) -> FlowField:
        return FlowField(self.tables, self.l[k], self.r[k], self.controls[k], self.markers[k])

    def energies(self) -> np.ndarray:
        return np.array([energy(s[6:9], s[9:12], self.mats) for s in self.states])

    def triple_norms(self) -> np.ndarray:
        return np.array([n['triple'] for n in self.norms]) if self.norms else np.zeros(len(self.times))


def _norm_history(markers: List[MarkerSet], l: np.ndarray, r: np.ndarray, norm_cfg: Dict[str, Any]):
    return [norm_diagnostics(m, l[k], r[k], **norm_cfg).to_dict() for k, m in enumerate(markers)]


def _integrate_kinematics(times: np.ndarray, path: CoupledPath, h0, q0) -> np.ndarray:
    """RK4 for (h, q) with (l, r) taken from the path splines."""
    def rhs(t, a):
        l, r = path.velocity_at(t)
        hdot, qdot = kinematics_rhs(RigidState(h=a[:3], q=a[3:], l=l, r=r))
        return np.concatenate([hdot, qdot])

    out = np.empty((len(times), 6))
    out[0] = np.concatenate([h0, q0])
    for k in range(len(times) - 1):
        a = rk4_step(rhs, times[k], out[k], times[k + 1] - times[k])
        a[3:], _ = renormalize_quat(a[3:])
        check_chart(a[3:])
        out[k + 1] = a
    return out


def potential_guess(l0, r0, seed: MarkerSet, control: ControlSignal, horizon: float, dt: float,
                    mats: AddedMassSet, h0=None, q0=None) -> CoupledPath:
    """Potential-flow trajectory with the seed vorticity frozen in place."""
    state0 = RigidState(h=np.zeros(3) if h0 is None else h0, q=np.zeros(3) if q0 is None else q0, l=l0, r=r0)
    traj = integrate_potential(state0, control, horizon, dt, mats)
    return CoupledPath(times=traj.times, l=traj.l.copy(), r=traj.r.copy(), markers=[seed.reset()] * len(traj.times))


def picard_solve(
    l0,
    r0,
    seed: MarkerSet,
    control: ControlSignal,
    horizon: float,
    tables: PotentialTables,
    mats: AddedMassSet,
    dt: float = 1e-2,
    tol: float = 1e-6,
    max_iter: int = 30,
    h0=None,
    q0=None,
    norm_cfg: Optional[Dict[str, Any]] = None
) -> CoupledSolution:
    """
    Fixed point of the coupled map on [0, horizon] by Picard iteration.

    Args:
        l0, r0: Initial body velocities
        seed: Initial markers
        control: Control signal (w(0) = 0)
        horizon: Length of the time window
        tables: Kirchhoff potentials
        mats: Added-mass set
        dt: Target grid step
        tol: Stop when the path update falls below this in the triple norm
        max_iter: Iteration cap
        h0, q0: Initial position and attitude (default zero)
        norm_cfg: p, delta, alpha, max_pairs for the norm estimators

    Raises:
        NonContractionError: If the update grows for 3 consecutive iterations
        ConvergenceError: If max_iter is reached
    """
    norm_cfg = dict(norm_cfg or {})
    l0 = np.asarray(l0, dtype=float)
    r0 = np.asarray(r0, dtype=float)
    step_count(horizon, dt)
    path = potential_guess(l0, r0, seed, control, horizon, dt, mats, h0, q0)
    deltas: List[float] = []
    ratios: List[float] = []
    streak = 0
    for it in range(1, max_iter + 1):
        new = tau_apply(path, l0, r0, seed, control, tables, mats)
        delta = path_distance(new, path, **norm_cfg)
        if deltas:
            ratios.append(delta / deltas[-1] if deltas[-1] > 0 else 0.0)
            streak = streak + 1 if ratios[-1] > 1.0 else 0
        deltas.append(delta)
        logger.info(f"picard iteration {it}: update {delta:.3e}" + (f", ratio {ratios[-1]:.3f}" if ratios else ""))
        path = new
        if delta < tol:
            break
        if streak >= NON_CONTRACTION_STREAK:
            raise NonContractionError(f"picard update grew for {streak} iterations; shorten the horizon", ratios)
    else:
        raise ConvergenceError(f"picard iteration did not reach {tol:.1e} in {max_iter} iterations",
                               best_residual=min(deltas), iterations=max_iter)

    times = path.times
    kin = _integrate_kinematics(times, path, np.zeros(3) if h0 is None else h0, np.zeros(3) if q0 is None else q0)
    n = len(times)
    states = np.column_stack([kin, path.l, path.r])
    solution = CoupledSolution(
        times=times, states=states, controls=control(times).reshape(n, control.m),
        control_rates=control.derivative(times).reshape(n, control.m), rates=path.rates, loads=path.loads,
        markers=path.markers, tables=tables, mats=mats, dt=float(times[1] - times[0]),
        norms=_norm_history(path.markers, path.l, path.r, norm_cfg),
        picard={'iterations': len(deltas), 'deltas': deltas, 'ratios': ratios, 'tol': tol},
    )
    return solution


def timestep_solve(
    state0: RigidState,
    seed: MarkerSet,
    control: ControlSignal,
    horizon: float,
    dt: float,
    tables: PotentialTables,
    mats: AddedMassSet,
    norm_cfg: Optional[Dict[str, Any]] = None
) -> CoupledSolution:
    """
    Sequential RK4 on (h, q, l, r, X, G) with loads evaluated at every stage.

    Without markers each step is the potential-flow step of
    integrate_potential.

    Raises:
        CollisionError: If a marker reaches the body
        ChartExitError: If |q| reaches 1
    """
    if control.m != mats.m:
        raise ValueError(f"control has {control.m} channels, model expects {mats.m}")
    norm_cfg = dict(norm_cfg or {})
    n_steps = step_count(horizon, dt)
    h = horizon / n_steps
    nm = seed.n
    base = seed.reset() if nm else seed

    def unpack(x):
        return x[:12], x[12:12 + 3 * nm].reshape(nm, 3), x[12 + 3 * nm:].reshape(nm, 3, 3)

    def rates(t: float, x: np.ndarray):
        rigid, X, G = unpack(x)
        s = RigidState.from_vector(rigid)
        w, wdot = control(t), control.derivative(t)
        hdot, qdot = kinematics_rhs(s)
        correction = np.zeros(6)
        marker_part = np.zeros(0)
        if nm:
            flow = FlowField(tables, s.l, s.r, w, base.with_state(X, G))
            correction = vortical_correction(flow, wdot)
            Xd, Gd = marker_rates(X, G, flow.velocity(X), flow.gradient(X), s.l, s.r)
            marker_part = np.concatenate([Xd.reshape(-1), Gd.reshape(-1)])
        b = body_rate(s.l, s.r, w, wdot, correction, mats)
        return np.concatenate([hdot, qdot, b, marker_part]), correction

    times = h * np.arange(n_steps + 1)
    x = np.concatenate([state0.as_vector(), base.X.reshape(-1), base.G.reshape(-1)])
    states = np.empty((n_steps + 1, 12))
    body_rates = np.empty((n_steps + 1, 6))
    corrections = np.empty((n_steps + 1, 6))
    snapshots = [base]
    states[0] = x[:12]
    drift = 0.0
    for k in range(n_steps):
        t = times[k]
        k1, corrections[k] = rates(t, x)
        body_rates[k] = k1[6:12]
        k2, _ = rates(t + 0.5 * h, x + 0.5 * h * k1)
        k3, _ = rates(t + 0.5 * h, x + 0.5 * h * k2)
        k4, _ = rates(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        x[3:6], removed = renormalize_quat(x[3:6])
        drift = max(drift, removed)
        check_chart(x[3:6])
        states[k + 1] = x[:12]
        if nm:
            _, X, G = unpack(x)
            snap = base.with_state(X.copy(), G.copy())
            check_clearance(snap, tables.mesh)
            snapshots.append(snap)
        else:
            snapshots.append(base)
    last, corrections[-1] = rates(times[-1], x)
    body_rates[-1] = last[6:12]

    controls = control(times).reshape(n_steps + 1, control.m)
    control_rates = control.derivative(times).reshape(n_steps + 1, control.m)
    loads = np.array([potential_loads(states[k, 6:9], states[k, 9:12], controls[k], control_rates[k], mats)
                      for k in range(n_steps + 1)]) + corrections
    det_dev = max((float(np.abs(m.det_G() - 1.0).max()) for m in snapshots if m.n), default=0.0)
    if det_dev > 1e-6:
        logger.warning(f"flow-map Jacobian determinant drifted by {det_dev:.3e}")
    logger.info(f"coupled march: {n_steps} steps of {h:.3e}, {nm} markers, det G drift {det_dev:.2e}")
    return CoupledSolution(
        times=times, states=states, controls=controls, control_rates=control_rates, rates=body_rates,
        loads=loads, markers=snapshots, tables=tables, mats=mats, dt=h,
        norms=_norm_history(snapshots, states[:, 6:9], states[:, 9:12], norm_cfg),
        meta={'renormalization': drift, 'det_G_drift': det_dev},
    )


class PressureField:
    """
    Pressure q = mu_B + mu_R - l' . phi - r' . varphi at one grid time, with q -> 0 at infinity.

    mu_R is a regularized Newtonian potential of the vortical source plus a
    harmonic correction matching its Neumann data on the body.
    """

    def __init__(self, flow: FlowField, wdot, rates: np.ndarray):
        self.flow = flow
        self.wdot = np.asarray(wdot, dtype=float)
        self.rates = np.asarray(rates, dtype=float)
        self.weights = np.zeros(0)
        self.correction: Optional[HarmonicPotential] = None
        markers = flow.markers
        if markers.n:
            tables = flow.tables
            mesh = tables.mesh
            X = markers.X
            v_rel = flow.velocity(X) - flow.l - np.cross(flow.r, X)
            self.weights = vortical_source(markers.vorticity(), markers.vorticity_curl(), v_rel, flow.r) * markers.vol
            carrier = flow.l + np.cross(flow.r, mesh.centroids)
            omega_b = flow.vorticity(mesh.centroids)
            target = np.einsum('nk,nk->n', np.cross(flow.boundary_velocity() - carrier, omega_b), mesh.normals)
            newton = blob_potential_gradient(mesh.centroids, X, self.weights, markers.eps)
            data = target - np.einsum('nk,nk->n', newton, mesh.normals)
            self.correction = solve_exterior_neumann(mesh, data, solver=tables.solver, require_zero_flux=False)

    def value(self, points: np.ndarray) -> np.ndarray:
        flow = self.flow
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        v = flow.velocity(pts)
        carrier = flow.l + np.cross(flow.r, pts)
        values = flow.tables.values_at(pts)
        q = -0.5 * np.einsum('pk,pk->p', v, v) + np.einsum('pk,pk->p', carrier, v) - self.rates @ values[:6]
        if flow.tables.m:
            q -= self.wdot @ values[6:]
        if self.correction is not None:
            m = flow.markers
            q += blob_potential(pts, m.X, self.weights, m.eps) + self.correction.value(pts)
        return q

    def gradient(self, points: np.ndarray, step: float = 1e-4) -> np.ndarray:
        """Central differences of value."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((len(pts), 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            out[:, j] = (self.value(pts + e) - self.value(pts - e)) / (2.0 * step)
        return out


def pressure_field(solution: CoupledSolution, k: int) -> PressureField:
    return PressureField(solution.flow(k), solution.control_rates[k], solution.rates[k])


def pressure_eval(solution: CoupledSolution, t: float, y: np.ndarray):
    """
    Pressure at exterior points at grid time t.

    Raises:
        ValueError: If t is off the grid or a point is inside the body
    """
    pts = np.atleast_2d(np.asarray(y, dtype=float))
    if np.any(solution.tables.mesh.contains(pts)):
        raise ValueError("pressure requested inside the body")
    q = pressure_field(solution, solution.index(t)).value(pts)
    return float(q[0]) if np.ndim(y) == 1 else q


@dataclass
class ResidualStats:
    rms: float
    max: float
    scale: float

    @property
    def relative(self) -> float:
        return self.rms / self.scale if self.scale > 0 else self.rms

    def to_dict(self) -> Dict[str, float]:
        return {'rms': self.rms, 'max': self.max, 'scale': self.scale, 'relative': self.relative}


def _stats(values: np.ndarray, scale: float) -> ResidualStats:
    mag = np.linalg.norm(np.atleast_2d(values).reshape(len(values), -1), axis=1) if np.ndim(values) > 1 \
        else np.abs(values)
    if not len(mag):
        return ResidualStats(0.0, 0.0, scale)
    return ResidualStats(float(np.sqrt(np.mean(mag ** 2))), float(mag.max()), float(scale))


@dataclass
class ResidualReport:
    """Momentum, divergence, slip and vorticity-transport residuals."""
    momentum: ResidualStats
    divergence: ResidualStats
    slip: ResidualStats
    transport: ResidualStats
    times: List[float] = field(default_factory=list)
    n_points: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {'momentum': self.momentum.to_dict(), 'divergence': self.divergence.to_dict(),
                'slip': self.slip.to_dict(), 'transport': self.transport.to_dict(),
                'times': list(self.times), 'n_points': self.n_points}

    def failures(self, thresholds: Dict[str, float]) -> List[str]:
        """Residual names whose relative RMS exceeds the given threshold."""
        out = []
        for name, limit in thresholds.items():
            stats = getattr(self, name)
            if stats.relative > limit:
                out.append(f"{name}: relative RMS {stats.relative:.3e} > {limit:.3e}")
        return out


def _vorticity_gradient_fd(markers: MarkerSet, pts: np.ndarray, step: float) -> np.ndarray:
    out = np.empty((len(pts), 3, 3))
    alpha = markers.alpha
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        out[:, :, j] = (blob_vorticity(pts + e, markers.X, alpha, markers.eps)
                        - blob_vorticity(pts - e, markers.X, alpha, markers.eps)) / (2.0 * step)
    return out


def residual_check(solution: CoupledSolution, sample_points: np.ndarray, times: Sequence[float],
                   fd_step: float = 1e-4) -> ResidualReport:
    """
    Finite-difference residuals of the body-frame Euler system.

    Time derivatives are central differences across neighbouring grid
    samples, so each requested time must be an interior grid time.

    Raises:
        ValueError: If a time is not an interior grid time or a point is inside the body
    """
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    mesh = solution.tables.mesh
    if np.any(mesh.contains(pts)):
        raise ValueError("residual sample point inside the body")
    momentum, divergence, slip, transport = [], [], [], []
    scales = {'momentum': 0.0, 'divergence': 0.0, 'slip': 0.0, 'transport': 0.0}
    for t in times:
        k = solution.index(t)
        if k == 0 or k == len(solution.times) - 1:
            raise ValueError(f"residual time {t} needs neighbours on both sides")
        dt2 = solution.times[k + 1] - solution.times[k - 1]
        before, flow, after = solution.flow(k - 1), solution.flow(k), solution.flow(k + 1)
        l, r = flow.l, flow.r
        v = flow.velocity(pts)
        grad_v = flow.gradient(pts)
        v_rel = v - l - np.cross(r, pts)
        dv_dt = (after.velocity(pts) - before.velocity(pts)) / dt2
        convect = np.einsum('pij,pj->pi', grad_v, v_rel)
        grad_q = pressure_field(solution, k).gradient(pts, fd_step)
        terms = [dv_dt, convect, np.cross(r, v), grad_q]
        momentum.append(sum(terms))
        scales['momentum'] = max(scales['momentum'], *(float(np.linalg.norm(a, axis=1).max()) for a in terms))

        divergence.append(np.trace(grad_v, axis1=1, axis2=2))
        scales['divergence'] = max(scales['divergence'], float(np.linalg.norm(grad_v.reshape(-1, 9), axis=1).max()))

        expected = np.einsum('nk,nk->n', l + np.cross(r, mesh.centroids), mesh.normals)
        if solution.tables.m:
            expected = expected + solution.controls[k] @ solution.tables.data[6:]
        slip.append(np.einsum('nk,nk->n', flow.boundary_velocity(), mesh.normals) - expected)
        scales['slip'] = max(scales['slip'], float(np.abs(expected).max()), float(np.abs(slip[-1]).max()))

        markers = flow.markers
        if markers.n:
            omega = flow.vorticity(pts)
            d_omega = (after.vorticity(pts) - before.vorticity(pts)) / dt2
            grad_omega = _vorticity_gradient_fd(markers, pts, fd_step)
            stretch = np.einsum('pij,pj->pi', grad_v, omega) - np.cross(r, omega)
            adv = np.einsum('pij,pj->pi', grad_omega, v_rel)
            transport.append(d_omega + adv - stretch)
            scales['transport'] = max(scales['transport'], *(float(np.linalg.norm(a, axis=1).max())
                                                              for a in (d_omega, adv, stretch)))
        else:
            transport.append(np.zeros((len(pts), 3)))

    report = ResidualReport(
        momentum=_stats(np.concatenate(momentum), scales['momentum']),
        divergence=_stats(np.concatenate(divergence), scales['divergence']),
        slip=_stats(np.concatenate(slip), scales['slip']),
        transport=_stats(np.concatenate(transport), scales['transport']),
        times=[float(t) for t in times], n_points=len(pts),
    )
    logger.info(f"residuals: momentum {report.momentum.relative:.2e}, divergence {report.divergence.relative:.2e}, "
                f"slip {report.slip.relative:.2e}, transport {report.transport.relative:.2e}")
    return report


def export_solution(solution: CoupledSolution, out_dir: str, header: Optional[Dict[str, Any]] = None,
                    stem: str = 'coupled') -> Dict[str, str]:
    """
    Write <stem>.json (header and diagnostics) and <stem>.csv.

    CSV columns: t, h(3), q(3), l(3), r(3), w(m), loads(6), energy, triple norm.
    """
    os.makedirs(out_dir, exist_ok=True)
    m = solution.controls.shape[1]
    cols = (['t', 'h1', 'h2', 'h3', 'q1', 'q2', 'q3', 'l1', 'l2', 'l3', 'r1', 'r2', 'r3']
            + [f"w{j + 1}" for j in range(m)] + [f"load{i + 1}" for i in range(6)] + ['energy', 'triple_norm'])
    body = np.column_stack([solution.times, solution.states, solution.controls, solution.loads,
                            solution.energies(), solution.triple_norms()])
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    np.savetxt(csv_path, body, fmt='%.17g', delimiter=',', header=','.join(cols), comments='')
    document = dict(header or {})
    document.update(
        n_steps=len(solution.times) - 1, dt=solution.dt, n_markers=solution.markers[0].n,
        picard=solution.picard, meta=solution.meta,
        final_norms=solution.norms[-1] if solution.norms else {},
    )
    json_path = os.path.join(out_dir, f"{stem}.json")
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=True, default=float)
    return {'csv': csv_path, 'json': json_path}
