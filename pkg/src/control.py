"""
Steering the body to a target state.

Shooting on the potential model with a damped least-squares solver, the
retargeting loop that absorbs the vorticity perturbation, and the time
scaling that brings large data back into the small-data regime.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .core_math import RigidState
from .coupled import CoupledSolution, timestep_solve
from .errors import ControllabilityError, ConvergenceError, SolverError, VorticityTooLargeError
from .potential import AddedMassSet, PotentialTables
from .rigid_potential import ControlSignal, PotentialTrajectory, export_control_csv, integrate_potential
from .vorticity import MarkerSet

logger = logging.getLogger(__name__)

RANK_RTOL = 1e-8
RANGE_RTOL = 1e-3
DIVERGENCE_STREAK = 2


@dataclass(eq=False)
class SteeringProblem:
    """Drive `initial` to `target` in time `horizon` with n_knots spline intervals per channel."""
    initial: RigidState
    target: RigidState
    horizon: float
    n_knots: int = 4

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError(f"steering horizon must be positive, got {self.horizon}")
        if self.n_knots < 1:
            raise ValueError(f"need at least one knot interval, got {self.n_knots}")
        for name in ('initial', 'target'):
            if np.linalg.norm(getattr(self, name).q) >= 1.0:
                raise ValueError(f"{name} attitude is on the chart boundary")

    def retargeted(self, endpoint: np.ndarray) -> 'SteeringProblem':
        return replace(self, target=RigidState.from_vector(endpoint))

    def reversed(self) -> 'SteeringProblem':
        """Swap the endpoints."""
        return replace(self, initial=self.target, target=self.initial)


@dataclass
class SteeringResult:
    control: ControlSignal
    endpoint: np.ndarray
    residual: float
    iterations: int
    success: bool
    history: List[float] = field(default_factory=list)
    lam: float = 1.0
    epsilon: Optional[float] = None
    trajectory: Any = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'coefficients': self.control.coefficients.tolist(),
            'control': self.control.to_dict(),
            'endpoint': self.endpoint.tolist(),
            'residual': self.residual,
            'iterations': self.iterations,
            'success': self.success,
            'history': list(self.history),
            'lambda': self.lam,
            'epsilon': self.epsilon,
            'meta': self.meta,
        }


def _endpoint(problem: SteeringProblem, control: ControlSignal, mats: AddedMassSet, dt: float) -> np.ndarray:
    return integrate_potential(problem.initial, control, problem.horizon, dt, mats).final.as_vector()


def _jacobian(fun, c: np.ndarray, max_workers: int) -> np.ndarray:
    """Central differences with step 1e-6 (1 + |c_j|), columns in parallel."""
    steps = 1e-6 * (1.0 + np.abs(c))

    def column(j: int) -> np.ndarray:
        e = np.zeros_like(c)
        e[j] = steps[j]
        return (fun(c + e) - fun(c - e)) / (2.0 * steps[j])

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        cols = list(pool.map(column, range(len(c))))
    return np.column_stack(cols)


def _check_range(J: np.ndarray, res: np.ndarray) -> int:
    """
    Raises:
        ControllabilityError: If the residual has a component outside the range of J
    """
    U, s, _ = np.linalg.svd(J, full_matrices=True)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if len(s) and s[0] > 0 else 0
    outside = res - U[:, :rank] @ (U[:, :rank].T @ res)
    if np.linalg.norm(outside) > RANGE_RTOL * np.linalg.norm(res):
        raise ControllabilityError(
            f"endpoint map has rank {rank} < 12 and the target leaves its range "
            f"(unreachable share {np.linalg.norm(outside) / np.linalg.norm(res):.2e})", rank)
    if rank < 12:
        logger.warning(f"endpoint map has rank {rank} at the initial guess; target lies in its range")
    return rank


def potential_steering(
    problem: SteeringProblem,
    mats: AddedMassSet,
    tol: float = 1e-8,
    dt: float = 1e-2,
    max_iter: int = 50,
    max_workers: int = 1,
    initial: Optional[np.ndarray] = None
) -> SteeringResult:
    """
    Levenberg-Marquardt shooting on the 12-dim endpoint residual of the potential model.

    The unknowns are the spline coefficients of a control with w(0) = 0;
    the step is J^T (J J^T + lam Id)^{-1} (-res).

    Args:
        problem: Endpoints, horizon and knot count
        mats: Added-mass set
        tol: Required endpoint residual (Euclidean norm)
        dt: Integrator step
        max_iter: LM iteration cap
        max_workers: Threads for the Jacobian columns
        initial: Starting coefficients (default zero)

    Raises:
        ValueError: If the control has fewer than 12 coefficients
        ControllabilityError: If the target leaves the range of the Jacobian at the start
        ConvergenceError: If max_iter is reached
    """
    control = ControlSignal(mats.m, problem.horizon, problem.n_knots)
    if control.n_coefficients < 12:
        raise ValueError(f"{control.n_coefficients} control coefficients cannot steer a 12-dim state")
    target = problem.target.as_vector()

    def residual(c: np.ndarray) -> np.ndarray:
        return _endpoint(problem, ControlSignal(mats.m, problem.horizon, problem.n_knots, c), mats, dt) - target

    c = np.zeros(control.n_coefficients) if initial is None else np.asarray(initial, dtype=float).copy()
    res = residual(c)
    norm = float(np.linalg.norm(res))
    history = [norm]
    if norm < tol:
        control.set_coefficients(c)
        return SteeringResult(control=control, endpoint=res + target, residual=norm, iterations=0, success=True,
                              history=history)

    damping = 1e-3
    J = _jacobian(residual, c, max_workers)
    _check_range(J, res)
    for it in range(1, max_iter + 1):
        JJt = J @ J.T
        scale = float(np.trace(JJt)) / 12.0 or 1.0
        accepted = False
        while damping < 1e12:
            step = J.T @ np.linalg.solve(JJt + damping * scale * np.eye(12), -res)
            trial = residual(c + step)
            trial_norm = float(np.linalg.norm(trial))
            if trial_norm < norm:
                c, res, norm = c + step, trial, trial_norm
                damping = max(damping / 3.0, 1e-12)
                accepted = True
                break
            damping *= 4.0
        history.append(norm)
        logger.info(f"steering iteration {it}: residual {norm:.3e}, damping {damping:.1e}")
        if norm < tol:
            control.set_coefficients(c)
            return SteeringResult(control=control, endpoint=res + target, residual=norm, iterations=it,
                                  success=True, history=history)
        if not accepted:
            break
        J = _jacobian(residual, c, max_workers)
    raise ConvergenceError(f"steering stalled at residual {norm:.3e} (target {tol:.1e})",
                           best_residual=norm, iterations=len(history) - 1)


def check_trust_region(problem: SteeringProblem, eta1: float) -> None:
    """
    Raises:
        ValueError: If an initial or target (h, q) lies outside the ball of radius eta1
    """
    for name in ('initial', 'target'):
        s = getattr(problem, name)
        size = float(np.linalg.norm(np.concatenate([s.h, s.q])))
        if size > eta1:
            raise ValueError(f"{name} position/attitude {size:.3g} lies outside the trust region {eta1}")


def _coupled_endpoint(problem: SteeringProblem, target: np.ndarray, seed: MarkerSet, tables: PotentialTables,
                      mats: AddedMassSet, dt: float, tol: float) -> Tuple[np.ndarray, SteeringResult, CoupledSolution]:
    """Design on the potential model for `target`, then run the coupled system under that control."""
    design = potential_steering(problem.retargeted(target), mats, tol=tol, dt=dt)
    solution = timestep_solve(problem.initial, seed, design.control, problem.horizon, dt, tables, mats)
    return solution.states[-1], design, solution


def deviation_epsilon(problem: SteeringProblem, seed: MarkerSet, tables: PotentialTables, mats: AddedMassSet,
                      eta1: float, dt: float, tol: float, max_workers: int = 1) -> float:
    """
    Largest |f(x) - x| / eta1 over six targets target +- eta1/2 e_i on the position components.

    f(x) is the coupled endpoint reached with the potential control designed for x.
    """
    if not seed.n:
        return 0.0
    base = problem.target.as_vector()
    samples = []
    for i in range(3):
        for sign in (1.0, -1.0):
            x = base.copy()
            x[i] += sign * 0.5 * eta1
            samples.append(x)

    def gap(x: np.ndarray) -> float:
        f, _, _ = _coupled_endpoint(problem, x, seed, tables, mats, dt, tol)
        return float(np.linalg.norm(f - x))

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        gaps = list(pool.map(gap, samples))
    eps = max(gaps) / eta1
    logger.info(f"sampled retargeting deviation epsilon = {eps:.3e}")
    return eps


def retarget_with_vorticity(
    problem: SteeringProblem,
    seed: MarkerSet,
    tables: PotentialTables,
    mats: AddedMassSet,
    eps_max: float = 0.5,
    max_outer: int = 20,
    eta1: float = 0.1,
    tol: float = 1e-6,
    dt: float = 1e-2,
    max_workers: int = 1
) -> SteeringResult:
    """
    Absorb the vorticity perturbation by iterating x <- x + (x* - f(x)).

    Raises:
        ValueError: If the endpoints leave the trust region
        VorticityTooLargeError: If the sampled deviation is at least eps_max
        ConvergenceError: If the outer iteration does not reach tol in max_outer steps, or its
            error grows on DIVERGENCE_STREAK consecutive steps
    """
    check_trust_region(problem, eta1)
    x_star = problem.target.as_vector()
    steer_tol = 0.1 * tol
    eps = deviation_epsilon(problem, seed, tables, mats, eta1, dt, steer_tol, max_workers)
    if eps >= eps_max:
        raise VorticityTooLargeError(f"vorticity deviation {eps:.3f} exceeds {eps_max}", eps)

    x = x_star.copy()
    history: List[float] = []
    streak = 0
    for outer in range(1, max_outer + 1):
        f, design, solution = _coupled_endpoint(problem, x, seed, tables, mats, dt, steer_tol)
        err = float(np.linalg.norm(f - x_star))
        if history and err > history[-1]:
            streak += 1
            logger.warning(f"retargeting error grew from {history[-1]:.3e} to {err:.3e}")
        else:
            streak = 0
        history.append(err)
        if streak >= DIVERGENCE_STREAK:
            raise ConvergenceError(f"retargeting diverges: endpoint error grew for {streak} steps to {err:.3e}",
                                   best_residual=min(history), iterations=outer)
        logger.info(f"retargeting step {outer}: endpoint error {err:.3e}")
        if err < tol:
            return SteeringResult(control=design.control, endpoint=f, residual=err, iterations=outer, success=True,
                                  history=history, epsilon=eps, trajectory=solution)
        x = x + (x_star - f)
    raise ConvergenceError(f"retargeting stalled at endpoint error {history[-1]:.3e}",
                           best_residual=min(history), iterations=max_outer)


def time_scale(state0: RigidState, seed: MarkerSet, control: ControlSignal,
               lam: float) -> Tuple[RigidState, MarkerSet, ControlSignal]:
    """
    Data of the time-scaled problem: (h0, q0, lam l0, lam r0), lam omega0, s -> lam w(lam s).

    Raises:
        ValueError: If lam is not in (0, 1]
    """
    _check_lambda(lam)
    if lam == 1.0:
        return state0, seed, control
    return scale_state(state0, lam), seed.scaled(lam), control.time_scaled(lam)


def scale_state(state: RigidState, lam: float) -> RigidState:
    """Velocities times lam, position and attitude unchanged."""
    return RigidState(h=state.h, q=state.q, l=lam * state.l, r=lam * state.r)


def _check_lambda(lam: float) -> None:
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"time-scaling factor must lie in (0, 1], got {lam}")


def unscale_control(control: ControlSignal, lam: float) -> ControlSignal:
    """Physical control t -> w_lam(t / lam) / lam on [0, lam T]."""
    _check_lambda(lam)
    return control if lam == 1.0 else control.time_scaled(1.0 / lam)


def unscale_trajectory(traj, lam: float):
    """
    Map a trajectory of the scaled problem back to physical time t = lam s.

    Velocities, controls, rates and loads are divided by lam, lam, lam^2
    and lam^2 respectively; positions and attitudes are unchanged.
    """
    _check_lambda(lam)
    if not isinstance(traj, (PotentialTrajectory, CoupledSolution)):
        raise TypeError(f"cannot unscale {type(traj).__name__}")
    states = traj.states.copy()
    states[:, 6:] /= lam
    if isinstance(traj, PotentialTrajectory):
        return replace(traj, times=lam * traj.times, states=states, controls=traj.controls / lam, dt=lam * traj.dt)
    markers = [m.scaled(1.0 / lam) for m in traj.markers]
    return replace(traj, times=lam * traj.times, states=states, controls=traj.controls / lam,
                   control_rates=traj.control_rates / lam ** 2, rates=traj.rates / lam ** 2,
                   loads=traj.loads / lam ** 2, markers=markers, dt=lam * traj.dt, norms=[])


def steer_full(
    problem: SteeringProblem,
    seed: MarkerSet,
    T0: float,
    tables: PotentialTables,
    mats: AddedMassSet,
    eta1: float = 0.1,
    eps_max: float = 0.5,
    tol: float = 1e-6,
    lambda_min: float = 1.0 / 64.0,
    max_outer: int = 20,
    dt: float = 1e-2,
    max_workers: int = 1
) -> SteeringResult:
    """
    Steer with vorticity, halving the time-scaling factor until the scaled data are small enough.

    The scaled problem is solved on problem.horizon; the physical control
    acts on [0, lam * horizon] with lam * horizon <= T0.

    Raises:
        ValueError: If T0 <= 0 or the endpoints leave the trust region
        VorticityTooLargeError: If lam falls below lambda_min
        ConvergenceError: If the physical endpoint misses the target
    """
    if T0 <= 0:
        raise ValueError(f"time budget must be positive, got {T0}")
    check_trust_region(problem, eta1)
    lam = min(1.0, T0 / problem.horizon)
    last_error: Optional[SolverError] = None
    while lam >= lambda_min:
        scaled = replace(problem, initial=scale_state(problem.initial, lam), target=scale_state(problem.target, lam))
        try:
            result = retarget_with_vorticity(scaled, seed.scaled(lam), tables, mats, eps_max=eps_max,
                                             max_outer=max_outer, eta1=eta1, tol=tol, dt=dt, max_workers=max_workers)
            break
        except (VorticityTooLargeError, ConvergenceError) as e:
            logger.info(f"time scale {lam:.4g} rejected: {e}")
            last_error = e
            lam *= 0.5
    else:
        raise VorticityTooLargeError(f"no time scale above {lambda_min} brings the data into range",
                                     getattr(last_error, 'epsilon', float('nan')))

    physical = unscale_control(result.control, lam)
    solution = timestep_solve(problem.initial, seed, physical, lam * problem.horizon, lam * dt, tables, mats)
    endpoint = solution.states[-1]
    err = float(np.linalg.norm(endpoint - problem.target.as_vector()))
    attitude_err = float(np.linalg.norm(endpoint[3:6] - problem.target.q))
    logger.info(f"steered with time scale {lam:.4g} over {lam * problem.horizon:.4g}: endpoint error {err:.3e}")
    if err >= 10.0 * tol / lam:
        raise ConvergenceError(f"physical endpoint misses the target by {err:.3e}", best_residual=err,
                               iterations=result.iterations)
    return SteeringResult(control=physical, endpoint=endpoint, residual=err, iterations=result.iterations,
                          success=True, history=result.history, lam=lam, epsilon=result.epsilon,
                          trajectory=solution, meta={'attitude_error': attitude_err,
                                                     'physical_horizon': lam * problem.horizon})


def export_steering(result: SteeringResult, out_dir: str, header: Optional[Dict[str, Any]] = None,
                    stem: str = 'steering') -> Dict[str, str]:
    """Write <stem>.json (coefficients, residual, iterations) and <stem>_control.csv."""
    os.makedirs(out_dir, exist_ok=True)
    document = dict(header or {})
    document.update(result.to_dict())
    json_path = os.path.join(out_dir, f"{stem}.json")
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=True, default=float)
    csv_path = os.path.join(out_dir, f"{stem}_control.csv")
    export_control_csv(result.control, csv_path)
    return {'json': json_path, 'csv': csv_path}
