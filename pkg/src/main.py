"""
Experiment driver for the immersed-body solver.

Parses one experiment config, builds (or loads from cache) the potential
solve, runs the requested stage and writes CSV/JSON/OFF artifacts plus a
run journal into the output directory.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from . import db
from .config import ExperimentConfig, config_hash, format_config_for_display, load_config
from .control import SteeringProblem, export_steering, scale_state, steer_full, unscale_trajectory
from .core_math import RigidState, body_world_transform
from .coupled import CoupledSolution, export_solution, picard_solve, residual_check, timestep_solve
from .errors import SolverError, VerificationError
from .geometry import (
    ControlBasis, axis_control_regions, body_inertia, build_mesh, check_neutral_buoyancy, make_control_basis,
    write_off,
)
from .logging_utils import (
    JOURNAL_NAME, filter_jsonl_by_kind, get_latest_jsonl_entry, journal_event, validate_jsonl_format,
)
from .potential import (
    AddedMassSet, ExteriorNeumannSolver, PotentialTables, assemble_matrices, export_added_mass, kirchhoff_tables,
)
from .rigid_potential import ControlSignal, integrate_potential
from .vorticity import MarkerSet, export_markers_csv, seed_markers

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERIFICATION = 4


def setup_logging(level: str = 'INFO'):
    """Configure logging for the driver."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def build_controls(config: ExperimentConfig, mesh) -> Optional[ControlBasis]:
    ctl = config.controls
    if ctl.layout == 'none':
        return None
    if ctl.layout == 'custom':
        regions = ctl.regions
    else:
        regions = axis_control_regions(ctl.half_angle, diagonals=ctl.layout == 'axis_diagonal')
    return make_control_basis(mesh, regions)


def build_model(config: ExperimentConfig, threads: int = 1,
                cache_dir: Optional[str] = None) -> Tuple[PotentialTables, AddedMassSet]:
    """
    Mesh, control basis, inertia, Kirchhoff potentials and added mass.

    Raises:
        ValueError: If the body is not neutrally buoyant and the config requires it
    """
    mesh = build_mesh(config.geometry.as_spec())
    controls = build_controls(config, mesh)
    inertia = body_inertia(mesh, config.inertia.density)
    mismatch = check_neutral_buoyancy(inertia, mesh) / mesh.volume
    if mismatch > config.inertia.buoyancy_rtol:
        message = f"body is not neutrally buoyant: relative mass mismatch {mismatch:.3e}"
        if config.inertia.require_neutral_buoyancy:
            raise ValueError(message)
        logger.warning(message)

    solver = ExteriorNeumannSolver(mesh, near_factor=config.geometry.near_factor, max_workers=threads)
    db_path = key = None
    if cache_dir:
        db_path = db.init_database(cache_dir)
        key = db.cache_key(mesh, controls, inertia, config.geometry.near_factor)
        cached = db.get_cached_tables(db_path, key, solver)
        if cached is not None:
            return cached
    tables = kirchhoff_tables(mesh, controls, solver=solver)
    mats = assemble_matrices(tables, controls, inertia)
    if db_path:
        db.put_cached_tables(db_path, key, tables, mats)
    return tables, mats


def initial_state(config: ExperimentConfig) -> RigidState:
    s = config.solver
    return RigidState(h=s.h0, q=s.q0, l=s.l0, r=s.r0)


def build_control(config: ExperimentConfig, m: int) -> ControlSignal:
    ctl = config.controls
    control = ControlSignal(m, config.solver.horizon, ctl.n_knots)
    if ctl.coefficients is not None:
        if len(ctl.coefficients) != control.n_coefficients:
            raise ValueError(f"controls.coefficients needs {control.n_coefficients} entries, "
                             f"got {len(ctl.coefficients)}")
        control.set_coefficients(np.asarray(ctl.coefficients, dtype=float))
    return control


def build_seed(config: ExperimentConfig, tables: PotentialTables) -> MarkerSet:
    v = config.vorticity
    return seed_markers(v.seed, v.spacing, tables.mesh, d_min=v.d_min, eps=v.eps_blob)


def simulate(config: ExperimentConfig, tables: PotentialTables, mats: AddedMassSet,
             seed: Optional[MarkerSet] = None, control: Optional[ControlSignal] = None) -> CoupledSolution:
    sol = config.solver
    seed = build_seed(config, tables) if seed is None else seed
    control = build_control(config, mats.m) if control is None else control
    state0 = initial_state(config)
    if sol.method == 'picard':
        return picard_solve(state0.l, state0.r, seed, control, sol.horizon, tables, mats, dt=sol.dt,
                            tol=sol.picard_tol, max_iter=sol.picard_max_iter, h0=state0.h, q0=state0.q,
                            norm_cfg=config.norm_kwargs())
    return timestep_solve(state0, seed, control, sol.horizon, sol.dt, tables, mats, norm_cfg=config.norm_kwargs())


def export_world_frame(solution: CoupledSolution, path: str) -> None:
    """Columns t, x(3), world velocity(3), world angular velocity(3)."""
    rows = []
    for k, t in enumerate(solution.times):
        state = RigidState.from_vector(solution.states[k])
        rows.append(np.concatenate([[t], state.h, body_world_transform(state, state.l, kind='vector'),
                                    body_world_transform(state, state.r, kind='vector')]))
    header = 't,x1,x2,x3,u1,u2,u3,omega1,omega2,omega3'
    np.savetxt(path, np.array(rows), fmt='%.17g', delimiter=',', header=header, comments='')


def cmd_potentials(config: ExperimentConfig, out_dir: str, threads: int, cache_dir: Optional[str]) -> Dict[str, Any]:
    tables, mats = build_model(config, threads, cache_dir)
    write_off(tables.mesh, os.path.join(out_dir, 'mesh.off'))
    export_added_mass(mats, os.path.join(out_dir, 'added_mass.json'))
    eig = np.linalg.eigvalsh(mats.calJ)
    print(f"M =\n{np.array2string(mats.M, precision=6)}")
    print(f"inertia eigenvalues: {np.array2string(eig, precision=6)}")
    return {'panels': tables.mesh.n_panels, 'm': mats.m, 'min_eigenvalue': float(eig.min()),
            'asymmetry': mats.asymmetry, 'geometry_hash': mats.geometry_hash}


def cmd_simulate(config: ExperimentConfig, out_dir: str, threads: int, cache_dir: Optional[str]) -> Dict[str, Any]:
    tables, mats = build_model(config, threads, cache_dir)
    write_off(tables.mesh, os.path.join(out_dir, 'mesh.off'))
    solution = simulate(config, tables, mats)
    paths = export_solution(solution, out_dir, {'config_hash': config_hash(config)})
    export_world_frame(solution, os.path.join(out_dir, 'world.csv'))
    export_markers_csv(solution.markers[-1], os.path.join(out_dir, 'markers_final.csv'))
    energies = solution.energies()
    drift = float(np.abs(energies - energies[0]).max() / energies[0]) if energies[0] > 0 else 0.0
    print(f"endpoint: {np.array2string(solution.states[-1], precision=6)}")
    return {'steps': len(solution.times) - 1, 'energy_drift': drift, 'files': paths}


def cmd_steer(config: ExperimentConfig, out_dir: str, threads: int, cache_dir: Optional[str]) -> Dict[str, Any]:
    tables, mats = build_model(config, threads, cache_dir)
    st = config.steering
    seed = build_seed(config, tables)
    target = RigidState(**{k: st.target.get(k, [0.0, 0.0, 0.0]) for k in ('h', 'q', 'l', 'r')})
    problem = SteeringProblem(initial=initial_state(config), target=target, horizon=st.horizon, n_knots=st.n_knots)
    result = steer_full(problem, seed, st.T0, tables, mats, eta1=st.eta1, eps_max=st.eps_max, tol=st.tol,
                        lambda_min=st.lambda_min, max_outer=st.max_outer, dt=config.solver.dt, max_workers=threads)
    paths = export_steering(result, out_dir, {'config_hash': config_hash(config)})
    export_solution(result.trajectory, out_dir, {'config_hash': config_hash(config)}, stem='steered')
    print(f"steered in {result.iterations} outer iterations, time scale {result.lam:.4g}, "
          f"endpoint error {result.residual:.3e}")
    return {'residual': result.residual, 'lambda': result.lam, 'epsilon': result.epsilon, 'files': paths}


def residual_times(solution: CoupledSolution, n_times: int) -> List[float]:
    """n_times interior grid times spread evenly over the run."""
    n = len(solution.times)
    if n < 3:
        raise ValueError("verification needs at least two time steps")
    idx = np.unique(np.linspace(1, n - 2, n_times).round().astype(int))
    return [float(solution.times[k]) for k in idx]


def cmd_verify(config: ExperimentConfig, out_dir: str, threads: int, cache_dir: Optional[str]) -> Dict[str, Any]:
    tables, mats = build_model(config, threads, cache_dir)
    solution = simulate(config, tables, mats)
    ver = config.verify
    report = residual_check(solution, np.asarray(ver.sample_points, dtype=float),
                            residual_times(solution, ver.n_times), fd_step=ver.fd_step)
    document = report.to_dict()
    failures = report.failures(ver.thresholds)
    document['failures'] = failures
    document['config_hash'] = config_hash(config)
    with open(os.path.join(out_dir, 'residuals.json'), 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=True)
    for line in failures:
        print(f"FAIL {line}")
    if failures:
        raise VerificationError(f"{len(failures)} residual threshold(s) exceeded", failures)
    print("all residuals within thresholds")
    return {'failures': failures}


def linear_response(config: ExperimentConfig, tables: PotentialTables, mats: AddedMassSet) -> Dict[str, Any]:
    """Deviation from the potential trajectory for the seed scaled by each configured factor."""
    sol = config.solver
    state0 = initial_state(config)
    control = build_control(config, mats.m)
    seed = build_seed(config, tables)
    reference = integrate_potential(state0, control, sol.horizon, sol.dt, mats)
    deviations = []
    for s in config.verify.scales:
        run = timestep_solve(state0, seed.scaled(s), control, sol.horizon, sol.dt, tables, mats)
        deviations.append(float(np.abs(run.states[:, 6:] - reference.states[:, 6:]).max()))
        logger.info(f"seed scale {s}: deviation {deviations[-1]:.3e}")
    ratios = [a / b if b > 0 else float('inf') for a, b in zip(deviations[:-1], deviations[1:])]
    return {'scales': list(config.verify.scales), 'deviations': deviations, 'ratios': ratios}


def time_scaling_exactness(config: ExperimentConfig, mats: AddedMassSet) -> Dict[str, Any]:
    """Potential trajectory vs the unscaled trajectory of the time-scaled problem."""
    sol = config.solver
    lam = config.verify.time_scale
    state0 = initial_state(config)
    control = build_control(config, mats.m)
    direct = integrate_potential(state0, control, sol.horizon, sol.dt, mats)
    scaled = integrate_potential(scale_state(state0, lam), control.time_scaled(lam), sol.horizon / lam,
                                 sol.dt / lam, mats)
    back = unscale_trajectory(scaled, lam)
    if back.states.shape != direct.states.shape:
        raise ValueError("scaled and direct runs use different step counts; pick dt dividing the horizon")
    state_error = float(np.abs(back.states - direct.states).max())
    time_error = float(np.abs(back.times - direct.times).max())
    logger.info(f"time scale {lam}: state mismatch {state_error:.3e}")
    return {'lambda': lam, 'state_error': state_error, 'time_error': time_error,
            'steps': len(direct.times) - 1}


def cmd_scale_study(config: ExperimentConfig, out_dir: str, threads: int,
                    cache_dir: Optional[str]) -> Dict[str, Any]:
    tables, mats = build_model(config, threads, cache_dir)
    document = {'config_hash': config_hash(config), 'linear_response': linear_response(config, tables, mats),
                'time_scaling': time_scaling_exactness(config, mats)}
    with open(os.path.join(out_dir, 'scale_study.json'), 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=True)
    print(json.dumps(document, indent=2, sort_keys=True))
    return document


COMMANDS = {
    'potentials': cmd_potentials,
    'simulate': cmd_simulate,
    'steer': cmd_steer,
    'verify': cmd_verify,
    'scale-study': cmd_scale_study,
}


def run(config: ExperimentConfig, command: Optional[str] = None, out_dir: Optional[str] = None,
        threads: int = 1, cache_dir: Optional[str] = None) -> Dict[str, Any]:
    """Execute one pipeline stage and journal it."""
    command = command or config.experiment
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    journal_event(out_dir, 'start', command=command, config_hash=config_hash(config))
    try:
        summary = COMMANDS[command](config, out_dir, threads, cache_dir)
    except Exception as e:
        journal_event(out_dir, 'error', command=command, error=type(e).__name__, message=str(e))
        raise
    journal_event(out_dir, 'finish', command=command, summary=summary)
    if cache_dir:
        db.set_state(db.init_database(cache_dir), f"last_run:{config_hash(config)}",
                     json.dumps({'command': command, 'out_dir': out_dir}, sort_keys=True))
    return summary


def journal_summary(out_dir: str) -> Dict[str, Any]:
    """
    Digest of the run journal in out_dir.

    Returns:
        Dict with valid, message, runs (finish count), errors (error count) and the last record
    """
    path = os.path.join(out_dir, JOURNAL_NAME)
    valid, message = validate_jsonl_format(path)
    if not valid:
        logger.warning(f"journal {path} is malformed: {message}")
        return {'valid': False, 'message': message, 'runs': 0, 'errors': 0, 'last': None}
    return {
        'valid': True,
        'message': message,
        'runs': len(filter_jsonl_by_kind(path, 'finish')),
        'errors': len(filter_jsonl_by_kind(path, 'error')),
        'last': get_latest_jsonl_entry(path),
    }


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the experiment CLI."""
    parser = argparse.ArgumentParser(
        description='Rigid body with vorticity in an ideal fluid: potentials, simulation, steering, verification',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('command', nargs='?', choices=sorted(COMMANDS),
                        help='Pipeline stage (default: the experiment named in the config)')
    parser.add_argument('--config', required=True, help='Experiment YAML/JSON file')
    parser.add_argument('--out', default=None, help='Output directory (default: output_dir from the config)')
    parser.add_argument('--threads', type=int, default=1, help='Worker thread cap (default: 1)')
    parser.add_argument('--cache', default=None, help='Directory of the potential-solve cache')
    parser.add_argument('--log-level', default='INFO', help='Logging level (default: INFO)')
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    try:
        config = load_config(args.config)
        logger.debug(format_config_for_display(config))
    except (ValueError, FileNotFoundError, yaml.YAMLError) as e:
        logger.error(f"config error: {e}")
        return EXIT_CONFIG

    out_dir = args.out or config.output_dir
    try:
        run(config, args.command, out_dir, max(1, args.threads), args.cache)
    except VerificationError as e:
        logger.error(f"verification failed: {e}")
        return EXIT_VERIFICATION
    except SolverError as e:
        logger.error(f"numerical failure: {e}")
        return EXIT_NUMERICAL
    except ValueError as e:
        logger.error(f"invalid input: {e}")
        return EXIT_CONFIG
    finally:
        digest = journal_summary(out_dir)
        if digest['valid']:
            logger.info(f"journal: {digest['runs']} finished, {digest['errors']} failed runs in {out_dir}")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
