"""
Configuration loader for immersed-body experiments.

Loads and validates one experiment YAML (JSON documents load unchanged) into
typed config sections, with defaults for every optional field.
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import yaml

logger = logging.getLogger(__name__)

EXPERIMENTS = ('potentials', 'simulate', 'steer', 'verify', 'scale-study')
MAX_REFINEMENT = 7


@dataclass
class GeometryConfig:
    """Body surface parameters."""
    kind: str
    refinement: int
    radius: float = 1.0
    semiaxes: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    path: Optional[str] = None
    near_factor: float = 2.0

    def as_spec(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'refinement': self.refinement, 'radius': self.radius,
                'semiaxes': list(self.semiaxes), 'path': self.path}


@dataclass
class ControlPatchConfig:
    """Boundary control patches and the control signal acting on them."""
    layout: str = 'axis'
    half_angle: float = 0.5
    regions: List[Dict[str, Any]] = field(default_factory=list)
    n_knots: int = 4
    coefficients: Optional[List[float]] = None


@dataclass
class InertiaConfig:
    """Solid density and the neutral-buoyancy check."""
    density: Dict[str, Any] = field(default_factory=lambda: {'kind': 'uniform', 'value': 1.0})
    require_neutral_buoyancy: bool = True
    buoyancy_rtol: float = 1e-2


@dataclass
class VorticityConfig:
    """Initial vorticity seed and marker discretization."""
    seed: Dict[str, Any] = field(default_factory=lambda: {'kind': 'zero'})
    spacing: float = 0.1
    eps_blob: Optional[float] = None
    d_min: Optional[float] = None


@dataclass
class SolverConfig:
    """Time stepping, Picard iteration and initial state."""
    dt: float
    horizon: float
    method: str = 'timestep'
    picard_tol: float = 1e-6
    picard_max_iter: int = 30
    h0: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    q0: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    l0: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    r0: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class NormConfig:
    """Weighted-norm exponents (p, delta, alpha) and Holder sampling."""
    p: float = 4.0
    delta: float = 0.0
    alpha: float = 0.2
    max_pairs: int = 20000


@dataclass
class SteeringConfig:
    """Targets and tolerances of the steering loops."""
    target: Dict[str, List[float]] = field(default_factory=dict)
    horizon: float = 1.0
    n_knots: int = 4
    eta1: float = 0.1
    eps_max: float = 0.5
    tol: float = 1e-6
    max_outer: int = 20
    lambda_min: float = 1.0 / 64.0
    T0: float = 1.0


@dataclass
class VerifyConfig:
    """Residual thresholds (relative RMS), sample layout and scale-study factors."""
    thresholds: Dict[str, float] = field(default_factory=lambda: {
        'momentum': 1e-2, 'divergence': 1e-6, 'slip': 1e-3, 'transport': 0.5})
    sample_points: List[List[float]] = field(default_factory=lambda: [
        [3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0], [-2.5, 1.5, 0.5]])
    n_times: int = 3
    fd_step: float = 1e-4
    scales: List[float] = field(default_factory=lambda: [1.0, 0.5, 0.25])
    time_scale: float = 0.25


@dataclass
class ExperimentConfig:
    """Complete experiment description."""
    experiment: str
    geometry: GeometryConfig
    solver: SolverConfig
    controls: ControlPatchConfig = field(default_factory=ControlPatchConfig)
    inertia: InertiaConfig = field(default_factory=InertiaConfig)
    vorticity: VorticityConfig = field(default_factory=VorticityConfig)
    norms: NormConfig = field(default_factory=NormConfig)
    steering: SteeringConfig = field(default_factory=SteeringConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    output_dir: str = 'out'
    seed: int = 0

    def norm_kwargs(self) -> Dict[str, Any]:
        return {'p': self.norms.p, 'delta': self.norms.delta, 'alpha': self.norms.alpha,
                'max_pairs': self.norms.max_pairs, 'seed': self.seed}


SECTIONS = {
    'geometry': GeometryConfig,
    'controls': ControlPatchConfig,
    'inertia': InertiaConfig,
    'vorticity': VorticityConfig,
    'solver': SolverConfig,
    'norms': NormConfig,
    'steering': SteeringConfig,
    'verify': VerifyConfig,
}


def _section(name: str, data: Dict[str, Any], required: List[str]):
    if not isinstance(data, dict):
        raise ValueError(f"{name} section must be a mapping")
    missing = [key for key in required if key not in data]
    if missing:
        raise ValueError(f"Missing required {name} config keys: {missing}")
    cls = SECTIONS[name]
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"Unknown {name} config keys: {unknown}")
    try:
        return cls(**copy.deepcopy(data))
    except TypeError as e:
        raise ValueError(f"{name}: {e}")


def _vector(name: str, value) -> None:
    if not (isinstance(value, (list, tuple)) and len(value) == 3):
        raise ValueError(f"{name} must be a list of 3 numbers")


def validate_config(config: ExperimentConfig) -> None:
    """
    Check every per-field constraint.

    Raises:
        ValueError: Naming the first offending field
    """
    if config.experiment not in EXPERIMENTS:
        raise ValueError(f"experiment must be one of {list(EXPERIMENTS)}, got {config.experiment!r}")

    geo = config.geometry
    if geo.kind not in ('sphere', 'ellipsoid', 'off'):
        raise ValueError(f"geometry.kind must be sphere, ellipsoid or off, got {geo.kind!r}")
    if not 0 <= int(geo.refinement) <= MAX_REFINEMENT:
        raise ValueError(f"geometry.refinement must be in [0, {MAX_REFINEMENT}]")
    if geo.kind == 'sphere' and geo.radius <= 0:
        raise ValueError("geometry.radius must be positive")
    if geo.kind == 'ellipsoid' and (len(geo.semiaxes) != 3 or min(geo.semiaxes) <= 0):
        raise ValueError("geometry.semiaxes must be 3 positive numbers")
    if geo.kind == 'off' and not geo.path:
        raise ValueError("geometry.path is required for OFF meshes")
    if geo.near_factor <= 0:
        raise ValueError("geometry.near_factor must be positive")

    ctl = config.controls
    if ctl.layout not in ('none', 'axis', 'axis_diagonal', 'custom'):
        raise ValueError(f"controls.layout must be none, axis, axis_diagonal or custom, got {ctl.layout!r}")
    if ctl.layout == 'custom' and not ctl.regions:
        raise ValueError("controls.regions is required for the custom layout")
    if not 0 < ctl.half_angle < 3.14159:
        raise ValueError("controls.half_angle must be in (0, pi)")
    if ctl.n_knots < 1:
        raise ValueError("controls.n_knots must be positive")

    if config.inertia.buoyancy_rtol <= 0:
        raise ValueError("inertia.buoyancy_rtol must be positive")

    vort = config.vorticity
    if vort.spacing <= 0:
        raise ValueError("vorticity.spacing must be positive")
    if vort.eps_blob is not None and vort.eps_blob <= 0:
        raise ValueError("vorticity.eps_blob must be positive")
    if vort.d_min is not None and vort.d_min < 0:
        raise ValueError("vorticity.d_min must be non-negative")
    if vort.seed.get('kind', 'zero') not in ('zero', 'blob', 'ring', 'hill'):
        raise ValueError(f"vorticity.seed.kind must be zero, blob, ring or hill, got {vort.seed.get('kind')!r}")

    sol = config.solver
    if sol.dt <= 0:
        raise ValueError("solver.dt must be positive")
    if sol.horizon <= 0:
        raise ValueError("solver.horizon must be positive")
    if sol.method not in ('timestep', 'picard'):
        raise ValueError(f"solver.method must be timestep or picard, got {sol.method!r}")
    if sol.picard_tol <= 0:
        raise ValueError("solver.picard_tol must be positive")
    if sol.picard_max_iter <= 0:
        raise ValueError("solver.picard_max_iter must be positive")
    for name in ('h0', 'q0', 'l0', 'r0'):
        _vector(f"solver.{name}", getattr(sol, name))
    if sum(x * x for x in sol.q0) >= 1.0:
        raise ValueError("solver.q0 must lie inside the unit ball")

    norms = config.norms
    if not 3.0 < norms.p <= 4.0:
        raise ValueError("norms.p must be in (3, 4]")
    top = 1.0 - 3.0 / norms.p
    if not 0.0 <= norms.delta < top:
        raise ValueError(f"norms.delta must be in [0, {top:.6g})")
    if not 0.0 < norms.alpha <= top:
        raise ValueError(f"norms.alpha must be in (0, {top:.6g}]")
    if norms.max_pairs <= 0:
        raise ValueError("norms.max_pairs must be positive")

    st = config.steering
    for name in ('horizon', 'eta1', 'tol', 'T0'):
        if getattr(st, name) <= 0:
            raise ValueError(f"steering.{name} must be positive")
    if not 0.0 < st.eps_max < 1.0:
        raise ValueError("steering.eps_max must be in (0, 1)")
    if not 0.0 < st.lambda_min <= 1.0:
        raise ValueError("steering.lambda_min must be in (0, 1]")
    if st.max_outer <= 0 or st.n_knots < 1:
        raise ValueError("steering.max_outer and n_knots must be positive")
    for name, value in st.target.items():
        if name not in ('h', 'q', 'l', 'r'):
            raise ValueError(f"steering.target has unknown component {name!r}")
        _vector(f"steering.target.{name}", value)

    ver = config.verify
    for name, value in ver.thresholds.items():
        if name not in ('momentum', 'divergence', 'slip', 'transport'):
            raise ValueError(f"verify.thresholds has unknown residual {name!r}")
        if value <= 0:
            raise ValueError(f"verify.thresholds.{name} must be positive")
    for i, point in enumerate(ver.sample_points):
        _vector(f"verify.sample_points[{i}]", point)
    if ver.n_times < 1 or ver.fd_step <= 0:
        raise ValueError("verify.n_times and verify.fd_step must be positive")
    if not ver.scales or min(ver.scales) <= 0:
        raise ValueError("verify.scales must be positive numbers")
    if not 0.0 < ver.time_scale <= 1.0:
        raise ValueError("verify.time_scale must be in (0, 1]")


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Build and validate an ExperimentConfig from a parsed document.

    Raises:
        ValueError: On missing keys, unknown keys or constraint violations
    """
    if not isinstance(data, dict):
        raise ValueError("Config file must contain a YAML dictionary")

    required_keys = ['experiment', 'geometry', 'solver']
    missing_keys = [key for key in required_keys if key not in data]
    if missing_keys:
        raise ValueError(f"Missing required config keys: {missing_keys}")
    unknown = sorted(set(data) - set(SECTIONS) - {'experiment', 'output_dir', 'seed'})
    if unknown:
        raise ValueError(f"Unknown config keys: {unknown}")

    config = ExperimentConfig(
        experiment=str(data['experiment']),
        geometry=_section('geometry', data['geometry'], ['kind', 'refinement']),
        solver=_section('solver', data['solver'], ['dt', 'horizon']),
        controls=_section('controls', data.get('controls', {}), []),
        inertia=_section('inertia', data.get('inertia', {}), []),
        vorticity=_section('vorticity', data.get('vorticity', {}), []),
        norms=_section('norms', data.get('norms', {}), []),
        steering=_section('steering', data.get('steering', {}), []),
        verify=_section('verify', data.get('verify', {}), []),
        output_dir=str(data.get('output_dir', 'out')),
        seed=int(data.get('seed', 0)),
    )
    validate_config(config)
    return config


def load_config(config_path: str) -> ExperimentConfig:
    """
    Load and validate an experiment file.

    Args:
        config_path: Path to a YAML or JSON experiment file

    Returns:
        Validated ExperimentConfig

    Raises:
        FileNotFoundError: If config file doesn't exist
        ValueError: If config validation fails
        yaml.YAMLError: If YAML parsing fails
    """
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Config file not found: {config_path}")

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise yaml.YAMLError(f"Failed to parse YAML config: {e}")

    config = config_from_dict(data)
    logger.info(f"Configuration loaded successfully from {config_path}")
    return config


def get_default_config() -> ExperimentConfig:
    """Unit sphere at refinement 3 with three axis patches, no vorticity."""
    return ExperimentConfig(
        experiment='potentials',
        geometry=GeometryConfig(kind='sphere', refinement=3),
        solver=SolverConfig(dt=1e-2, horizon=1.0),
    )


def load_config_or_default(config_path: Optional[str]) -> ExperimentConfig:
    """
    Load config with fallback to defaults if the file doesn't exist.
    """
    if config_path and os.path.exists(config_path):
        return load_config(config_path)
    logger.warning(f"Config file {config_path} not found, using defaults")
    return get_default_config()


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form, output location excluded."""
    document = asdict(config)
    document.pop('output_dir', None)
    return hashlib.sha256(json.dumps(document, sort_keys=True, separators=(',', ':')).encode()).hexdigest()


def format_config_for_display(config: ExperimentConfig) -> str:
    """Render the validated values section by section."""
    lines = ["Configuration:", "", f"experiment: {config.experiment}", f"output_dir: {config.output_dir}",
             f"seed: {config.seed}"]
    for name in SECTIONS:
        lines.append("")
        lines.append(f"{name}:")
        for key, value in asdict(getattr(config, name)).items():
            lines.append(f"  {key}: {value}")
    return "\n".join(lines)
