"""
Configuration loading and validation.

A user YAML file is merged over ``config/default.yaml``.  Every problem found
(unknown keys, wrong types, out-of-range values) is collected and reported
together in one ConfigError whose lines name the dotted key at fault.
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import yaml

from core.controllers import PidGains, SupervisorConfig
from core.environment import (EnvSettings, MagneticCapsuleEnv, ObservationScales, RandomizationSpec, RewardWeights,
                              make_real_env)
from core.physics import CapsuleMagnet, CoilArrayConfig, FossenParams, IntegratorSettings
from core.sac import SacConfig, config_fingerprint
from core.tracking import TrajectorySpec, longpath_spec
from utils.errors import ArtifactIOError, ConfigError

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_CONFIG_PATH = Path(__file__).resolve().with_name('default.yaml')
CONFIG_ENV_VAR = 'MAGCAPSULE_CONFIG'


def _read_yaml(path: Path) -> Dict[str, Any]:
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as error:
        raise ArtifactIOError(path, f"cannot read configuration: {error.strerror or error}")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as error:
        raise ConfigError([f"{path}: not valid YAML ({error})"])
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return data


def merge_config(defaults: Dict[str, Any], override: Dict[str, Any], diagnostics: List[str],
                 prefix: str = '') -> Dict[str, Any]:
    """Recursive merge where keys absent from ``defaults`` are errors."""
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            diagnostics.append(f"{dotted}: unknown key")
        elif isinstance(defaults[key], dict):
            if isinstance(value, dict):
                merged[key] = merge_config(defaults[key], value, diagnostics, f"{dotted}.")
            else:
                diagnostics.append(f"{dotted}: expected a mapping")
        else:
            merged[key] = value
    return merged


class _Checker:
    """Collects one diagnostic per failed check."""

    def __init__(self, data: Dict[str, Any]):
        self.data = data
        self.diagnostics: List[str] = []

    def get(self, dotted: str) -> Any:
        node = self.data
        for part in dotted.split('.'):
            node = node[part]
        return node

    def number(self, dotted: str, check: Optional[Callable[[float], bool]] = None, rule: str = '',
               integer: bool = False, nullable: bool = False) -> None:
        value = self.get(dotted)
        if value is None and nullable:
            return
        expected = int if integer else (int, float)
        if isinstance(value, bool) or not isinstance(value, expected):
            self.diagnostics.append(f"{dotted}: expected {'an integer' if integer else 'a number'}, got {value!r}")
        elif check is not None and not check(value):
            self.diagnostics.append(f"{dotted}: {rule}, got {value!r}")

    def vector(self, dotted: str, length: int, check: Optional[Callable[[float], bool]] = None, rule: str = '',
               nullable: bool = False, integer: bool = False) -> None:
        value = self.get(dotted)
        if value is None and nullable:
            return
        if not isinstance(value, list) or len(value) != length:
            self.diagnostics.append(f"{dotted}: expected a list of {length} numbers, got {value!r}")
            return
        for index, item in enumerate(value):
            ok_type = int if integer else (int, float)
            if isinstance(item, bool) or not isinstance(item, ok_type):
                self.diagnostics.append(f"{dotted}[{index}]: expected a number, got {item!r}")
            elif check is not None and not check(item):
                self.diagnostics.append(f"{dotted}[{index}]: {rule}, got {item!r}")

    def choice(self, dotted: str, options) -> None:
        value = self.get(dotted)
        if value not in options:
            self.diagnostics.append(f"{dotted}: expected one of {sorted(options)}, got {value!r}")

    def flag(self, dotted: str) -> None:
        if not isinstance(self.get(dotted), bool):
            self.diagnostics.append(f"{dotted}: expected true or false, got {self.get(dotted)!r}")


def _positive(value) -> bool:
    return value > 0


def _nonnegative(value) -> bool:
    return value >= 0


def validate_config(data: Dict[str, Any]) -> List[str]:
    """Range and type checks over the merged configuration; returns diagnostics."""
    c = _Checker(data)
    c.number('seed', _nonnegative, 'must be nonnegative', integer=True)

    positions = c.get('physics.coil_positions')
    axes = c.get('physics.coil_axes')
    for name, rows in (('physics.coil_positions', positions), ('physics.coil_axes', axes)):
        if not isinstance(rows, list) or len(rows) != 4:
            c.diagnostics.append(f"{name}: expected four 3-vectors")
            continue
        for index, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != 3 or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in row):
                c.diagnostics.append(f"{name}[{index}]: expected three numbers, got {row!r}")
            elif name.endswith('axes') and abs(sum(v * v for v in row) ** 0.5 - 1.0) > 1e-12:
                c.diagnostics.append(f"{name}[{index}]: axis must have unit norm, got {row!r}")
    c.vector('physics.kappas', 4, _positive, 'must be positive')
    c.vector('physics.array_pose', 2)
    for key in ('plane_offset', 'i_max', 'r_min', 'moment_magnitude', 'mass', 'inertia'):
        c.number(f'physics.{key}', _positive, 'must be positive')
    c.flag('physics.include_coriolis')
    for key in ('viscosity', 'radius', 'drag_factor', 'density', 'wetted_area'):
        c.number(f'physics.fluid.{key}', _positive, 'must be positive')
    c.number('physics.fluid.drag_coefficient', _nonnegative, 'must be nonnegative')
    c.vector('physics.d_lin', 3, _nonnegative, 'must be nonnegative', nullable=True)
    c.vector('physics.d_quad', 3, _nonnegative, 'must be nonnegative', nullable=True)
    c.number('physics.integrator.n_substeps', lambda v: v >= 1, 'must be at least 1', integer=True)
    for key in ('dt_max', 'max_speed', 'max_yaw_rate'):
        c.number(f'physics.integrator.{key}', _positive, 'must be positive')

    for key in ('dt', 'workspace_half_width', 'start_radius', 'goal_radius'):
        c.number(f'environment.{key}', _positive, 'must be positive')
    c.number('environment.max_steps', lambda v: v >= 1, 'must be at least 1', integer=True)
    for key in ('position', 'velocity', 'yaw_rate'):
        c.number(f'environment.observation_scales.{key}', _positive, 'must be positive')
    for block in ('randomization', 'real'):
        prefix = f'environment.{block}'
        for key in ('kappa_range', 'damping_range'):
            c.vector(f'{prefix}.{key}', 2, _positive, 'must be positive')
            value = c.get(f'{prefix}.{key}')
            if isinstance(value, list) and len(value) == 2 and all(isinstance(v, (int, float)) for v in value) \
                    and value[0] > value[1]:
                c.diagnostics.append(f"{prefix}.{key}: lower bound exceeds upper bound, got {value!r}")
        for key in ('position_noise_std', 'heading_noise_std', 'disturbance_force_std'):
            c.number(f'{prefix}.{key}', _nonnegative, 'must be nonnegative')
        c.number(f'{prefix}.latency_steps', _nonnegative, 'must be nonnegative', integer=True)
        c.choice(f'{prefix}.mode', {'uniform', 'extremes'})

    for key in ('w_dist', 'w_dir', 'w_prog', 'w_prox', 'w_stab', 'w_lazy', 'w_smooth', 'w_energy', 'w_theta',
                'r_terminal', 'v_eps', 'v_min'):
        c.number(f'reward.{key}', _nonnegative, 'must be nonnegative')
    c.number('reward.d_near', _positive, 'must be positive')
    c.number('reward.k_hold', _nonnegative, 'must be nonnegative', integer=True)

    c.number('sac.gamma', lambda v: 0 < v < 1, 'must lie in (0, 1)')
    c.number('sac.rho', lambda v: 0 < v < 1, 'must lie in (0, 1)')
    for key in ('lr_sim', 'lr_real', 'initial_alpha', 'adam_eps'):
        c.number(f'sac.{key}', _positive, 'must be positive')
    for key in ('adam_beta1', 'adam_beta2'):
        c.number(f'sac.{key}', lambda v: 0 <= v < 1, 'must lie in [0, 1)')
    c.number('sac.target_entropy')
    for key in ('batch_size', 'buffer_capacity', 'updates_per_step', 'eval_interval', 'eval_episodes'):
        c.number(f'sac.{key}', lambda v: v >= 1, 'must be at least 1', integer=True)
    for key in ('warmup_steps', 'checkpoint_interval', 'total_steps', 'finetune_steps', 'finetune_warmup'):
        c.number(f'sac.{key}', _nonnegative, 'must be nonnegative', integer=True)
    batch, capacity = c.get('sac.batch_size'), c.get('sac.buffer_capacity')
    if isinstance(batch, int) and isinstance(capacity, int) and batch > capacity:
        c.diagnostics.append(f"sac.batch_size: must not exceed sac.buffer_capacity ({capacity}), got {batch}")
    hidden = c.get('sac.hidden_sizes')
    if not isinstance(hidden, list) or not hidden or not all(
            isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in hidden):
        c.diagnostics.append(f"sac.hidden_sizes: expected a nonempty list of positive integers, got {hidden!r}")
    c.flag('sac.retain_buffer')

    for key in ('kp', 'ki', 'kd'):
        c.vector(f'controllers.pid.{key}', 2, _nonnegative, 'must be nonnegative')
    for key in ('integral_limit', 'force_limit'):
        c.number(f'controllers.pid.{key}', _positive, 'must be positive')
    c.number('controllers.allocation_regularization', _nonnegative, 'must be nonnegative')
    c.number('controllers.hold_steps', lambda v: v >= 1, 'must be at least 1', integer=True)
    for key in ('recenter_radius', 'array_speed_limit'):
        c.number(f'controllers.supervisor.{key}', _positive, 'must be positive')
    c.number('controllers.supervisor.deadband', _nonnegative, 'must be nonnegative')
    radius, deadband = c.get('controllers.supervisor.recenter_radius'), c.get('controllers.supervisor.deadband')
    if isinstance(radius, (int, float)) and isinstance(deadband, (int, float)) and deadband >= radius:
        c.diagnostics.append(f"controllers.supervisor.deadband: must be below recenter_radius ({radius}), "
                             f"got {deadband}")

    c.number('tracking.trials', lambda v: v >= 1, 'must be at least 1', integer=True)
    c.number('tracking.square.side', _positive, 'must be positive')
    c.number('tracking.circle.radius', _positive, 'must be positive')
    for path in ('square', 'circle', 'longpath'):
        c.number(f'tracking.{path}.speed', _positive, 'must be positive')
        c.number(f'tracking.{path}.duration', _positive, 'must be positive', nullable=True)
        c.choice(f'tracking.{path}.orientation', {'tangential', 'perpendicular'})
    if not isinstance(c.get('tracking.longpath.waypoints'), str):
        c.diagnostics.append("tracking.longpath.waypoints: expected a file path")
    return c.diagnostics


@dataclass
class Settings:
    """Validated configuration turned into the domain dataclasses."""

    seed: int
    coils: CoilArrayConfig
    magnet: CapsuleMagnet
    fossen: FossenParams
    integrator: IntegratorSettings
    env: EnvSettings
    weights: RewardWeights
    randomization: RandomizationSpec
    real_perturbation: RandomizationSpec
    sac: SacConfig
    total_steps: int
    finetune_steps: int
    pid: PidGains
    allocation_regularization: float
    hold_steps: int
    supervisor: SupervisorConfig
    trials: int
    tracking: Dict[str, Any] = field(default_factory=dict)
    raw: Dict[str, Any] = field(default_factory=dict)
    source: Optional[str] = None

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.sac)

    def snapshot(self) -> Dict[str, Any]:
        return copy.deepcopy(self.raw)

    def make_env(self, seed: Optional[int] = None, randomization: Optional[RandomizationSpec] = None
                 ) -> MagneticCapsuleEnv:
        """Simulator with per-episode randomization (training ranges by default)."""
        return MagneticCapsuleEnv(self.coils, self.magnet, self.fossen, self.integrator, self.weights,
                                  randomization or self.randomization, self.env, seed=seed)

    def make_nominal_env(self, seed: Optional[int] = None) -> MagneticCapsuleEnv:
        """Nominal physics, training sensor noise."""
        nominal = RandomizationSpec(position_noise_std=self.randomization.position_noise_std,
                                    heading_noise_std=self.randomization.heading_noise_std)
        return self.make_env(seed, nominal)

    def make_real_env(self, seed: Optional[int] = None,
                      perturbation: Optional[RandomizationSpec] = None) -> MagneticCapsuleEnv:
        return make_real_env(perturbation or self.real_perturbation, self.coils, self.magnet, self.fossen,
                             self.integrator, self.weights, self.env, seed=seed,
                             training_randomization=self.randomization)

    def trajectory(self, name: str) -> TrajectorySpec:
        block = self.tracking[name]
        if name == 'square':
            return TrajectorySpec.square(block['side'], block['speed'], orientation_rule=block['orientation'])
        if name == 'circle':
            return TrajectorySpec.circle(block['radius'], block['speed'], orientation_rule=block['orientation'])
        if name == 'longpath':
            path = Path(block['waypoints'])
            if not path.is_absolute():
                path = PROJECT_ROOT / path
            spec = longpath_spec(path, block['speed'])
            if block['orientation'] != spec.orientation_rule:
                spec = TrajectorySpec.polyline(spec.waypoints, spec.speed, spec.name, block['orientation'],
                                               spec.min_passage_width)
            return spec
        raise ConfigError([f"tracking.{name}: unknown trajectory"])

    def duration(self, name: str) -> Optional[float]:
        return self.tracking[name]['duration']


def _randomization(block: Dict[str, Any]) -> RandomizationSpec:
    return RandomizationSpec(tuple(block['kappa_range']), tuple(block['damping_range']),
                             block['position_noise_std'], block['heading_noise_std'], block['latency_steps'],
                             block['mode'], block['disturbance_force_std'])


def _fossen(physics: Dict[str, Any]) -> FossenParams:
    fluid = physics['fluid']
    params = FossenParams.from_fluid(physics['mass'], physics['inertia'], fluid['viscosity'], fluid['radius'],
                                     fluid['drag_factor'], fluid['density'], fluid['drag_coefficient'],
                                     fluid['wetted_area'], physics['include_coriolis'])
    if physics['d_lin'] is not None:
        params = FossenParams(params.m_a, physics['d_lin'], params.d_quad, params.include_coriolis)
    if physics['d_quad'] is not None:
        params = FossenParams(params.m_a, params.d_lin, physics['d_quad'], params.include_coriolis)
    return params


def build_settings(data: Dict[str, Any], source: Optional[str] = None) -> Settings:
    """Turn a merged, validated mapping into Settings; constructor errors become diagnostics."""
    diagnostics: List[str] = []

    def build(section: str, factory: Callable[[], Any]) -> Any:
        try:
            return factory()
        except (ValueError, TypeError) as error:
            diagnostics.append(f"{section}: {error}")
            return None

    physics, environment, controllers = data['physics'], data['environment'], data['controllers']
    sac_block = {k: v for k, v in data['sac'].items() if k not in ('total_steps', 'finetune_steps')}

    coils = build('physics', lambda: CoilArrayConfig(physics['coil_positions'], physics['coil_axes'],
                                                     physics['kappas'], physics['array_pose'],
                                                     physics['plane_offset'], physics['i_max'], physics['r_min']))
    magnet = build('physics.moment_magnitude', lambda: CapsuleMagnet(physics['moment_magnitude']))
    fossen = build('physics', lambda: _fossen(physics))
    integrator = build('physics.integrator', lambda: IntegratorSettings(**physics['integrator']))
    env = build('environment', lambda: EnvSettings(
        environment['dt'], environment['max_steps'], environment['workspace_half_width'],
        environment['start_radius'], environment['goal_radius'],
        scales=ObservationScales(**environment['observation_scales'])))
    weights = build('reward', lambda: RewardWeights(**data['reward']))
    randomization = build('environment.randomization', lambda: _randomization(environment['randomization']))
    real = build('environment.real', lambda: _randomization(environment['real']))
    sac = build('sac', lambda: SacConfig(seed=data['seed'], **sac_block))
    pid = build('controllers.pid', lambda: PidGains(**{k: tuple(v) if isinstance(v, list) else v
                                                       for k, v in controllers['pid'].items()}))
    supervisor = build('controllers.supervisor', lambda: SupervisorConfig(**controllers['supervisor']))

    if integrator is not None and env is not None and env.dt > integrator.dt_max:
        diagnostics.append(f"environment.dt: must not exceed physics.integrator.dt_max ({integrator.dt_max}), "
                           f"got {env.dt}")
    if diagnostics:
        raise ConfigError(diagnostics)

    return Settings(
        seed=data['seed'], coils=coils, magnet=magnet, fossen=fossen, integrator=integrator, env=env,
        weights=weights, randomization=randomization, real_perturbation=real, sac=sac,
        total_steps=data['sac']['total_steps'], finetune_steps=data['sac']['finetune_steps'], pid=pid,
        allocation_regularization=controllers['allocation_regularization'],
        hold_steps=controllers['hold_steps'], supervisor=supervisor, trials=data['tracking']['trials'],
        tracking={name: data['tracking'][name] for name in ('square', 'circle', 'longpath')},
        raw=data, source=source,
    )


def load_settings(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> Settings:
    """
    Load the default configuration, merge ``path`` and ``overrides`` over it and validate.

    Args:
        path: User YAML file; falls back to $MAGCAPSULE_CONFIG, then to the defaults alone.
        overrides: Nested mapping applied last (e.g. {'seed': 3} from the command line).

    Raises:
        ArtifactIOError: The file cannot be read.
        ConfigError: Unknown keys or invalid values, all listed.
    """
    defaults = _read_yaml(DEFAULT_CONFIG_PATH)
    path = path or os.getenv(CONFIG_ENV_VAR) or None
    diagnostics: List[str] = []
    merged = defaults
    source = None
    if path:
        source = str(path)
        merged = merge_config(merged, _read_yaml(Path(path)), diagnostics)
    if overrides:
        merged = merge_config(merged, overrides, diagnostics)
    if diagnostics:
        raise ConfigError(diagnostics)
    diagnostics = validate_config(merged)
    if diagnostics:
        raise ConfigError(diagnostics)
    settings = build_settings(merged, source)
    logger.info(f"Configuration loaded from {source or DEFAULT_CONFIG_PATH} (fingerprint {settings.fingerprint[:12]})")
    return settings
