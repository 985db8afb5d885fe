"""
Reference trajectories, tracking metrics and the controller comparison.

Paths are arc-length parameterized: the reference at time t sits at
s = speed * t along the path (wrapping for closed paths, clamped at the end
of open ones).  Position error is the distance to the closest point of the
whole path, not to the time-indexed reference.  Statistics use the
population convention, so rmse^2 = mean^2 + std^2.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.controllers import ArraySupervisor, Controller, PidAllocationController, PidGains, SupervisorConfig
from core.environment import MOVING_REFERENCE, GoalState, MagneticCapsuleEnv, with_settings
from core.physics import CapsuleState, wrap_angle
from utils.errors import ArtifactIOError, ContractViolationError, MagCapsuleError
from utils.seeding import trial_seeds

logger = logging.getLogger(__name__)

SQUARE = 'square'
CIRCLE = 'circle'
POLYLINE = 'polyline'
TANGENTIAL = 'tangential'
PERPENDICULAR = 'perpendicular'

# Tracking rollouts must not stop at the training workspace bound
TRACKING_WORKSPACE = 1.0


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str
    name: str
    speed: float
    orientation_rule: str = TANGENTIAL
    size: float = 0.0
    center: Tuple[float, float] = (0.0, 0.0)
    waypoints: Optional[np.ndarray] = None
    min_passage_width: Optional[float] = None

    def __post_init__(self):
        if self.kind not in (SQUARE, CIRCLE, POLYLINE):
            raise ValueError(f"Unknown trajectory kind '{self.kind}'")
        if self.orientation_rule not in (TANGENTIAL, PERPENDICULAR):
            raise ValueError(f"Unknown orientation rule '{self.orientation_rule}'")
        if self.speed <= 0.0:
            raise ValueError("Reference speed must be positive")
        object.__setattr__(self, 'center', (float(self.center[0]), float(self.center[1])))
        if self.kind == POLYLINE:
            points = np.asarray(self.waypoints, dtype=float)
            if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 2:
                raise ValueError("A polyline needs at least two (x, y) waypoints")
            if np.any(np.linalg.norm(np.diff(points, axis=0), axis=1) <= 0.0):
                raise ValueError("Consecutive waypoints must differ")
            object.__setattr__(self, 'waypoints', points)
        elif self.size <= 0.0:
            raise ValueError("Trajectory dimensions must be positive")

    @classmethod
    def square(cls, side: float = 0.040, speed: float = 0.005, center: Sequence[float] = (0.0, 0.0),
               orientation_rule: str = TANGENTIAL) -> 'TrajectorySpec':
        """Counter-clockwise square starting at its lower-left corner."""
        return cls(SQUARE, SQUARE, speed, orientation_rule, side, tuple(center))

    @classmethod
    def circle(cls, radius: float = 0.020, speed: float = 0.005, center: Sequence[float] = (0.0, 0.0),
               orientation_rule: str = PERPENDICULAR) -> 'TrajectorySpec':
        """Counter-clockwise circle starting at angle 0."""
        return cls(CIRCLE, CIRCLE, speed, orientation_rule, radius, tuple(center))

    @classmethod
    def polyline(cls, waypoints: np.ndarray, speed: float = 0.008, name: str = 'longpath',
                 orientation_rule: str = TANGENTIAL, min_passage_width: Optional[float] = None) -> 'TrajectorySpec':
        return cls(POLYLINE, name, speed, orientation_rule, waypoints=waypoints,
                   min_passage_width=min_passage_width)

    @property
    def closed(self) -> bool:
        return self.kind in (SQUARE, CIRCLE)

    def vertices(self) -> np.ndarray:
        """Polyline vertices; a square repeats its first corner at the end."""
        if self.kind == SQUARE:
            h = self.size / 2.0
            corners = np.array([[-h, -h], [h, -h], [h, h], [-h, h], [-h, -h]])
            return corners + np.asarray(self.center)
        if self.kind == POLYLINE:
            return self.waypoints
        raise ValueError("A circle has no vertices")

    @property
    def length(self) -> float:
        if self.kind == CIRCLE:
            return 2.0 * math.pi * self.size
        return float(np.sum(np.linalg.norm(np.diff(self.vertices(), axis=0), axis=1)))

    def lap_time(self) -> float:
        return self.length / self.speed


@dataclass(frozen=True)
class ReferencePoint:
    position: np.ndarray
    heading_d: float
    arc_length: float
    clamped: bool = False


def _path_heading(spec: TrajectorySpec, tangent: float) -> float:
    if spec.orientation_rule == PERPENDICULAR:
        return wrap_angle(tangent + math.pi / 2.0)
    return wrap_angle(tangent)


def generate_reference(spec: TrajectorySpec, t: float) -> ReferencePoint:
    """Reference pose at time ``t`` for constant-speed travel along the path."""
    if t < 0.0:
        raise ValueError(f"t must be nonnegative, got {t}")
    length = spec.length
    s = spec.speed * t
    clamped = False
    if spec.closed:
        s = math.fmod(s, length)
    elif s > length:
        s, clamped = length, True

    if spec.kind == CIRCLE:
        phi = s / spec.size
        position = np.asarray(spec.center) + spec.size * np.array([math.cos(phi), math.sin(phi)])
        return ReferencePoint(position, _path_heading(spec, phi + math.pi / 2.0), s, clamped)

    vertices = spec.vertices()
    segments = np.diff(vertices, axis=0)
    cumulative = np.concatenate([[0.0], np.cumsum(np.linalg.norm(segments, axis=1))])
    index = int(np.clip(np.searchsorted(cumulative, s, side='right') - 1, 0, len(segments) - 1))
    segment_length = cumulative[index + 1] - cumulative[index]
    fraction = (s - cumulative[index]) / segment_length
    position = vertices[index] + fraction * segments[index]
    tangent = math.atan2(segments[index][1], segments[index][0])
    return ReferencePoint(position, _path_heading(spec, tangent), s, clamped)


def closest_point_distance(spec: TrajectorySpec, position: Sequence[float]) -> float:
    """Euclidean distance to the nearest point of the path."""
    p = np.asarray(position, dtype=float)[:2]
    if spec.kind == CIRCLE:
        return abs(float(np.linalg.norm(p - np.asarray(spec.center))) - spec.size)
    vertices = spec.vertices()
    starts = vertices[:-1]
    segments = np.diff(vertices, axis=0)
    fraction = np.clip(np.einsum('ij,ij->i', p - starts, segments) / np.einsum('ij,ij->i', segments, segments),
                       0.0, 1.0)
    nearest = starts + fraction[:, None] * segments
    return float(np.min(np.linalg.norm(nearest - p, axis=1)))


def heading_error(capsule_theta: float, heading_d: float) -> float:
    """Signed wrapped difference capsule_theta - heading_d in (-pi, pi]."""
    return wrap_angle(capsule_theta - heading_d)


def load_waypoints(path: Union[str, Path]) -> Tuple[np.ndarray, Dict[str, str]]:
    """
    Read an "x y" per line waypoint file.

    Comment lines of the form ``# key: value`` are returned as metadata.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as error:
        raise ArtifactIOError(path, str(error))
    metadata: Dict[str, str] = {}
    points = []
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith('#'):
            key, sep, value = line.lstrip('#').partition(':')
            if sep:
                metadata[key.strip()] = value.strip()
            continue
        fields = line.split('#', 1)[0].split()
        if len(fields) != 2:
            raise ArtifactIOError(path, f"line {number}: expected 'x y', got '{line}'")
        try:
            points.append((float(fields[0]), float(fields[1])))
        except ValueError:
            raise ArtifactIOError(path, f"line {number}: non-numeric waypoint '{line}'")
    if len(points) < 2:
        raise ArtifactIOError(path, "fewer than two waypoints")
    return np.array(points), metadata


def longpath_spec(path: Union[str, Path], speed: float = 0.008) -> TrajectorySpec:
    waypoints, metadata = load_waypoints(path)
    width = metadata.get('min_passage_width')
    return TrajectorySpec.polyline(waypoints, speed, name='longpath',
                                   min_passage_width=float(width) if width else None)


# -- metrics -----------------------------------------------------------------

def error_statistics(values: Sequence[float]) -> Dict[str, float]:
    """RMSE, population std, max and mean of an error series."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return {'rmse': float('nan'), 'std': float('nan'), 'max': float('nan'), 'mean': float('nan')}
    return {
        'rmse': float(np.sqrt(np.mean(values ** 2))),
        'std': float(np.std(values)),
        'max': float(np.max(values)),
        'mean': float(np.mean(values)),
    }


@dataclass
class TrackingReport:
    controller: str
    trajectory: str
    seed: int
    duration: float = 0.0
    dist_rmse: float = float('nan')
    dist_std: float = float('nan')
    dist_max: float = float('nan')
    dist_mean: float = float('nan')
    angle_rmse: Optional[float] = None
    angle_std: Optional[float] = None
    angle_max: Optional[float] = None
    angle_mean: Optional[float] = None
    post_convergence: Dict[str, Optional[float]] = field(default_factory=dict)
    converged_at: Optional[float] = None
    max_array_offset: float = 0.0
    supervisor_engaged_steps: int = 0
    failed: bool = False
    failure_reason: str = ''
    statistics: str = 'population'
    series: List[Dict[str, float]] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        """JSON-ready report without the per-step series."""
        data = {key: value for key, value in self.__dict__.items() if key != 'series'}
        data['steps'] = len(self.series)
        return data

    def series_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.series)

    def array_pose_series(self) -> np.ndarray:
        return np.array([[row['array_x'], row['array_y']] for row in self.series]).reshape(-1, 2)


def summarize_series(report: TrackingReport, distances: Sequence[float], angles: Optional[Sequence[float]],
                     d_near: float) -> TrackingReport:
    """
    Fill the aggregates of ``report`` from raw error series.

    Post-convergence figures start at the first sample closer than
    ``d_near``; angle metrics are skipped when ``angles`` is None.
    """
    distances = np.asarray(distances, dtype=float)
    full = error_statistics(distances)
    report.dist_rmse, report.dist_std, report.dist_max = full['rmse'], full['std'], full['max']
    report.dist_mean = full['mean']

    converged = np.flatnonzero(distances < d_near)
    start = int(converged[0]) if converged.size else None
    report.post_convergence = {}
    if start is not None:
        tail = error_statistics(distances[start:])
        report.post_convergence = {'dist_rmse': tail['rmse'], 'dist_std': tail['std'], 'dist_max': tail['max']}
        if len(report.series) > start:
            report.converged_at = float(report.series[start]['t'])

    if angles is not None:
        angles = np.abs(np.asarray(angles, dtype=float))
        stats = error_statistics(angles)
        report.angle_rmse, report.angle_std, report.angle_max = stats['rmse'], stats['std'], stats['max']
        report.angle_mean = stats['mean']
        if start is not None:
            tail = error_statistics(angles[start:])
            report.post_convergence.update({'angle_rmse': tail['rmse'], 'angle_std': tail['std'],
                                            'angle_max': tail['max']})
    return report


# -- rollouts ----------------------------------------------------------------

def default_duration(spec: TrajectorySpec) -> float:
    return spec.lap_time()


def run_tracking_trial(controller: Controller, env: MagneticCapsuleEnv, spec: TrajectorySpec,
                       duration: Optional[float] = None, seed: int = 0,
                       supervisor: Optional[SupervisorConfig] = None) -> TrackingReport:
    """
    Track the moving reference with ``controller`` and measure the errors.

    The capsule starts at rest on the first reference point with the
    reference heading; the coil array starts centred on the path (closed
    paths) or on the first waypoint (open paths).  With a supervisor the
    array follows the measured capsule position after every step.  Physics
    or allocation failures end the trial with ``failed`` set.
    """
    duration = default_duration(spec) if duration is None else float(duration)
    if spec.closed and duration < spec.lap_time() * (1.0 - 1e-9):
        raise ContractViolationError(f"Duration {duration} s does not cover one lap ({spec.lap_time():.1f} s)")

    n_steps = int(round(duration / env.dt))
    trial_env = with_settings(env, terminate_on_success=False, max_steps=max(n_steps, 1),
                              workspace_half_width=TRACKING_WORKSPACE)
    dt = trial_env.dt
    start = generate_reference(spec, 0.0)
    array_pose = np.asarray(spec.center) if spec.closed else start.position
    start_state = CapsuleState(float(start.position[0]), float(start.position[1]), start.heading_d)
    goal = GoalState(float(start.position[0]), float(start.position[1]), start.heading_d, MOVING_REFERENCE)
    trial_env.reset(seed=seed, start_state=start_state, goal=goal, array_pose=array_pose)
    controller.reset()
    controller.on_array_moved(trial_env.array_center)
    array_supervisor = ArraySupervisor(supervisor) if supervisor is not None else None

    report = TrackingReport(controller.name, spec.name, int(seed), duration)
    distances: List[float] = []
    angles: List[float] = []
    for k in range(n_steps):
        reference = generate_reference(spec, (k + 1) * dt)
        goal = GoalState(float(reference.position[0]), float(reference.position[1]), reference.heading_d,
                         MOVING_REFERENCE)
        trial_env.set_goal(goal)
        measured = trial_env.measured_state()
        try:
            cmd = controller.compute(measured, goal, trial_env.observation_for(measured), dt)
            trial_env.step(np.clip(cmd.to_action(trial_env.i_max), -1.0, 1.0))
        except MagCapsuleError as error:
            logger.warning(f"Trial {controller.name}/{spec.name}/seed {seed} failed at step {k}: {error}")
            report.failed = True
            report.failure_reason = f"step {k}: {error}"
            break

        if array_supervisor is not None:
            pose = array_supervisor.update(trial_env.measured_state().position, trial_env.array_center, dt)
            if array_supervisor.engaged or not np.array_equal(pose, trial_env.array_center):
                report.supervisor_engaged_steps += 1
            trial_env.set_array_pose(pose)
            controller.on_array_moved(pose)

        state = trial_env.state
        distance = closest_point_distance(spec, state.position)
        angle = heading_error(state.theta, reference.heading_d)
        center = trial_env.array_center
        offset = float(np.linalg.norm(state.position - center))
        report.max_array_offset = max(report.max_array_offset, offset)
        distances.append(distance)
        angles.append(angle)
        row = {'t': round((k + 1) * dt, 10), 'x': state.x, 'y': state.y, 'theta': state.theta,
               'ref_x': float(reference.position[0]), 'ref_y': float(reference.position[1]),
               'ref_heading': reference.heading_d, 'distance': distance, 'heading_error': angle,
               'array_x': float(center[0]), 'array_y': float(center[1]), 'array_offset': offset}
        for coil, current in enumerate(cmd.currents):
            row[f'i{coil + 1}'] = float(current)
        report.series.append(row)

    if not distances:
        report.failed = True
        report.failure_reason = report.failure_reason or 'no steps completed'
        return report

    return summarize_series(report, distances, angles if controller.controls_orientation else None,
                            trial_env.weights.d_near)


@dataclass
class ComparisonRow:
    controller: str
    trajectory: str
    trials: int
    failed: int
    dist_rmse: Optional[float] = None
    dist_std: Optional[float] = None
    dist_max: Optional[float] = None
    angle_rmse: Optional[float] = None
    angle_std: Optional[float] = None
    angle_max: Optional[float] = None


@dataclass
class ComparisonResult:
    reports: List[TrackingReport]
    rows: List[ComparisonRow]

    @property
    def total_failure(self) -> bool:
        return bool(self.reports) and all(report.failed for report in self.reports)


def _mean_or_none(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(present)) if present else None


def aggregate_reports(reports: Sequence[TrackingReport], controller: str, trajectory: str) -> ComparisonRow:
    group = [r for r in reports if r.controller == controller and r.trajectory == trajectory]
    ok = [r for r in group if not r.failed]
    row = ComparisonRow(controller, trajectory, len(group), len(group) - len(ok))
    for metric in ('dist_rmse', 'dist_std', 'dist_max', 'angle_rmse', 'angle_std', 'angle_max'):
        setattr(row, metric, _mean_or_none([getattr(r, metric) for r in ok]))
    return row


def run_comparison(controllers: Dict[str, Callable[[], Controller]], specs: Sequence[TrajectorySpec],
                   env_factory: Callable[[], MagneticCapsuleEnv], n_trials: int = 5,
                   seeds: Optional[Sequence[int]] = None, root_seed: int = 0, jobs: int = 1,
                   durations: Optional[Dict[str, float]] = None,
                   supervisors: Optional[Dict[str, SupervisorConfig]] = None) -> ComparisonResult:
    """
    Every controller on every trajectory for every trial seed.

    ``controllers`` maps a label to a factory so each trial owns a fresh
    controller; ``env_factory`` likewise builds one environment per trial.
    Results are ordered by (controller, trajectory, seed) regardless of
    ``jobs``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    seeds = list(seeds) if seeds is not None else trial_seeds(root_seed, n_trials)
    if len(seeds) < n_trials:
        raise ValueError(f"{n_trials} trials requested but only {len(seeds)} seeds given")
    seeds = seeds[:n_trials]
    durations = durations or {}
    supervisors = supervisors or {}

    jobs_list = [(label, spec, seed) for label in controllers for spec in specs for seed in seeds]

    def run_one(job) -> TrackingReport:
        label, spec, seed = job
        try:
            controller = controllers[label]()
            report = run_tracking_trial(controller, env_factory(), spec, durations.get(spec.name), seed,
                                        supervisors.get(spec.name))
        except MagCapsuleError as error:
            logger.warning(f"Trial {label}/{spec.name}/seed {seed} could not run: {error}")
            report = TrackingReport(label, spec.name, int(seed), failed=True, failure_reason=str(error))
        report.controller = label
        return report

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            reports = list(executor.map(run_one, jobs_list))
    else:
        reports = [run_one(job) for job in jobs_list]

    rows = [aggregate_reports(reports, label, spec.name) for label in controllers for spec in specs]
    return ComparisonResult(reports, rows)


# -- rendering ---------------------------------------------------------------

def _mm(value: Optional[float]) -> str:
    return '---' if value is None else f"{value * 1e3:.2f}"


def _deg(value: Optional[float]) -> str:
    return '---' if value is None else f"{math.degrees(value):.2f}"


TABLE_HEADERS = ['Trajectory', 'Controller', 'Dist. RMSE (mm)', 'Dist. Std (mm)', 'Dist. Max (mm)',
                 'Angle RMSE (deg)', 'Angle Std (deg)', 'Angle Max (deg)']


def _align(rows: List[List[str]]) -> str:
    widths = [max(len(row[col]) for row in rows) for col in range(len(rows[0]))]
    lines = ['  '.join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, '  '.join('-' * width for width in widths))
    return '\n'.join(lines) + '\n'


def render_comparison_table(rows: Sequence[ComparisonRow], n_trials: Optional[int] = None) -> str:
    """Consolidated table, one block per trajectory; missing angle metrics print as ---."""
    body = [TABLE_HEADERS]
    for row in sorted(rows, key=lambda r: r.trajectory):
        label = row.controller.upper()
        if row.failed:
            label = f"{label} ({row.failed}/{row.trials} failed)"
        body.append([row.trajectory, label, _mm(row.dist_rmse), _mm(row.dist_std), _mm(row.dist_max),
                     _deg(row.angle_rmse), _deg(row.angle_std), _deg(row.angle_max)])
    title = f"Tracking performance (average of {n_trials} trials)\n" if n_trials else ''
    return title + _align(body)


def render_trial_table(reports: Sequence[TrackingReport]) -> str:
    """Per-trial table with an Average row, used for the long path."""
    body = [['Trial'] + TABLE_HEADERS[2:]]
    ok = [r for r in reports if not r.failed]
    for index, report in enumerate(reports, start=1):
        if report.failed:
            body.append([str(index)] + ['failed'] + [''] * 5)
            continue
        body.append([str(index), _mm(report.dist_rmse), _mm(report.dist_std), _mm(report.dist_max),
                     _deg(report.angle_rmse), _deg(report.angle_std), _deg(report.angle_max)])
    average = [_mean_or_none([getattr(r, m) for r in ok])
               for m in ('dist_rmse', 'dist_std', 'dist_max', 'angle_rmse', 'angle_std', 'angle_max')]
    body.append(['Average'] + [_mm(v) for v in average[:3]] + [_deg(v) for v in average[3:]])
    return _align(body)


# -- PID tuning --------------------------------------------------------------

def grid_search_pid_gains(env_factory: Callable[[], MagneticCapsuleEnv], spec: TrajectorySpec,
                          kp_values: Sequence[float], kd_values: Sequence[float], ki: float = 5.0e-3,
                          base: PidGains = PidGains(), seed: int = 0) -> Tuple[PidGains, List[Dict[str, float]]]:
    """
    Coarse grid search of isotropic PID gains by distance RMSE on ``spec``.

    Returns the best gains and one row per grid point.
    """
    best: Optional[Tuple[float, PidGains]] = None
    results = []
    for kp in kp_values:
        for kd in kd_values:
            gains = PidGains((kp, kp), (ki, ki), (kd, kd), base.integral_limit, base.force_limit)
            env = env_factory()
            controller = PidAllocationController(gains, env.nominal_config, env.magnet)
            report = run_tracking_trial(controller, env, spec, seed=seed)
            score = float('inf') if report.failed else report.dist_rmse
            results.append({'kp': kp, 'kd': kd, 'ki': ki, 'dist_rmse': score})
            logger.debug(f"PID grid kp={kp:g} kd={kd:g}: rmse {score:.4g}")
            if best is None or score < best[0]:
                best = (score, gains)
    if best is None:
        raise ValueError("Empty PID gain grid")
    logger.info(f"Best PID gains kp={best[1].kp[0]:g} kd={best[1].kd[0]:g} (rmse {best[0] * 1e3:.2f} mm)")
    return best[1], results
