import math
from pathlib import Path

import numpy as np
import pytest

from core.controllers import FixedCurrentController, PidAllocationController, PidGains, SupervisorConfig, \
    ZeroController
from core.physics import CurrentCommand
from core.tracking import (ComparisonRow, TrackingReport, TrajectorySpec, closest_point_distance, error_statistics,
                           generate_reference, grid_search_pid_gains, heading_error, load_waypoints, longpath_spec,
                           render_comparison_table, render_trial_table, run_comparison, run_tracking_trial,
                           summarize_series)
from utils.errors import ArtifactIOError, ContractViolationError

LONGPATH = Path(__file__).resolve().parent.parent / 'data' / 'longpath.txt'


def test_rmse_of_hand_series():
    stats = error_statistics(np.array([1.0, 2.0, 3.0, 4.0, 5.0]) * 1e-3)
    assert stats['rmse'] == pytest.approx(math.sqrt(11.0) * 1e-3, rel=1e-12)
    assert stats['max'] == pytest.approx(5e-3)
    assert stats['rmse'] ** 2 == pytest.approx(stats['mean'] ** 2 + stats['std'] ** 2, rel=1e-12)


def test_empty_series_gives_nan():
    assert all(math.isnan(v) for v in error_statistics([]).values())


def test_constant_offset_series():
    report = summarize_series(TrackingReport('stub', 'line', 0), np.full(50, 0.003), None, d_near=0.002)
    assert report.dist_rmse == pytest.approx(0.003, abs=1e-9)
    assert report.dist_max == pytest.approx(0.003, abs=1e-9)
    assert report.dist_std == pytest.approx(0.0, abs=1e-9)
    assert report.angle_rmse is None
    assert report.post_convergence == {}


def test_post_convergence_starts_at_first_close_sample():
    distances = [0.01, 0.005, 0.001, 0.0005, 0.001]
    report = TrackingReport('stub', 'line', 0, series=[{'t': 0.05 * (k + 1)} for k in range(5)])
    summarize_series(report, distances, [0.5, -0.4, 0.1, 0.0, -0.1], d_near=0.002)
    assert report.converged_at == pytest.approx(0.15)
    assert report.post_convergence['dist_max'] == pytest.approx(0.001)
    assert report.angle_max == pytest.approx(0.5)
    assert report.post_convergence['angle_max'] == pytest.approx(0.1)


def test_square_reference_geometry():
    spec = TrajectorySpec.square(side=0.04, speed=0.005)
    assert spec.lap_time() == pytest.approx(32.0)
    np.testing.assert_allclose(generate_reference(spec, 0.0).position, [-0.02, -0.02])
    ref = generate_reference(spec, 4.0)
    np.testing.assert_allclose(ref.position, [0.0, -0.02], atol=1e-15)
    assert ref.heading_d == pytest.approx(0.0)
    assert generate_reference(spec, 12.0).heading_d == pytest.approx(math.pi / 2.0)
    np.testing.assert_allclose(generate_reference(spec, 32.0).position, [-0.02, -0.02], atol=1e-12)


def test_circle_reference_geometry():
    spec = TrajectorySpec.circle(radius=0.02, speed=0.005)
    quarter = spec.lap_time() / 4.0
    ref = generate_reference(spec, quarter)
    np.testing.assert_allclose(ref.position, [0.0, 0.02], atol=1e-12)
    # perpendicular to the travel direction (which points along -x here)
    assert ref.heading_d == pytest.approx(-math.pi / 2.0)
    with pytest.raises(ValueError):
        generate_reference(spec, -1.0)


def test_open_path_clamps_at_the_end():
    spec = TrajectorySpec.polyline(np.array([[0.0, 0.0], [0.01, 0.0], [0.01, 0.01]]), speed=0.01)
    ref = generate_reference(spec, 10.0)
    assert ref.clamped
    np.testing.assert_allclose(ref.position, [0.01, 0.01])
    assert ref.heading_d == pytest.approx(math.pi / 2.0)


def brute_force_circle_distance(center, radius, point, samples=20_001):
    """Dense sampling, then a second pass around the best sample."""
    phi = np.linspace(0.0, 2.0 * np.pi, samples)
    for _ in range(3):
        ring = np.stack([center[0] + radius * np.cos(phi), center[1] + radius * np.sin(phi)], axis=1)
        distances = np.linalg.norm(ring - point, axis=1)
        best = phi[np.argmin(distances)]
        step = phi[1] - phi[0]
        phi = np.linspace(best - 2.0 * step, best + 2.0 * step, samples)
    return float(np.min(distances))


def test_circle_closest_point_matches_brute_force(rng):
    spec = TrajectorySpec.circle(radius=0.02, center=(0.003, -0.001))
    for _ in range(20):
        point = rng.uniform(-0.04, 0.04, 2)
        brute = brute_force_circle_distance((0.003, -0.001), 0.02, point)
        assert closest_point_distance(spec, point) == pytest.approx(brute, abs=1e-9)


def test_square_closest_point_cases():
    spec = TrajectorySpec.square(side=0.04)
    assert closest_point_distance(spec, [0.0, 0.0]) == pytest.approx(0.02)
    assert closest_point_distance(spec, [0.0, -0.025]) == pytest.approx(0.005)
    assert closest_point_distance(spec, [0.023, 0.024]) == pytest.approx(math.hypot(0.003, 0.004))


def test_heading_error_wraps():
    assert heading_error(3.0, -3.0) == pytest.approx(6.0 - 2.0 * math.pi)
    assert heading_error(-3.0, 3.0) == pytest.approx(2.0 * math.pi - 6.0)
    assert heading_error(0.2, 0.1) == pytest.approx(0.1)


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        TrajectorySpec.square(side=0.0)
    with pytest.raises(ValueError):
        TrajectorySpec.polyline(np.array([[0.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        TrajectorySpec.circle(speed=-1.0)


def test_bundled_longpath_file():
    waypoints, metadata = load_waypoints(LONGPATH)
    assert waypoints.shape[1] == 2 and waypoints.shape[0] > 100
    assert metadata['min_passage_width'] == '0.010'
    spec = longpath_spec(LONGPATH)
    assert spec.min_passage_width == pytest.approx(0.010)
    assert not spec.closed


def test_waypoint_file_errors(tmp_path):
    with pytest.raises(ArtifactIOError):
        load_waypoints(tmp_path / 'missing.txt')
    bad = tmp_path / 'bad.txt'
    bad.write_text('0.0 0.0\n0.01 zero\n', encoding='utf-8')
    with pytest.raises(ArtifactIOError):
        load_waypoints(bad)
    short = tmp_path / 'short.txt'
    short.write_text('# only: one\n0.0 0.0\n', encoding='utf-8')
    with pytest.raises(ArtifactIOError):
        load_waypoints(short)


def test_resting_capsule_on_the_path_has_zero_distance_error(make_env):
    spec = TrajectorySpec.square(side=0.004, speed=0.005)
    report = run_tracking_trial(ZeroController(), make_env(), spec, seed=0)
    assert not report.failed
    assert len(report.series) == int(round(spec.lap_time() / 0.05))
    assert report.dist_rmse == 0.0 and report.dist_max == 0.0
    assert report.angle_rmse is None
    assert {'t', 'x', 'y', 'distance', 'array_x', 'i1', 'i4'} <= set(report.series_frame().columns)


def test_duration_shorter_than_a_lap_is_rejected(make_env):
    spec = TrajectorySpec.square(side=0.004, speed=0.005)
    with pytest.raises(ContractViolationError):
        run_tracking_trial(ZeroController(), make_env(), spec, duration=1.0)


def small_factories():
    return {'zero': ZeroController,
            'fcc': lambda: FixedCurrentController(CurrentCommand(np.array([0.05, -0.02, 0.0, 0.03])))}


def test_comparison_order_does_not_depend_on_jobs(make_env):
    specs = [TrajectorySpec.square(side=0.004, speed=0.005), TrajectorySpec.circle(radius=0.002, speed=0.005)]
    serial = run_comparison(small_factories(), specs, make_env, n_trials=2, seeds=[3, 4], jobs=1)
    threaded = run_comparison(small_factories(), specs, make_env, n_trials=2, seeds=[3, 4], jobs=3)
    keys = [(r.controller, r.trajectory, r.seed) for r in serial.reports]
    assert keys == [(r.controller, r.trajectory, r.seed) for r in threaded.reports]
    assert keys[:2] == [('zero', 'square', 3), ('zero', 'square', 4)]
    assert [r.dist_rmse for r in serial.reports] == [r.dist_rmse for r in threaded.reports]
    assert [(row.controller, row.trajectory) for row in serial.rows] == [
        ('zero', 'square'), ('zero', 'circle'), ('fcc', 'square'), ('fcc', 'circle')]


def test_comparison_needs_a_trial(make_env):
    with pytest.raises(ValueError):
        run_comparison(small_factories(), [TrajectorySpec.square(side=0.004)], make_env, n_trials=0)


def test_failed_factory_marks_the_trial(make_env):
    def broken():
        raise ContractViolationError('no checkpoint')

    result = run_comparison({'drl': broken}, [TrajectorySpec.square(side=0.004)], make_env, n_trials=1)
    assert result.total_failure
    assert result.rows[0].failed == 1 and result.rows[0].dist_rmse is None


def test_comparison_table_layout():
    rows = [ComparisonRow('pid', 'square', 5, 0, 0.0012, 0.0004, 0.003),
            ComparisonRow('drl', 'square', 5, 1, 0.0008, 0.0002, 0.002, 0.05, 0.02, 0.1)]
    table = render_comparison_table(rows, 5)
    lines = table.splitlines()
    assert lines[0] == 'Tracking performance (average of 5 trials)'
    assert lines[1].split()[:2] == ['Trajectory', 'Controller']
    pid_line = next(line for line in lines if 'PID' in line)
    assert pid_line.split()[-3:] == ['---', '---', '---']
    assert '1.20' in pid_line
    assert 'DRL (1/5 failed)' in table
    assert f"{math.degrees(0.05):.2f}" in table


def test_trial_table_has_an_average_row():
    reports = [TrackingReport('pid', 'longpath', s, dist_rmse=r, dist_std=0.0, dist_max=r)
               for s, r in enumerate([0.001, 0.003])]
    reports.append(TrackingReport('pid', 'longpath', 9, failed=True))
    lines = render_trial_table(reports).splitlines()
    assert lines[-1].split()[:2] == ['Average', '2.00']
    assert 'failed' in lines[-2]


def test_pid_grid_search_returns_every_point(make_env):
    spec = TrajectorySpec.square(side=0.004, speed=0.005)
    best, rows = grid_search_pid_gains(make_env, spec, kp_values=[0.01, 0.03], kd_values=[1e-3])
    assert [(row['kp'], row['kd']) for row in rows] == [(0.01, 1e-3), (0.03, 1e-3)]
    scores = [row['dist_rmse'] for row in rows]
    assert best.kp[0] == rows[int(np.argmin(scores))]['kp']
    with pytest.raises(ValueError):
        grid_search_pid_gains(make_env, spec, kp_values=[], kd_values=[1e-3])


@pytest.mark.slow
def test_supervisor_keeps_the_capsule_near_the_array(make_env, coils, magnet):
    spec = longpath_spec(LONGPATH)
    supervisor = SupervisorConfig()
    env = make_env()
    controller = PidAllocationController(PidGains(), coils, magnet)
    report = run_tracking_trial(controller, env, spec, seed=0, supervisor=supervisor)
    assert not report.failed
    assert report.supervisor_engaged_steps > 0
    poses = report.array_pose_series()
    steps = np.linalg.norm(np.diff(poses, axis=0), axis=1)
    assert np.all(steps <= supervisor.array_speed_limit * env.dt + 1e-12)
    capsule_travel = max(np.linalg.norm(np.diff(report.series_frame()[['x', 'y']].to_numpy(), axis=0), axis=1))
    assert report.max_array_offset <= supervisor.recenter_radius + capsule_travel + 1e-9
