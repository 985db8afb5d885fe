import numpy as np
import pytest

from core.physics import (MU0, BodyWrench, CapsuleMagnet, CapsuleState, CoilArrayConfig, CurrentCommand,
                          FossenParams, IntegratorSettings, body_velocity, coil_moment, coriolis_term, dipole_field,
                          dipole_jacobian, field_jacobian, fossen_acceleration, kinetic_energy, magnetic_force_world,
                          magnetic_wrench, state_derivative, step, total_field, wrap_angle)
from utils.errors import SingularityError


def random_case(rng, coils):
    currents = rng.uniform(-coils.i_max, coils.i_max, 4)
    position = np.array([*rng.uniform(-0.04, 0.04, 2), 0.0])
    return CurrentCommand(currents), position


def fd_jacobian(fn, point, h=1e-6):
    columns = []
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = h
        columns.append((fn(point + offset) - fn(point - offset)) / (2.0 * h))
    return np.stack(columns, axis=1)


def fd_gradient(fn, point, h=1e-6):
    gradient = np.zeros(3)
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = h
        gradient[axis] = (fn(point + offset) - fn(point - offset)) / (2.0 * h)
    return gradient


def test_wrap_angle_cases():
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(3.0 * np.pi / 2.0) == pytest.approx(-np.pi / 2.0)
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(-7.0) == pytest.approx(-7.0 + 2.0 * np.pi)


def test_dipole_field_on_axis():
    moment = np.array([0.0, 0.0, 0.05])
    field = dipole_field(moment, np.zeros(3), np.array([0.0, 0.0, 0.02]))
    expected = MU0 / (4.0 * np.pi) * 2.0 * 0.05 / 0.02 ** 3
    np.testing.assert_allclose(field, [0.0, 0.0, expected], rtol=1e-12)


def test_jacobian_matches_finite_differences(rng, coils):
    for _ in range(100):
        cmd, point = random_case(rng, coils)
        analytic = field_jacobian(coils, cmd, point)
        numeric = fd_jacobian(lambda p: total_field(coils, cmd, p), point)
        assert np.linalg.norm(analytic - numeric) <= 1e-6 * np.linalg.norm(analytic)


def test_jacobian_is_symmetric_and_traceless(rng, coils):
    for _ in range(100):
        cmd, point = random_case(rng, coils)
        jacobian = field_jacobian(coils, cmd, point)
        scale = np.linalg.norm(jacobian)
        assert abs(np.trace(jacobian)) <= 1e-10 * scale
        assert np.linalg.norm(jacobian - jacobian.T) <= 1e-10 * scale


def test_single_dipole_jacobian_matches_finite_differences(rng):
    for _ in range(20):
        moment = rng.normal(size=3) * 0.05
        source = rng.normal(size=3) * 0.01
        point = source + rng.normal(size=3) * 0.03
        analytic = dipole_jacobian(moment, source, point)
        numeric = fd_jacobian(lambda p: dipole_field(moment, source, p), point, h=1e-7)
        assert np.linalg.norm(analytic - numeric) <= 1e-6 * np.linalg.norm(analytic)


def test_force_is_energy_gradient(rng, coils, magnet):
    for _ in range(100):
        cmd, point = random_case(rng, coils)
        theta = rng.uniform(-np.pi, np.pi)
        state = CapsuleState(point[0], point[1], theta)
        moment = magnet.moment(theta)
        force = magnetic_force_world(coils, cmd, state, magnet)
        gradient = fd_gradient(lambda p: moment @ total_field(coils, cmd, p), point)
        assert np.linalg.norm(force - gradient) <= 1e-5 * np.linalg.norm(force)


def test_torque_is_energy_derivative_in_heading(rng, coils, magnet):
    for _ in range(20):
        cmd, point = random_case(rng, coils)
        theta = rng.uniform(-np.pi, np.pi)
        field = total_field(coils, cmd, point)
        h = 1e-6
        numeric = (magnet.moment(theta + h) @ field - magnet.moment(theta - h) @ field) / (2.0 * h)
        wrench = magnetic_wrench(coils, cmd, CapsuleState(point[0], point[1], theta), magnet)
        assert wrench.tau_z == pytest.approx(numeric, rel=1e-6, abs=1e-18)


def biot_savart_loop(radius, current, point, segments=4000):
    phi = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    d_phi = 2.0 * np.pi / segments
    source = np.stack([radius * np.cos(phi), radius * np.sin(phi), np.zeros_like(phi)], axis=1)
    dl = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=1) * radius * d_phi
    r = point[None, :] - source
    distance = np.linalg.norm(r, axis=1)[:, None]
    return MU0 * current / (4.0 * np.pi) * np.sum(np.cross(dl, r) / distance ** 3, axis=0)


def test_dipole_approximates_current_loop_far_away(rng):
    radius, current = 1e-3, 2.0
    moment = np.array([0.0, 0.0, current * np.pi * radius ** 2])
    for _ in range(10):
        direction = rng.normal(size=3)
        point = 20.0 * radius * direction / np.linalg.norm(direction)
        loop = biot_savart_loop(radius, current, point)
        dipole = dipole_field(moment, np.zeros(3), point, r_min=1e-6)
        assert np.linalg.norm(dipole - loop) <= 0.01 * np.linalg.norm(loop)


def test_coil_moment_and_linearity(coils):
    np.testing.assert_allclose(coil_moment(coils, 2, 0.5), 0.05 * 0.5 * coils.coil_axes[2])
    with pytest.raises(IndexError):
        coil_moment(coils, 4, 1.0)
    point = np.array([0.01, -0.005, 0.0])
    a = CurrentCommand(np.array([0.3, -0.2, 0.1, 0.0]))
    b = CurrentCommand(np.array([-0.1, 0.4, 0.0, 0.25]))
    total = CurrentCommand(a.currents + b.currents)
    np.testing.assert_allclose(total_field(coils, total, point),
                               total_field(coils, a, point) + total_field(coils, b, point), rtol=1e-12)


def test_zero_currents_give_no_wrench(coils, magnet):
    wrench = magnetic_wrench(coils, CurrentCommand.zeros(), CapsuleState(0.01, 0.02, 0.3), magnet)
    assert wrench.as_array().tolist() == [0.0, 0.0, 0.0]


def test_singularity_guard():
    config = CoilArrayConfig(plane_offset=0.0005)
    with pytest.raises(SingularityError):
        total_field(config, CurrentCommand(np.ones(4)), np.array([0.03, 0.03, 0.0]))


def test_coriolis_does_no_work(rng):
    params = FossenParams(include_coriolis=True)
    for _ in range(20):
        nu = rng.normal(size=3)
        assert float(nu @ coriolis_term(params, nu)) == pytest.approx(0.0, abs=1e-20)


def test_step_rejects_bad_inputs(coils, magnet, params):
    state = CapsuleState()
    with pytest.raises(ValueError):
        step(state, CurrentCommand.zeros(), 0.0, coils, magnet, params)
    with pytest.raises(ValueError):
        step(state, CurrentCommand.zeros(), 0.5, coils, magnet, params)
    with pytest.raises(ValueError):
        step(state, CurrentCommand(np.array([1.5, 0.0, 0.0, 0.0])), 0.05, coils, magnet, params)


def test_zero_input_is_dissipative(coils, magnet, params):
    state = CapsuleState(0.0, 0.0, 0.2, 0.01, -0.008, 4.0)
    energy = kinetic_energy(state, params)
    for _ in range(200):
        state = step(state, CurrentCommand.zeros(), 0.05, coils, magnet, params)
        next_energy = kinetic_energy(state, params)
        assert next_energy <= energy + 1e-18
        energy = next_energy
    assert energy < 1e-12


def test_heading_stays_wrapped(coils, magnet, params):
    state = CapsuleState(0.0, 0.0, 3.1, 0.0, 0.0, 50.0)
    for _ in range(20):
        state = step(state, CurrentCommand.zeros(), 0.05, coils, magnet, params)
        assert -np.pi < state.theta <= np.pi


def rk4_rollout(state, schedule, dt, coils, magnet, params, substeps=100):
    y = state.as_array()
    h = dt / substeps

    def derivative(values, cmd):
        return state_derivative(CapsuleState.from_array(values), cmd, coils, magnet, params)

    for cmd in schedule:
        for _ in range(substeps):
            k1 = derivative(y, cmd)
            k2 = derivative(y + 0.5 * h * k1, cmd)
            k3 = derivative(y + 0.5 * h * k2, cmd)
            k4 = derivative(y + h * k3, cmd)
            y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def random_schedule(seed, coils, duration=10.0, dt=0.05, hold=20):
    rng = np.random.default_rng(seed)
    schedule = []
    for k in range(int(round(duration / dt))):
        if k % hold == 0:
            cmd = CurrentCommand(rng.uniform(-1.0, 1.0, 4) * coils.i_max)
        schedule.append(cmd)
    start = CapsuleState(*rng.uniform(-0.01, 0.01, 2), rng.uniform(-np.pi, np.pi))
    return start, schedule


def semi_implicit_rollout(start, schedule, coils, magnet, params, settings, dt=0.05):
    state = start
    peak_yaw_rate = peak_speed = 0.0
    for cmd in schedule:
        state = step(state, cmd, dt, coils, magnet, params, settings)
        peak_yaw_rate = max(peak_yaw_rate, abs(state.theta_dot))
        peak_speed = max(peak_speed, float(np.linalg.norm(state.velocity)))
    return state, peak_yaw_rate, peak_speed


def semi_implicit_vs_rk4(seed, coils, magnet, params, settings=None, dt=0.05):
    start, schedule = random_schedule(seed, coils, dt=dt)
    state, _, _ = semi_implicit_rollout(start, schedule, coils, magnet, params, settings or IntegratorSettings(), dt)
    reference = rk4_rollout(start, schedule, dt, coils, magnet, params)
    return float(np.linalg.norm(state.position - reference[:2]))


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_semi_implicit_euler_tracks_rk4(seed, coils, magnet, params):
    assert semi_implicit_vs_rk4(seed, coils, magnet, params) < 1e-4


@pytest.mark.slow
def test_semi_implicit_euler_tracks_rk4_twenty_seeds(coils, magnet, params):
    errors = [semi_implicit_vs_rk4(seed, coils, magnet, params) for seed in range(20)]
    assert max(errors) < 1e-4


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_safety_clamps_stay_clear_of_driven_motion(seed, coils, magnet, params):
    start, schedule = random_schedule(seed, coils)
    defaults = IntegratorSettings()
    clamped, peak_yaw_rate, peak_speed = semi_implicit_rollout(start, schedule, coils, magnet, params, defaults)
    free, _, _ = semi_implicit_rollout(start, schedule, coils, magnet, params,
                                       IntegratorSettings(max_speed=1e9, max_yaw_rate=1e9))
    assert peak_yaw_rate < 0.5 * defaults.max_yaw_rate
    assert peak_speed < 0.5 * defaults.max_speed
    np.testing.assert_array_equal(clamped.as_array(), free.as_array())


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_halving_the_substep_shrinks_the_error(seed, coils, magnet, params):
    coarse = semi_implicit_vs_rk4(seed, coils, magnet, params, IntegratorSettings(n_substeps=20))
    fine = semi_implicit_vs_rk4(seed, coils, magnet, params, IntegratorSettings(n_substeps=40))
    assert coarse >= 1.8 * fine


def test_torque_vanishes_when_the_magnet_is_aligned(coils, magnet):
    cmd = CurrentCommand(np.array([0.8, -0.3, 0.5, 0.1]))
    position = np.array([0.012, -0.007, 0.0])
    b = total_field(coils, cmd, position)
    aligned = CapsuleState(position[0], position[1], float(np.arctan2(b[1], b[0])))
    wrench = magnetic_wrench(coils, cmd, aligned, magnet)
    assert abs(wrench.tau_z) <= 1e-12 * magnet.moment_magnitude * np.linalg.norm(b[:2])
    reversed_state = CapsuleState(position[0], position[1], wrap_angle(aligned.theta + np.pi))
    assert abs(magnetic_wrench(coils, cmd, reversed_state, magnet).tau_z) <= \
        1e-12 * magnet.moment_magnitude * np.linalg.norm(b[:2])


def test_body_velocity_rotates_into_the_capsule_frame(rng):
    np.testing.assert_array_equal(body_velocity(CapsuleState(0.0, 0.0, 0.0, 0.3, -0.2, 1.5)), [0.3, -0.2, 1.5])
    np.testing.assert_allclose(body_velocity(CapsuleState(0.0, 0.0, np.pi / 2.0, 1.0, 0.0, 0.0)),
                               [0.0, -1.0, 0.0], atol=1e-15)
    for _ in range(10):
        state = CapsuleState(0.0, 0.0, rng.uniform(-np.pi, np.pi), *rng.normal(size=3))
        nu = body_velocity(state)
        assert np.hypot(nu[0], nu[1]) == pytest.approx(np.hypot(state.x_dot, state.y_dot), rel=1e-12)
        assert nu[2] == state.theta_dot


def test_fossen_acceleration_cases(rng):
    newton = FossenParams(m_a=np.array([2.0, 2.0, 1.0]), d_lin=np.zeros(3), d_quad=np.zeros(3))
    np.testing.assert_allclose(fossen_acceleration(newton, np.zeros(3), BodyWrench(4.0, 0.0, 0.0)), [2.0, 0.0, 0.0])
    params = FossenParams()
    assert fossen_acceleration(params, np.zeros(3), BodyWrench()).tolist() == [0.0, 0.0, 0.0]
    for _ in range(10):
        nu = rng.normal(size=3)
        assert float(nu @ fossen_acceleration(params, nu, BodyWrench())) < 0.0


def test_kappa_and_damping_scaling(coils, params):
    scaled = coils.with_kappa_scale([2.0, 1.0, 1.0, 1.0])
    np.testing.assert_allclose(scaled.kappas, [0.1, 0.05, 0.05, 0.05])
    damped = params.with_damping_scale([1.3, 1.3, 0.7])
    np.testing.assert_allclose(damped.d_lin, params.d_lin * [1.3, 1.3, 0.7])


def test_fluid_damping_matches_documented_default():
    params = FossenParams.from_fluid(2.0e-4, 1.2e-9)
    np.testing.assert_allclose(params.d_lin[:2], 32.0 / 3.0 * 2.5e-3 * 3.5e-3 * 64.0)
    np.testing.assert_allclose(params.d_quad[:2], 0.5 * 1100.0 * 1.2 * 1.4e-5)
    assert params.d_quad[2] == 0.0


def test_body_wrench_rejects_non_finite():
    with pytest.raises(ValueError):
        BodyWrench(float('nan'), 0.0, 0.0)


def test_magnet_moment_lies_along_heading():
    magnet = CapsuleMagnet(0.02)
    np.testing.assert_allclose(magnet.moment(np.pi / 2.0), [0.0, 0.02, 0.0], atol=1e-18)
