"""
Four-coil dipole actuation coupled to planar Fossen dynamics.

Coils are point dipoles m_i = kappa_i * I_i * n_i hovering ``plane_offset``
above the capsule plane (z = 0).  The capsule carries an in-plane permanent
moment along its heading.  Force is the field Jacobian contracted with that
moment, torque is the z-component of m x B, and both drive a diagonal Fossen
model in the body frame.

All functions here are pure: they only read their arguments.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from utils.errors import IntegrationDivergedError, SingularityError

logger = logging.getLogger(__name__)

MU0 = 4.0 * np.pi * 1e-7
N_COILS = 4


def wrap_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - float(angle), 2.0 * np.pi)
    return float(wrapped)


def rotation(theta: float) -> np.ndarray:
    """Body-to-inertial planar rotation R(theta)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class CapsuleState:
    """Planar pose and inertial-frame velocity of the capsule."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    x_dot: float = 0.0
    y_dot: float = 0.0
    theta_dot: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError(f"CapsuleState fields must be finite, got {self.as_array()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.x_dot, self.y_dot, self.theta_dot], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'CapsuleState':
        v = [float(item) for item in values]
        return cls(*v)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.x_dot, self.y_dot])

    def position3(self) -> np.ndarray:
        return np.array([self.x, self.y, 0.0])

    def speed(self) -> float:
        return float(np.hypot(self.x_dot, self.y_dot))


@dataclass(frozen=True)
class CurrentCommand:
    """The four coil currents in amperes."""

    currents: np.ndarray

    def __post_init__(self):
        currents = np.asarray(self.currents, dtype=float).reshape(-1)
        if currents.shape != (N_COILS,):
            raise ValueError(f"CurrentCommand needs {N_COILS} currents, got {currents.shape}")
        if not np.all(np.isfinite(currents)):
            raise ValueError(f"Currents must be finite, got {currents}")
        object.__setattr__(self, 'currents', currents)

    @classmethod
    def zeros(cls) -> 'CurrentCommand':
        return cls(np.zeros(N_COILS))

    @classmethod
    def from_action(cls, action: Sequence[float], i_max: float) -> 'CurrentCommand':
        """Map a normalized action in [-1, 1]^4 to currents I_i = a_i * I_max."""
        return cls(np.asarray(action, dtype=float) * i_max)

    def to_action(self, i_max: float) -> np.ndarray:
        return self.currents / i_max

    def within_limit(self, i_max: float, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.currents) <= i_max + tol))

    def clipped(self, i_max: float) -> 'CurrentCommand':
        return CurrentCommand(np.clip(self.currents, -i_max, i_max))


def _default_coil_positions() -> np.ndarray:
    half = 0.030
    return np.array([[half, half, 0.0], [-half, half, 0.0], [-half, -half, 0.0], [half, -half, 0.0]])


def _default_coil_axes() -> np.ndarray:
    return np.tile(np.array([0.0, 0.0, -1.0]), (N_COILS, 1))


@dataclass(frozen=True)
class CoilArrayConfig:
    """
    Geometry and calibration of the coil array.

    Coil positions are expressed in the array frame with z measured from the
    coil plane; the array frame sits ``plane_offset`` above the capsule plane
    and is translated over the workspace by ``array_pose``.
    """

    coil_positions: np.ndarray = field(default_factory=_default_coil_positions)
    coil_axes: np.ndarray = field(default_factory=_default_coil_axes)
    kappas: np.ndarray = field(default_factory=lambda: np.full(N_COILS, 0.05))
    array_pose: np.ndarray = field(default_factory=lambda: np.zeros(2))
    plane_offset: float = 0.020
    i_max: float = 1.0
    r_min: float = 1e-3

    def __post_init__(self):
        positions = np.asarray(self.coil_positions, dtype=float).reshape(N_COILS, 3)
        axes = np.asarray(self.coil_axes, dtype=float).reshape(N_COILS, 3)
        kappas = np.asarray(self.kappas, dtype=float).reshape(N_COILS)
        pose = np.asarray(self.array_pose, dtype=float).reshape(2)
        if np.any(np.abs(np.linalg.norm(axes, axis=1) - 1.0) > 1e-12):
            raise ValueError(f"Coil axes must be unit vectors, norms {np.linalg.norm(axes, axis=1)}")
        if np.any(kappas <= 0.0):
            raise ValueError(f"Calibration coefficients must be positive, got {kappas}")
        if self.plane_offset <= 0.0:
            raise ValueError(f"plane_offset must be positive, got {self.plane_offset}")
        if self.i_max <= 0.0 or self.r_min <= 0.0:
            raise ValueError("i_max and r_min must be positive")
        object.__setattr__(self, 'coil_positions', positions)
        object.__setattr__(self, 'coil_axes', axes)
        object.__setattr__(self, 'kappas', kappas)
        object.__setattr__(self, 'array_pose', pose)

    def world_coil_positions(self) -> np.ndarray:
        offset = np.array([self.array_pose[0], self.array_pose[1], self.plane_offset])
        return self.coil_positions + offset

    def with_array_pose(self, pose: Sequence[float]) -> 'CoilArrayConfig':
        return replace(self, array_pose=np.asarray(pose, dtype=float))

    def with_kappa_scale(self, multipliers: Sequence[float]) -> 'CoilArrayConfig':
        return replace(self, kappas=self.kappas * np.asarray(multipliers, dtype=float))


@dataclass(frozen=True)
class CapsuleMagnet:
    """Permanent moment of the capsule, lying in-plane along the heading."""

    moment_magnitude: float = 0.02

    def __post_init__(self):
        if self.moment_magnitude <= 0.0:
            raise ValueError(f"moment_magnitude must be positive, got {self.moment_magnitude}")

    def moment(self, theta: float) -> np.ndarray:
        return self.moment_magnitude * np.array([np.cos(theta), np.sin(theta), 0.0])


@dataclass(frozen=True)
class FossenParams:
    """Diagonal inertia (added mass folded in) and damping of the planar model."""

    m_a: np.ndarray = field(default_factory=lambda: np.array([2.0e-4, 2.0e-4, 1.2e-9]))
    d_lin: np.ndarray = field(default_factory=lambda: np.array([5.97e-3, 5.97e-3, 7.32e-8]))
    d_quad: np.ndarray = field(default_factory=lambda: np.array([9.24e-3, 9.24e-3, 0.0]))
    include_coriolis: bool = False

    def __post_init__(self):
        m_a = np.asarray(self.m_a, dtype=float).reshape(3)
        d_lin = np.asarray(self.d_lin, dtype=float).reshape(3)
        d_quad = np.asarray(self.d_quad, dtype=float).reshape(3)
        if np.any(m_a <= 0.0):
            raise ValueError(f"Inertia entries must be positive, got {m_a}")
        if np.any(d_lin < 0.0) or np.any(d_quad < 0.0):
            raise ValueError("Damping entries must be nonnegative")
        object.__setattr__(self, 'm_a', m_a)
        object.__setattr__(self, 'd_lin', d_lin)
        object.__setattr__(self, 'd_quad', d_quad)

    @classmethod
    def from_fluid(cls, mass: float, inertia: float, viscosity: float = 2.5e-3,
                   radius: float = 3.5e-3, drag_factor: float = 64.0, density: float = 1100.0,
                   drag_coefficient: float = 1.2, wetted_area: float = 1.4e-5,
                   include_coriolis: bool = False) -> 'FossenParams':
        """
        Derive damping from the surrounding fluid.

        Linear terms are the Stokes drag of a thin disc of ``radius`` (edgewise
        translation 32/3 mu a, in-plane rotation 32/3 mu a^3) scaled by
        ``drag_factor``, which lumps the interface losses a floating capsule
        sees.  Quadratic translation damping is the form drag 1/2 rho C_d A.
        """
        translational = 32.0 / 3.0 * viscosity * radius * drag_factor
        rotational = 32.0 / 3.0 * viscosity * radius ** 3 * drag_factor
        form = 0.5 * density * drag_coefficient * wetted_area
        return cls(
            m_a=np.array([mass, mass, inertia]),
            d_lin=np.array([translational, translational, rotational]),
            d_quad=np.array([form, form, 0.0]),
            include_coriolis=include_coriolis,
        )

    def with_damping_scale(self, multipliers: Sequence[float]) -> 'FossenParams':
        scale = np.asarray(multipliers, dtype=float).reshape(3)
        return replace(self, d_lin=self.d_lin * scale, d_quad=self.d_quad * scale)


@dataclass(frozen=True)
class BodyWrench:
    """Force in the capsule frame and torque about the vertical."""

    fx_b: float = 0.0
    fy_b: float = 0.0
    tau_z: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError(f"BodyWrench must be finite, got {self.as_array()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx_b, self.fy_b, self.tau_z], dtype=float)


@dataclass(frozen=True)
class IntegratorSettings:
    """Substepping and the safety clamps applied by ``step``."""

    n_substeps: int = 10
    dt_max: float = 0.1
    max_speed: float = 5.0
    max_yaw_rate: float = 2000.0

    def __post_init__(self):
        if self.n_substeps < 1:
            raise ValueError("n_substeps must be at least 1")
        if self.dt_max <= 0.0 or self.max_speed <= 0.0 or self.max_yaw_rate <= 0.0:
            raise ValueError("Integrator limits must be positive")


# ---------------------------------------------------------------------------
# Field model
# ---------------------------------------------------------------------------

def coil_moment(config: CoilArrayConfig, i: int, current: float) -> np.ndarray:
    """
    Dipole moment of coil ``i`` (0-based) carrying ``current``.

    Returns:
        kappa_i * I * n_i in A*m^2.
    """
    if not 0 <= i < N_COILS:
        raise IndexError(f"Coil index {i} out of range 0..{N_COILS - 1}")
    return config.kappas[i] * float(current) * config.coil_axes[i]


def dipole_field(moment: np.ndarray, source_pos: np.ndarray, eval_pos: np.ndarray,
                 r_min: float = 1e-3) -> np.ndarray:
    """Field of a point dipole, (mu0 / 4 pi r^3) (3 (m.r_hat) r_hat - m), in tesla."""
    separation = np.asarray(eval_pos, dtype=float) - np.asarray(source_pos, dtype=float)
    distance = float(np.linalg.norm(separation))
    if distance < r_min:
        raise SingularityError(distance, r_min)
    r_hat = separation / distance
    m = np.asarray(moment, dtype=float)
    return MU0 / (4.0 * np.pi * distance ** 3) * (3.0 * np.dot(m, r_hat) * r_hat - m)


def dipole_jacobian(moment: np.ndarray, source_pos: np.ndarray, eval_pos: np.ndarray,
                    r_min: float = 1e-3) -> np.ndarray:
    """
    Analytical gradient J[i, j] = dB_i / dx_j of a point dipole field.

    J = (3 mu0 / 4 pi r^5) [ (m.r) I + m r^T + r m^T - 5 (m.r) r r^T / r^2 ]
    """
    r = np.asarray(eval_pos, dtype=float) - np.asarray(source_pos, dtype=float)
    distance = float(np.linalg.norm(r))
    if distance < r_min:
        raise SingularityError(distance, r_min)
    m = np.asarray(moment, dtype=float)
    m_dot_r = float(np.dot(m, r))
    scale = 3.0 * MU0 / (4.0 * np.pi * distance ** 5)
    return scale * (m_dot_r * np.eye(3) + np.outer(m, r) + np.outer(r, m)
                    - 5.0 * m_dot_r * np.outer(r, r) / distance ** 2)


def _coil_terms(config: CoilArrayConfig, currents: np.ndarray, eval_pos: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-coil fields (4, 3) and Jacobians (4, 3, 3), vectorized over coils."""
    moments = (config.kappas * currents)[:, None] * config.coil_axes
    r = np.asarray(eval_pos, dtype=float)[None, :] - config.world_coil_positions()
    distance = np.linalg.norm(r, axis=1)
    if np.any(distance < config.r_min):
        raise SingularityError(float(distance.min()), config.r_min)
    m_dot_r = np.einsum('ij,ij->i', moments, r)
    fields = MU0 / (4.0 * np.pi) * (3.0 * m_dot_r[:, None] * r / distance[:, None] ** 5
                                    - moments / distance[:, None] ** 3)
    scale = 3.0 * MU0 / (4.0 * np.pi * distance ** 5)
    eye = np.eye(3)[None, :, :]
    jacobians = scale[:, None, None] * (
        m_dot_r[:, None, None] * eye
        + np.einsum('ni,nj->nij', moments, r)
        + np.einsum('ni,nj->nij', r, moments)
        - 5.0 * (m_dot_r / distance ** 2)[:, None, None] * np.einsum('ni,nj->nij', r, r)
    )
    return fields, jacobians


def total_field(config: CoilArrayConfig, cmd: CurrentCommand, eval_pos: np.ndarray) -> np.ndarray:
    """Superposed field of the four coils at ``eval_pos`` (world frame, tesla)."""
    fields, _ = _coil_terms(config, cmd.currents, eval_pos)
    return fields.sum(axis=0)


def field_jacobian(config: CoilArrayConfig, cmd: CurrentCommand, eval_pos: np.ndarray) -> np.ndarray:
    """Spatial gradient of the superposed field, 3x3 in T/m."""
    _, jacobians = _coil_terms(config, cmd.currents, eval_pos)
    return jacobians.sum(axis=0)


def magnetic_force_world(config: CoilArrayConfig, cmd: CurrentCommand, state: CapsuleState,
                         magnet: CapsuleMagnet) -> np.ndarray:
    """World-frame 3D force sum_i [grad B_i]^T m_PM; the z part is not used by the planar model."""
    _, jacobians = _coil_terms(config, cmd.currents, state.position3())
    return jacobians.sum(axis=0).T @ magnet.moment(state.theta)


def magnetic_wrench(config: CoilArrayConfig, cmd: CurrentCommand, state: CapsuleState,
                    magnet: CapsuleMagnet) -> BodyWrench:
    """
    Body-frame wrench on the capsule.

    Planar force components are rotated into the body frame with R^T(theta);
    the vertical force is computed and dropped.
    """
    fields, jacobians = _coil_terms(config, cmd.currents, state.position3())
    m_pm = magnet.moment(state.theta)
    b = fields.sum(axis=0)
    force = jacobians.sum(axis=0).T @ m_pm
    tau_z = m_pm[0] * b[1] - m_pm[1] * b[0]
    body_force = rotation(state.theta).T @ force[:2]
    return BodyWrench(float(body_force[0]), float(body_force[1]), float(tau_z))


# ---------------------------------------------------------------------------
# Hydrodynamics
# ---------------------------------------------------------------------------

def body_velocity(state: CapsuleState) -> np.ndarray:
    """nu = T(theta) q_dot."""
    planar = rotation(state.theta).T @ state.velocity
    return np.array([planar[0], planar[1], state.theta_dot])


def coriolis_term(params: FossenParams, nu: np.ndarray) -> np.ndarray:
    """C_A(nu) nu for diagonal added mass; does no work (nu . C_A nu = 0)."""
    m11, m22, _ = params.m_a
    u, v, r = nu
    return np.array([-m22 * v * r, m11 * u * r, (m22 - m11) * u * v])


def damping_coefficients(params: FossenParams, nu: np.ndarray) -> np.ndarray:
    """Diagonal of D(nu) = diag(D_lin) + diag(D_quad) |nu|."""
    return params.d_lin + params.d_quad * np.abs(nu)


def fossen_acceleration(params: FossenParams, nu: np.ndarray, wrench: BodyWrench) -> np.ndarray:
    """nu_dot = M_a^-1 (tau_ext - C_a(nu) nu - D(nu) nu), restoring term zero."""
    nu = np.asarray(nu, dtype=float)
    forcing = wrench.as_array() - damping_coefficients(params, nu) * nu
    if params.include_coriolis:
        forcing = forcing - coriolis_term(params, nu)
    return forcing / params.m_a


def state_derivative(state: CapsuleState, cmd: CurrentCommand, config: CoilArrayConfig,
                     magnet: CapsuleMagnet, params: FossenParams) -> np.ndarray:
    """
    Continuous-time derivative of (x, y, theta, x_dot, y_dot, theta_dot).

    Translational velocity is integrated in the inertial frame, which carries
    the rigid-body Coriolis terms implicitly for the isotropic in-plane inertia
    used here; ``include_coriolis`` adds the added-mass part on top.
    """
    nu = body_velocity(state)
    nu_dot = fossen_acceleration(params, nu, magnetic_wrench(config, cmd, state, magnet))
    planar = rotation(state.theta) @ nu_dot[:2]
    return np.array([state.x_dot, state.y_dot, state.theta_dot, planar[0], planar[1], nu_dot[2]])


def kinetic_energy(state: CapsuleState, params: FossenParams) -> float:
    nu = body_velocity(state)
    return float(0.5 * np.sum(params.m_a * nu * nu))


def step(state: CapsuleState, cmd: CurrentCommand, dt: float, config: CoilArrayConfig,
         magnet: CapsuleMagnet, params: FossenParams,
         settings: Optional[IntegratorSettings] = None,
         external_force: Optional[np.ndarray] = None) -> CapsuleState:
    """
    Advance the capsule by one control period.

    Semi-implicit Euler over ``settings.n_substeps`` substeps: the velocity
    update treats the (lagged) damping implicitly, then the pose is advanced
    with the new velocity.  ``external_force`` is an optional world-frame
    planar disturbance held over the period.

    Args:
        state: Current capsule state.
        cmd: Coil currents held over the period.
        dt: Control period in seconds, 0 < dt <= settings.dt_max.

    Returns:
        The new state with theta wrapped into (-pi, pi].
    """
    settings = settings or IntegratorSettings()
    if not 0.0 < dt <= settings.dt_max:
        raise ValueError(f"dt must lie in (0, {settings.dt_max}], got {dt}")
    if not cmd.within_limit(config.i_max):
        raise ValueError(f"Currents {cmd.currents} exceed the limit {config.i_max} A")

    h = dt / settings.n_substeps
    x, y, theta, x_dot, y_dot, theta_dot = state.as_array()
    disturbance = np.zeros(2) if external_force is None else np.asarray(external_force, dtype=float)

    for _ in range(settings.n_substeps):
        current = CapsuleState(x, y, theta, x_dot, y_dot, theta_dot)
        nu = body_velocity(current)
        tau = magnetic_wrench(config, cmd, current, magnet).as_array()
        if external_force is not None:
            tau[:2] += rotation(theta).T @ disturbance
        if params.include_coriolis:
            tau = tau - coriolis_term(params, nu)
        damping = damping_coefficients(params, nu)
        nu_new = (params.m_a * nu + h * tau) / (params.m_a + h * damping)

        planar = rotation(theta) @ nu_new[:2]
        speed = float(np.hypot(planar[0], planar[1]))
        if speed > settings.max_speed:
            planar = planar * (settings.max_speed / speed)
        x_dot, y_dot = float(planar[0]), float(planar[1])
        theta_dot = float(np.clip(nu_new[2], -settings.max_yaw_rate, settings.max_yaw_rate))

        x += h * x_dot
        y += h * y_dot
        theta = wrap_angle(theta + h * theta_dot)

        if not np.all(np.isfinite([x, y, theta, x_dot, y_dot, theta_dot])):
            logger.error(f"Integration diverged from state {state.as_array()} with currents {cmd.currents}")
            raise IntegrationDivergedError(f"Non-finite state after substep from {state.as_array()}")

    return CapsuleState(x, y, theta, x_dot, y_dot, theta_dot)
