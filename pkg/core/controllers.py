"""
Controllers compared in the tracking benchmark, and the array supervisor.

Every controller maps (measured state, goal, observation, dt) to a
CurrentCommand.  The PID baseline closes a position loop on force and then
inverts the dipole model through a regularized least-squares allocation; the
fixed-current baseline replays averaged hold currents; the learned controller
runs the deterministic actor.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats

from core.checkpoint import PolicyCheckpoint
from core.environment import GoalState, MagneticCapsuleEnv, Observation, ObservationScales, with_settings
from core.physics import (CapsuleMagnet, CapsuleState, CoilArrayConfig, CurrentCommand, N_COILS,
                          magnetic_force_world)
from core.sac import SacConfig, actor_sample, config_fingerprint
from utils.errors import AllocationDegenerateError, HoldMeasurementError, IncompatibleCheckpointError

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10


class Controller(ABC):
    """Common interface of every controller in a tracking rollout."""

    name = 'controller'
    controls_orientation = True

    def reset(self) -> None:
        """Clear internal state before a new rollout."""

    def on_array_moved(self, array_pose: Sequence[float]) -> None:
        """Called by the rollout after the supervisor moves the coil array."""

    @abstractmethod
    def compute(self, state: CapsuleState, goal: GoalState, observation: Observation, dt: float) -> CurrentCommand:
        ...


# -- fixed current -------------------------------------------------------------

class FixedCurrentController(Controller):
    name = 'fcc'

    def __init__(self, hold_currents: CurrentCommand):
        self.hold_currents = hold_currents

    def compute(self, state: CapsuleState, goal: GoalState, observation: Observation, dt: float) -> CurrentCommand:
        return self.hold_currents


def fcc_control(hold_currents: CurrentCommand) -> FixedCurrentController:
    return FixedCurrentController(hold_currents)


class ZeroController(FixedCurrentController):
    """All coils off; the capsule only coasts under damping."""

    name = 'zero'
    controls_orientation = False

    def __init__(self):
        super().__init__(CurrentCommand.zeros())


def collect_hold_samples(policy: Controller, env: MagneticCapsuleEnv, hold_steps: int, seed: Optional[int] = None,
                         start_state: Optional[CapsuleState] = None) -> np.ndarray:
    """
    Currents issued by ``policy`` while it holds the capsule at the array centre.

    The goal is the array centre. Once the stabilization criterion has held
    for K_hold steps, every command is recorded; losing the hold discards the
    samples collected so far.

    Returns:
        (hold_steps, 4) array of currents in amperes.
    """
    if hold_steps < 1:
        raise ValueError("hold_steps must be at least 1")
    budget = env.settings.max_steps
    hold_env = with_settings(env, terminate_on_success=False, max_steps=budget + hold_steps)
    center = hold_env.array_center
    if start_state is None:
        start_state = CapsuleState(float(center[0]), float(center[1]), 0.0)
    goal = GoalState(float(center[0]), float(center[1]), 0.0)
    observation = hold_env.reset(seed=seed, start_state=start_state, goal=goal)
    policy.reset()

    samples = []
    held = False
    first_hold: Optional[int] = None
    for step in range(budget + hold_steps):
        cmd = policy.compute(hold_env.measured_state(), goal, observation, hold_env.dt)
        if held:
            samples.append(cmd.currents.copy())
            if len(samples) == hold_steps:
                logger.info(f"Hold currents measured after {first_hold} steps: {np.mean(samples, axis=0)}")
                return np.asarray(samples)
        observation, _, done, info = hold_env.step(np.clip(cmd.to_action(hold_env.i_max), -1.0, 1.0))
        held = info['success']
        if held and first_hold is None:
            first_hold = step + 1
        if not held:
            samples = []
            if first_hold is None and step + 1 >= budget:
                break
        if done:
            break
    raise HoldMeasurementError(f"Policy '{policy.name}' did not hold the capsule at the array centre "
                               f"for {hold_steps} steps within {budget} steps")


def measure_hold_currents(policy: Controller, env: MagneticCapsuleEnv, hold_steps: int = 100,
                          seed: Optional[int] = None) -> CurrentCommand:
    """Average hold currents, the command replayed by fixed-current control."""
    samples = collect_hold_samples(policy, env, hold_steps, seed)
    return CurrentCommand(samples.mean(axis=0))


def hold_current_sem(samples: np.ndarray) -> np.ndarray:
    """Per-coil standard error of the mean; zero for a single sample."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        return np.zeros(samples.shape[1])
    return stats.sem(samples, axis=0)


# -- PID with current allocation -------------------------------------------

@dataclass(frozen=True)
class PidGains:
    """Per-axis gains on the planar position error (force in newtons)."""

    kp: Tuple[float, float] = (3.0e-2, 3.0e-2)
    ki: Tuple[float, float] = (5.0e-3, 5.0e-3)
    kd: Tuple[float, float] = (1.0e-3, 1.0e-3)
    integral_limit: float = 0.005
    force_limit: float = 6.0e-5

    def __post_init__(self):
        for name in ('kp', 'ki', 'kd'):
            values = tuple(float(v) for v in np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (2,)))
            if any(v < 0.0 for v in values):
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, values)
        if self.integral_limit <= 0.0 or self.force_limit <= 0.0:
            raise ValueError("integral_limit and force_limit must be positive")


class PidController:
    """Discrete position PID: integral clamped per axis, output saturated elementwise."""

    def __init__(self, gains: PidGains):
        self.gains = gains
        self.integral = np.zeros(2)
        self.prev_error: Optional[np.ndarray] = None

    def reset(self) -> None:
        self.integral = np.zeros(2)
        self.prev_error = None

    def compute(self, position: Sequence[float], target: Sequence[float], dt: float) -> np.ndarray:
        if dt <= 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        error = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
        limit = self.gains.integral_limit
        self.integral = np.clip(self.integral + error * dt, -limit, limit)
        derivative = np.zeros(2) if self.prev_error is None else (error - self.prev_error) / dt
        self.prev_error = error
        force = (np.asarray(self.gains.kp) * error + np.asarray(self.gains.ki) * self.integral
                 + np.asarray(self.gains.kd) * derivative)
        return np.clip(force, -self.gains.force_limit, self.gains.force_limit)


def pid_control(pid: PidController, state: CapsuleState, goal: GoalState, dt: float) -> np.ndarray:
    """Desired planar world-frame force; heading is not controlled."""
    return pid.compute(state.position, goal.position, dt)


@dataclass(frozen=True)
class AllocationMap:
    """Current-to-planar-force matrix A (2 x 4) at one capsule pose."""

    matrix: np.ndarray
    regularization: float = 1e-6
    singular_values: np.ndarray = field(default=None)

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float).reshape(2, N_COILS)
        if not np.all(np.isfinite(matrix)):
            raise ValueError("Allocation map has non-finite entries")
        object.__setattr__(self, 'matrix', matrix)
        object.__setattr__(self, 'singular_values', linalg.svdvals(matrix))


def build_allocation_map(config: CoilArrayConfig, state: CapsuleState, magnet: CapsuleMagnet,
                         regularization: float = 1e-6) -> AllocationMap:
    """Column j is the world-frame planar force of coil j at one ampere."""
    columns = []
    for coil in range(N_COILS):
        unit = np.zeros(N_COILS)
        unit[coil] = 1.0
        columns.append(magnetic_force_world(config, CurrentCommand(unit), state, magnet)[:2])
    return AllocationMap(np.column_stack(columns), regularization)


def allocate_currents(allocation: AllocationMap, desired_force: Sequence[float], i_max: float) -> CurrentCommand:
    """
    Tikhonov-regularized minimum-norm solution of A I = F, clamped to +-i_max.

    The damping is ``regularization * s_max``; a map whose condition number
    exceeds 1/RANK_TOLERANCE is rejected.
    """
    s = allocation.singular_values
    if s[0] <= 0.0 or s[-1] / s[0] < RANK_TOLERANCE:
        raise AllocationDegenerateError(s)
    u, s, vt = linalg.svd(allocation.matrix, full_matrices=False)
    damping = allocation.regularization * s[0]
    currents = vt.T @ ((s / (s ** 2 + damping ** 2)) * (u.T @ np.asarray(desired_force, dtype=float)))
    return CurrentCommand(np.clip(currents, -i_max, i_max))


class PidAllocationController(Controller):
    """Position PID on force, inverted through the nominal dipole model every step."""

    name = 'pid'
    controls_orientation = False

    def __init__(self, gains: PidGains, config: CoilArrayConfig, magnet: CapsuleMagnet,
                 regularization: float = 1e-6):
        self.pid = PidController(gains)
        self.config = config
        self.magnet = magnet
        self.regularization = regularization

    def reset(self) -> None:
        self.pid.reset()

    def on_array_moved(self, array_pose: Sequence[float]) -> None:
        self.config = self.config.with_array_pose(array_pose)

    def compute(self, state: CapsuleState, goal: GoalState, observation: Observation, dt: float) -> CurrentCommand:
        force = pid_control(self.pid, state, goal, dt)
        allocation = build_allocation_map(self.config, state, self.magnet, self.regularization)
        return allocate_currents(allocation, force, self.config.i_max)


# -- learned policy ----------------------------------------------------------

def drl_control(checkpoint: PolicyCheckpoint, observation: np.ndarray, i_max: float) -> CurrentCommand:
    """Deterministic mean action of the actor scaled to currents."""
    action, _ = actor_sample(checkpoint.actor, np.asarray(observation, dtype=float), deterministic=True)
    return CurrentCommand.from_action(action, i_max)


class DrlController(Controller):
    name = 'drl'

    def __init__(self, checkpoint: PolicyCheckpoint, i_max: float, scales: ObservationScales = ObservationScales(),
                 config: Optional[SacConfig] = None):
        if config is not None:
            checkpoint.require_fingerprint(config_fingerprint(config))
        input_size = checkpoint.actor.sizes[0]
        if input_size != len(Observation.__dataclass_fields__):
            raise IncompatibleCheckpointError(f"actor input {len(Observation.__dataclass_fields__)}",
                                              f"actor input {input_size}", "observation layout differs")
        self.checkpoint = checkpoint
        self.i_max = i_max
        self.scales = scales

    def compute(self, state: CapsuleState, goal: GoalState, observation: Observation, dt: float) -> CurrentCommand:
        return drl_control(self.checkpoint, observation.to_vector(self.scales), self.i_max)


# -- array supervisor --------------------------------------------------------

@dataclass(frozen=True)
class SupervisorConfig:
    recenter_radius: float = 0.025
    array_speed_limit: float = 0.020
    deadband: float = 0.005

    def __post_init__(self):
        if self.recenter_radius <= 0.0 or self.array_speed_limit <= 0.0 or self.deadband < 0.0:
            raise ValueError("Supervisor radii and speed must be positive")
        if self.deadband >= self.recenter_radius:
            raise ValueError("deadband must be smaller than recenter_radius")


def supervise_array(config: SupervisorConfig, capsule_pos: Sequence[float], array_pose: Sequence[float],
                    dt: float, engaged: bool = False) -> Tuple[np.ndarray, bool]:
    """
    One supervisor tick.

    The array starts moving once the capsule is farther than
    ``recenter_radius`` from its centre, travels toward the capsule at no more
    than ``array_speed_limit`` and stops once within ``deadband``.

    Returns:
        (new array pose, engaged flag for the next tick)
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    pose = np.asarray(array_pose, dtype=float).copy()
    offset = np.asarray(capsule_pos, dtype=float)[:2] - pose
    distance = float(np.linalg.norm(offset))
    engaged = engaged or distance > config.recenter_radius
    if engaged and distance > config.deadband:
        travel = min(config.array_speed_limit * dt, distance)
        pose = pose + offset / distance * travel
        distance -= travel
    if distance <= config.deadband:
        engaged = False
    return pose, engaged


class ArraySupervisor:
    """Stateful wrapper keeping the engage/disengage hysteresis between ticks."""

    def __init__(self, config: SupervisorConfig):
        self.config = config
        self.engaged = False

    def reset(self) -> None:
        self.engaged = False

    def update(self, capsule_pos: Sequence[float], array_pose: Sequence[float], dt: float) -> np.ndarray:
        pose, self.engaged = supervise_array(self.config, capsule_pos, array_pose, dt, self.engaged)
        return pose
