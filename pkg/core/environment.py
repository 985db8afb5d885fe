"""
Episodic MDP around the capsule simulator.

The environment owns one mutable episode: true state, goal, the physics
parameters sampled at reset, an observation delay line and the trace of the
episode.  Rewards are always computed from the true state; sensor noise and
latency only affect what the controller sees.
"""

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.physics import (CapsuleMagnet, CapsuleState, CoilArrayConfig, CurrentCommand, FossenParams,
                          IntegratorSettings, N_COILS, step as physics_step, wrap_angle)
from utils.errors import ContractViolationError, EpisodeFinishedError

FIXED_POINT = 'fixed-point'
MOVING_REFERENCE = 'moving-reference'

OBS_DIM = 10
ACTION_DIM = N_COILS


@dataclass(frozen=True)
class GoalState:
    x_d: float
    y_d: float
    theta_d: float = 0.0
    source: str = FIXED_POINT

    def __post_init__(self):
        if not np.all(np.isfinite([self.x_d, self.y_d, self.theta_d])):
            raise ValueError("GoalState must be finite")
        if self.source not in (FIXED_POINT, MOVING_REFERENCE):
            raise ValueError(f"Unknown goal source '{self.source}'")
        object.__setattr__(self, 'theta_d', wrap_angle(self.theta_d))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x_d, self.y_d])


@dataclass(frozen=True)
class ObservationScales:
    """Normalization constants mapping physical channels to roughly [-1, 1]."""

    position: float = 0.04
    velocity: float = 0.02
    yaw_rate: float = 10.0


@dataclass(frozen=True)
class Observation:
    """
    What the controller sees, in physical units.

    e_x, e_y are x - x_d in the array frame; rel_x, rel_y locate the capsule
    relative to the array centre; the absolute heading enters as cos/sin.
    """

    e_x: float
    e_y: float
    e_theta: float
    x_dot: float
    y_dot: float
    theta_dot: float
    rel_x: float
    rel_y: float
    cos_theta: float
    sin_theta: float

    def to_vector(self, scales: ObservationScales = ObservationScales()) -> np.ndarray:
        return np.array([
            self.e_x / scales.position,
            self.e_y / scales.position,
            self.e_theta / np.pi,
            self.x_dot / scales.velocity,
            self.y_dot / scales.velocity,
            self.theta_dot / scales.yaw_rate,
            self.rel_x / scales.position,
            self.rel_y / scales.position,
            self.cos_theta,
            self.sin_theta,
        ])


@dataclass(frozen=True)
class RewardWeights:
    w_dist: float = 10.0
    w_dir: float = 0.5
    w_prog: float = 200.0
    w_prox: float = 0.5
    w_stab: float = 0.5
    w_lazy: float = 0.2
    w_smooth: float = 0.05
    w_energy: float = 0.01
    w_theta: float = 0.3
    r_terminal: float = 10.0
    d_near: float = 0.005
    v_eps: float = 0.002
    v_min: float = 0.0005
    k_hold: int = 10
    eps: float = 1e-9

    def __post_init__(self):
        values = [self.w_dist, self.w_dir, self.w_prog, self.w_prox, self.w_stab, self.w_lazy,
                  self.w_smooth, self.w_energy, self.w_theta, self.r_terminal, self.v_eps, self.v_min]
        if any(value < 0.0 for value in values) or self.k_hold < 0:
            raise ValueError("Reward weights must be nonnegative")
        if self.d_near <= 0.0:
            raise ValueError("d_near must be positive")


@dataclass(frozen=True)
class RandomizationSpec:
    """
    Per-episode (or, for the stand-in platform, per-instance) parameter draws.

    ``mode='uniform'`` samples multipliers uniformly in each interval;
    ``mode='extremes'`` picks one of the two interval endpoints per entry.
    """

    kappa_range: Tuple[float, float] = (1.0, 1.0)
    damping_range: Tuple[float, float] = (1.0, 1.0)
    position_noise_std: float = 0.0
    heading_noise_std: float = 0.0
    latency_steps: int = 0
    mode: str = 'uniform'
    disturbance_force_std: float = 0.0

    def __post_init__(self):
        for name in ('kappa_range', 'damping_range'):
            low, high = getattr(self, name)
            if not 0.0 < low <= high:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {(low, high)}")
            object.__setattr__(self, name, (float(low), float(high)))
        if self.position_noise_std < 0.0 or self.heading_noise_std < 0.0 or self.disturbance_force_std < 0.0:
            raise ValueError("Noise levels must be nonnegative")
        if self.latency_steps < 0:
            raise ValueError("latency_steps must be nonnegative")
        if self.mode not in ('uniform', 'extremes'):
            raise ValueError(f"Unknown randomization mode '{self.mode}'")

    @classmethod
    def nominal(cls) -> 'RandomizationSpec':
        return cls()

    def is_identity(self) -> bool:
        return (self.kappa_range == (1.0, 1.0) and self.damping_range == (1.0, 1.0)
                and self.position_noise_std == 0.0 and self.heading_noise_std == 0.0
                and self.latency_steps == 0 and self.disturbance_force_std == 0.0)

    def _draw(self, interval: Tuple[float, float], size: int, rng: np.random.Generator) -> np.ndarray:
        low, high = interval
        if self.mode == 'extremes':
            return np.where(rng.random(size) < 0.5, low, high)
        return rng.uniform(low, high, size)

    def sample_multipliers(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Coil-gain and damping multipliers; collapsed ranges give exact ones."""
        kappa = self._draw(self.kappa_range, N_COILS, rng)
        damping = self._draw(self.damping_range, 3, rng)
        return kappa, damping


@dataclass(frozen=True)
class EnvSettings:
    dt: float = 0.05
    max_steps: int = 400
    workspace_half_width: float = 0.04
    start_radius: float = 0.03
    goal_radius: float = 0.025
    terminate_on_success: bool = True
    scales: ObservationScales = field(default_factory=ObservationScales)


def composite_reward(prev: CapsuleState, curr: CapsuleState, goal: GoalState, action: Sequence[float],
                     prev_action: Sequence[float], weights: RewardWeights) -> float:
    """
    Shaped reward for one transition (terminal bonus excluded).

    r = -w_dist d + w_dir cos(v, g) + w_prog (d_prev - d)
        + [d < d_near] w_prox + [d < d_near and |v| < v_eps] w_stab
        - [d > d_near and |v| < v_min] w_lazy
        - w_smooth |a - a_prev|^2 - w_energy |a|^2 - w_theta |wrap(theta - theta_d)|
    """
    action = np.asarray(action, dtype=float)
    prev_action = np.asarray(prev_action, dtype=float)
    to_goal = goal.position - curr.position
    distance = float(np.linalg.norm(to_goal))
    prev_distance = float(np.linalg.norm(goal.position - prev.position))
    velocity = curr.velocity
    speed = float(np.linalg.norm(velocity))

    reward = -weights.w_dist * distance
    if distance > 0.0:
        g_hat = to_goal / distance
        reward += weights.w_dir * float(np.dot(velocity, g_hat)) / (speed + weights.eps)
    reward += weights.w_prog * (prev_distance - distance)
    if distance < weights.d_near:
        reward += weights.w_prox
        if speed < weights.v_eps:
            reward += weights.w_stab
    elif distance > weights.d_near and speed < weights.v_min:
        reward -= weights.w_lazy
    reward -= weights.w_smooth * float(np.sum((action - prev_action) ** 2))
    reward -= weights.w_energy * float(np.sum(action ** 2))
    reward -= weights.w_theta * abs(wrap_angle(curr.theta - goal.theta_d))
    return float(reward)


def reward_bound(weights: RewardWeights, settings: EnvSettings, max_speed: float) -> float:
    """Upper bound on |r| for one step given the workspace and speed clamp."""
    max_distance = 2.0 * np.sqrt(2.0) * settings.workspace_half_width + max_speed * settings.dt
    return (weights.w_dist * max_distance + weights.w_dir + weights.w_prog * max_speed * settings.dt
            + weights.w_prox + weights.w_stab + weights.w_lazy + weights.w_smooth * 4.0 * ACTION_DIM
            + weights.w_energy * ACTION_DIM + weights.w_theta * np.pi + weights.r_terminal)


class MagneticCapsuleEnv:
    """
    Capsule environment: reset / step with the composite reward.

    ``fixed_physics`` pins the sampled parameters for the lifetime of the
    instance; that is how the stand-in platform is built.
    """

    def __init__(self, config: CoilArrayConfig, magnet: CapsuleMagnet, params: FossenParams,
                 integrator: Optional[IntegratorSettings] = None, weights: Optional[RewardWeights] = None,
                 randomization: Optional[RandomizationSpec] = None, settings: Optional[EnvSettings] = None,
                 fixed_physics: bool = False, seed: Optional[int] = None):
        self.logger = logging.getLogger(__name__)
        self.nominal_config = config
        self.nominal_params = params
        self.magnet = magnet
        self.integrator = integrator or IntegratorSettings()
        self.weights = weights or RewardWeights()
        self.randomization = randomization or RandomizationSpec.nominal()
        self.settings = settings or EnvSettings()
        self.fixed_physics = fixed_physics
        self.rng = np.random.default_rng(seed)

        self.config = config
        self.params = params
        self.kappa_multipliers = np.ones(N_COILS)
        self.damping_multipliers = np.ones(3)
        if fixed_physics:
            self._apply_multipliers(*self.randomization.sample_multipliers(self.rng))

        self.state = CapsuleState()
        self.goal = GoalState(0.0, 0.0)
        self.prev_action = np.zeros(ACTION_DIM)
        self.steps = 0
        self.hold_count = 0
        self.done = True
        self.measurements: Deque[CapsuleState] = deque()
        self.trace: List[Dict[str, Any]] = []
        self.record_trace = False

    # -- configuration -----------------------------------------------------

    @property
    def dt(self) -> float:
        return self.settings.dt

    @property
    def i_max(self) -> float:
        return self.config.i_max

    @property
    def array_center(self) -> np.ndarray:
        return self.config.array_pose.copy()

    def _apply_multipliers(self, kappa: np.ndarray, damping: np.ndarray) -> None:
        self.kappa_multipliers = np.asarray(kappa, dtype=float)
        self.damping_multipliers = np.asarray(damping, dtype=float)
        pose = self.config.array_pose
        self.config = self.nominal_config.with_kappa_scale(self.kappa_multipliers).with_array_pose(pose)
        self.params = self.nominal_params.with_damping_scale(self.damping_multipliers)

    def set_array_pose(self, pose: Sequence[float]) -> None:
        """Move the coil-array frame (used by the repositioning supervisor)."""
        self.config = self.config.with_array_pose(pose)

    def set_goal(self, goal: GoalState) -> None:
        self.goal = goal

    def set_state(self, state: CapsuleState) -> None:
        """Overwrite the true state; the delay line is refilled with it."""
        self.state = state
        self.measurements = deque([self._measure(state)] * (self.randomization.latency_steps + 1),
                                  maxlen=self.randomization.latency_steps + 1)

    # -- episode -----------------------------------------------------------

    def reset(self, seed: Optional[int] = None, randomization: Optional[RandomizationSpec] = None,
              start_state: Optional[CapsuleState] = None, goal: Optional[GoalState] = None,
              array_pose: Optional[Sequence[float]] = None) -> Observation:
        """
        Start a new episode.

        Args:
            seed: Reseeds the environment stream; None continues the current one.
            randomization: Replaces the randomization spec before sampling.
            start_state: Fixed start instead of a random pose inside the workspace.
            goal: Fixed goal instead of a sampled fixed-point goal.
            array_pose: Array frame position for this episode.

        Returns:
            The initial observation.
        """
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if randomization is not None:
            self.randomization = randomization
        if array_pose is not None:
            self.config = self.config.with_array_pose(array_pose)
        if not self.fixed_physics:
            self._apply_multipliers(*self.randomization.sample_multipliers(self.rng))

        center = self.config.array_pose
        if start_state is None:
            start = center + self._sample_in_disc(self.settings.start_radius)
            start_state = CapsuleState(float(start[0]), float(start[1]), float(self.rng.uniform(-np.pi, np.pi)))
        if goal is None:
            target = center + self._sample_in_disc(self.settings.goal_radius)
            goal = GoalState(float(target[0]), float(target[1]), float(self.rng.uniform(-np.pi, np.pi)))

        self.goal = goal
        self.prev_action = np.zeros(ACTION_DIM)
        self.steps = 0
        self.hold_count = 0
        self.done = False
        self.trace = []
        self.set_state(start_state)
        return self._observe()

    def _sample_in_disc(self, radius: float) -> np.ndarray:
        r = radius * np.sqrt(self.rng.random())
        phi = self.rng.uniform(0.0, 2.0 * np.pi)
        return np.array([r * np.cos(phi), r * np.sin(phi)])

    def _measure(self, state: CapsuleState) -> CapsuleState:
        spec = self.randomization
        if spec.position_noise_std == 0.0 and spec.heading_noise_std == 0.0:
            return state
        noise = self.rng.normal(0.0, 1.0, 3) * np.array(
            [spec.position_noise_std, spec.position_noise_std, spec.heading_noise_std])
        return CapsuleState(state.x + noise[0], state.y + noise[1], wrap_angle(state.theta + noise[2]),
                            state.x_dot, state.y_dot, state.theta_dot)

    def observation_for(self, measured: CapsuleState) -> Observation:
        center = self.config.array_pose
        return Observation(
            e_x=measured.x - self.goal.x_d,
            e_y=measured.y - self.goal.y_d,
            e_theta=wrap_angle(measured.theta - self.goal.theta_d),
            x_dot=measured.x_dot,
            y_dot=measured.y_dot,
            theta_dot=measured.theta_dot,
            rel_x=measured.x - center[0],
            rel_y=measured.y - center[1],
            cos_theta=float(np.cos(measured.theta)),
            sin_theta=float(np.sin(measured.theta)),
        )

    def measured_state(self) -> CapsuleState:
        """Delayed, noisy state as a controller sees it."""
        return self.measurements[0]

    def _observe(self) -> Observation:
        return self.observation_for(self.measurements[0])

    def observation_vector(self, observation: Observation) -> np.ndarray:
        return observation.to_vector(self.settings.scales)

    def step(self, action: Sequence[float]) -> Tuple[Observation, float, bool, Dict[str, Any]]:
        """
        Apply a normalized action for one control period.

        Returns:
            (observation, reward, done, info) where info carries the true
            distance, heading error, currents and the reason the episode ended.
        """
        if self.done:
            raise EpisodeFinishedError("step() called on a finished episode; call reset() first")
        action = np.asarray(action, dtype=float).reshape(-1)
        if action.shape != (ACTION_DIM,) or np.any(np.abs(action) > 1.0 + 1e-12):
            raise ContractViolationError(f"Action must lie in [-1, 1]^{ACTION_DIM}, got {action}")

        cmd = CurrentCommand.from_action(np.clip(action, -1.0, 1.0), self.config.i_max)
        disturbance = None
        if self.randomization.disturbance_force_std > 0.0:
            disturbance = self.rng.normal(0.0, self.randomization.disturbance_force_std, 2)

        prev_state = self.state
        self.state = physics_step(prev_state, cmd, self.settings.dt, self.config, self.magnet,
                                  self.params, self.integrator, disturbance)
        self.steps += 1

        reward = composite_reward(prev_state, self.state, self.goal, action, self.prev_action, self.weights)
        self.prev_action = action

        distance = float(np.linalg.norm(self.state.position - self.goal.position))
        if distance < self.weights.d_near and self.state.speed() < self.weights.v_eps:
            self.hold_count += 1
        else:
            self.hold_count = 0

        success = self.hold_count >= self.weights.k_hold
        offset = np.abs(self.state.position - self.config.array_pose)
        out_of_bounds = bool(np.any(offset > self.settings.workspace_half_width))
        time_limit = self.steps >= self.settings.max_steps

        if success and self.settings.terminate_on_success:
            reward += self.weights.r_terminal
        self.done = bool((success and self.settings.terminate_on_success) or out_of_bounds or time_limit)

        self.measurements.append(self._measure(self.state))
        observation = self._observe()

        info = {
            'distance': distance,
            'heading_error': wrap_angle(self.state.theta - self.goal.theta_d),
            'currents': cmd.currents,
            'success': bool(success),
            'out_of_bounds': out_of_bounds,
            'time_limit': bool(time_limit),
            'terminal': bool(success and self.settings.terminate_on_success),
            'hold_count': self.hold_count,
        }
        if self.record_trace:
            self.trace.append(self._trace_row(action, reward))
        return observation, reward, self.done, info

    def _trace_row(self, action: np.ndarray, reward: float) -> Dict[str, Any]:
        row = {'t': round(self.steps * self.settings.dt, 10)}
        for name, value in zip(('x', 'y', 'theta', 'x_dot', 'y_dot', 'theta_dot'), self.state.as_array()):
            row[name] = float(value)
        for index, value in enumerate(action):
            row[f'a{index + 1}'] = float(value)
        row['reward'] = float(reward)
        row['done'] = int(self.done)
        return row

    def episode_trace(self) -> List[Dict[str, Any]]:
        return list(self.trace)


def make_real_env(perturbation: RandomizationSpec, config: CoilArrayConfig, magnet: CapsuleMagnet,
                  params: FossenParams, integrator: Optional[IntegratorSettings] = None,
                  weights: Optional[RewardWeights] = None, settings: Optional[EnvSettings] = None,
                  seed: Optional[int] = None,
                  training_randomization: Optional[RandomizationSpec] = None) -> MagneticCapsuleEnv:
    """
    Stand-in for the physical platform.

    Parameters are drawn once from ``perturbation`` and then stay fixed; sensor
    noise, latency and disturbances apply on every step.
    """
    if training_randomization is not None and not perturbation.is_identity():
        inside = (training_randomization.kappa_range[0] <= perturbation.kappa_range[0]
                  and perturbation.kappa_range[1] <= training_randomization.kappa_range[1])
        if inside and perturbation.mode == 'uniform':
            logging.getLogger(__name__).warning(
                "Perturbation kappa range lies inside the training randomization; "
                "the stand-in platform will not leave the training distribution")
    env = MagneticCapsuleEnv(config, magnet, params, integrator, weights, perturbation, settings,
                             fixed_physics=True, seed=seed)
    env.logger.info(f"Stand-in platform: kappa x{np.round(env.kappa_multipliers, 3).tolist()}, "
                    f"damping x{np.round(env.damping_multipliers, 3).tolist()}, "
                    f"latency {perturbation.latency_steps} steps")
    return env


def clone_env(env: MagneticCapsuleEnv, seed: Optional[int] = None) -> MagneticCapsuleEnv:
    """Independent instance sharing the configuration (and fixed physics) of ``env``."""
    clone = MagneticCapsuleEnv(env.nominal_config, env.magnet, env.nominal_params, env.integrator,
                               env.weights, env.randomization, env.settings, fixed_physics=False, seed=seed)
    if env.fixed_physics:
        clone.fixed_physics = True
        clone._apply_multipliers(env.kappa_multipliers, env.damping_multipliers)
    return clone


def with_settings(env: MagneticCapsuleEnv, **changes) -> MagneticCapsuleEnv:
    """Clone of ``env`` with some EnvSettings fields replaced."""
    clone = clone_env(env)
    clone.settings = replace(env.settings, **changes)
    return clone
